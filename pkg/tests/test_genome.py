import numpy as np
import pytest

import oracles
from conftest import conv_layer, fc_layer, mlp_spec
from evocomp.errors import SchemaError, UnrepresentableRankError
from evocomp.genome import (
    GENE_PRUNE,
    GENE_SVD,
    GENE_TUCKER_IN,
    GENE_TUCKER_OUT,
    TASK_DECOMPOSE,
    TASK_DECOMPOSE_PRUNE,
    TASK_PRUNE_STRUCTURED,
    TASK_PRUNE_UNSTRUCTURED,
    TASKS,
    CompressionPlan,
    Prune,
    PruneDecompose,
    Svd,
    Tucker,
    build_schema,
    decode,
    decode_rank,
    encode,
    plan_from_json,
    plan_to_json,
    validate_genome,
)
from evocomp.model import ModelSpec


def mixed_model():
    """Three rank-1 layers and two k>1 convolutions."""
    layers = (
        conv_layer(0, 8, 3, kernel=3, h_in=8, padding=1),
        conv_layer(1, 12, 8, kernel=3, h_in=8, stride=2, padding=1),
        conv_layer(2, 16, 12, kernel=1, h_in=4),
        fc_layer(3, 10, 16),
        fc_layer(4, 4, 10, has_relu=False),
    )
    return ModelSpec(name="mixed", layers=layers)


class TestBuildSchema:
    def test_prune_schema_is_one_gene_per_layer(self):
        spec = mlp_spec([2, 32, 32, 2])
        schema = build_schema(spec, TASK_PRUNE_STRUCTURED)
        assert schema.length == 3
        assert all(d.kind == GENE_PRUNE for d in schema.descriptors)

    def test_decomposition_schema_length(self):
        spec = mixed_model()
        schema = build_schema(spec, TASK_DECOMPOSE)
        # 3 rank-1 layers + 2 genes per k>1 conv
        assert schema.length == 3 + 2 * 2
        kinds = [d.kind for d in schema.descriptors]
        assert kinds == [
            GENE_TUCKER_OUT, GENE_TUCKER_IN,
            GENE_TUCKER_OUT, GENE_TUCKER_IN,
            GENE_SVD, GENE_SVD, GENE_SVD,
        ]

    def test_combined_schema_concatenates(self):
        spec = mixed_model()
        assert build_schema(spec, TASK_DECOMPOSE_PRUNE).length == 5 + 7

    def test_three_rank1_four_conv_lengths(self):
        layers = (
            conv_layer(0, 4, 3, kernel=3, h_in=8, padding=1),
            conv_layer(1, 4, 4, kernel=3, h_in=8, padding=1),
            conv_layer(2, 6, 4, kernel=3, h_in=8, padding=1),
            conv_layer(3, 6, 6, kernel=3, h_in=8, padding=1),
            conv_layer(4, 8, 6, kernel=1, h_in=8),
            fc_layer(5, 8, 8),
            fc_layer(6, 2, 8, has_relu=False),
        )
        spec = ModelSpec(name="three-four", layers=layers)
        assert build_schema(spec, TASK_DECOMPOSE).length == 3 + 2 * 4 == 11
        assert build_schema(spec, TASK_DECOMPOSE_PRUNE).length == 7 + 11

    def test_decompose_needs_layers(self):
        empty = ModelSpec(name="none", layers=())
        with pytest.raises(SchemaError, match="no decomposable layer"):
            build_schema(empty, TASK_DECOMPOSE)

    def test_schema_lengths_on_random_models(self, rng):
        for _ in range(30):
            spec, _ = oracles.random_chain(rng)
            rank1 = spec.num_rank1_layers
            spatial = spec.num_spatial_conv_layers
            assert build_schema(spec, TASK_PRUNE_UNSTRUCTURED).length == spec.num_layers
            assert build_schema(spec, TASK_DECOMPOSE).length == rank1 + 2 * spatial
            assert (
                build_schema(spec, TASK_DECOMPOSE_PRUNE).length
                == spec.num_layers + rank1 + 2 * spatial
            )

    def test_max_ranks(self):
        spec = mixed_model()
        schema = build_schema(spec, TASK_DECOMPOSE)
        by_layer = {(d.layer_id, d.kind): d for d in schema.descriptors}
        assert by_layer[(0, GENE_TUCKER_OUT)].max_rank == 8
        assert by_layer[(0, GENE_TUCKER_IN)].max_rank == 3
        assert by_layer[(2, GENE_SVD)].max_rank == 12  # min(16, 12)
        assert by_layer[(4, GENE_SVD)].max_rank == 4


class TestDecode:
    def test_svd_top_code_is_full_rank(self):
        assert decode_rank(64, 512, 64) == 512

    def test_svd_bottom_code(self):
        assert decode_rank(1, 64, 64) == 1

    def test_tucker_half_code(self):
        assert decode_rank(4, 64, 8) == 32

    def test_rank_always_at_least_one(self):
        assert decode_rank(1, 2, 64) == 1

    def test_prune_gene_passthrough(self):
        spec = mlp_spec([2, 8, 2])
        schema = build_schema(spec, TASK_PRUNE_STRUCTURED)
        plan = decode(np.array([0.0, 0.25]), schema, spec)
        assert plan.actions == (Prune(0.0, True), Prune(0.25, True))

    def test_unstructured_task_marks_actions(self):
        spec = mlp_spec([2, 8, 2])
        schema = build_schema(spec, TASK_PRUNE_UNSTRUCTURED)
        plan = decode(np.array([0.5, 0.5]), schema, spec)
        assert all(not a.structured for a in plan.actions)

    def test_combined_decode(self):
        spec = mixed_model()
        schema = build_schema(spec, TASK_DECOMPOSE_PRUNE)
        genome = np.array([0.1, 0.2, 0.0, 0.3, 0.0, 4, 2, 8, 4, 32, 40, 2])
        plan = decode(genome, schema, spec)
        assert plan[0] == PruneDecompose(0.1, Tucker(rank_out=4, rank_in=1))
        assert plan[1] == PruneDecompose(0.2, Tucker(rank_out=12, rank_in=4))
        assert plan[2] == PruneDecompose(0.0, Svd(rank=6))
        assert plan[3] == PruneDecompose(0.3, Svd(rank=6))
        assert plan[4] == PruneDecompose(0.0, Svd(rank=1))

    def test_monotone_in_code(self):
        for max_rank in (1, 2, 3, 7, 17, 64, 500):
            for code_max in (8, 64):
                ranks = [decode_rank(c, max_rank, code_max) for c in range(1, code_max + 1)]
                assert ranks == sorted(ranks)
                assert all(1 <= r <= max_rank for r in ranks)
                assert ranks[-1] == max_rank

    def test_domain_violation_rejected(self):
        spec = mlp_spec([2, 8, 2])
        schema = build_schema(spec, TASK_PRUNE_STRUCTURED)
        with pytest.raises(SchemaError):
            decode(np.array([0.0, 1.5]), schema, spec)
        with pytest.raises(SchemaError):
            validate_genome(np.array([0.0]), schema)


class TestEncode:
    def test_prune_identity_embedding(self):
        spec = mlp_spec([2, 8, 2])
        schema = build_schema(spec, TASK_PRUNE_STRUCTURED)
        plan = CompressionPlan((Prune(0.35, True), Prune(0.0, True)))
        assert encode(plan, schema, spec).tolist() == [0.35, 0.0]

    def test_svd_full_rank_code(self):
        layers = (fc_layer(0, 512, 512, has_relu=False),)
        spec = ModelSpec(name="big", layers=layers)
        schema = build_schema(spec, TASK_DECOMPOSE)
        genome = encode(CompressionPlan((Svd(512),)), schema, spec)
        assert genome.tolist() == [64.0]

    def test_unrepresentable_rank_reports_nearest(self):
        layers = (fc_layer(0, 512, 512, has_relu=False),)
        spec = ModelSpec(name="big", layers=layers)
        schema = build_schema(spec, TASK_DECOMPOSE)
        with pytest.raises(UnrepresentableRankError) as err:
            encode(CompressionPlan((Svd(511),)), schema, spec)
        assert err.value.nearest_code == 64

    def test_round_trip_over_random_representable_plans(self, rng):
        for _ in range(200):
            spec, _ = oracles.random_chain(rng)
            task = TASKS[int(rng.integers(0, len(TASKS)))]
            try:
                schema = build_schema(spec, task)
            except SchemaError:
                continue
            genome = oracles.random_genome(schema, rng)
            plan = decode(genome, schema, spec)
            back = decode(encode(plan, schema, spec), schema, spec)
            assert back == plan


class TestPlanJson:
    def test_round_trip(self):
        spec = mixed_model()
        schema = build_schema(spec, TASK_DECOMPOSE_PRUNE)
        genome = np.array([0.1, 0.2, 0.0, 0.3, 0.0, 4, 2, 8, 4, 32, 40, 2])
        plan = decode(genome, schema, spec)
        wire = plan_to_json(plan)
        assert plan_from_json(wire, spec.num_layers) == plan

    def test_schema_json_shape(self):
        spec = mixed_model()
        schema = build_schema(spec, TASK_DECOMPOSE)
        entries = schema.to_json()
        assert entries[0] == {
            "layer": 0, "kind": GENE_TUCKER_OUT, "code_max": 8, "max_rank": 8,
        }
