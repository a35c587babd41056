import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oovkit.types import (
    OOV_MARKER,
    DetectionRecord,
    GroundTruthRecord,
    LabeledEmbedding,
    RunConfig,
    as_embedding,
    box_iou,
    derived_rng,
    l2_normalize,
    seeded_rng,
    validate_box,
)


class TestSeededRng:
    def test_same_seed_same_draws(self):
        a = seeded_rng(42).normal(size=100)
        b = seeded_rng(42).normal(size=100)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = seeded_rng(42).normal(size=100)
        b = seeded_rng(43).normal(size=100)
        assert not np.array_equal(a, b)

    def test_draws_finite(self):
        for seed in (0, 1, 2**63, -1):
            assert np.all(np.isfinite(seeded_rng(seed).normal(size=50)))

    def test_derived_streams_are_independent_and_reproducible(self):
        a1 = derived_rng(7, 0).normal(size=20)
        a2 = derived_rng(7, 0).normal(size=20)
        b = derived_rng(7, 1).normal(size=20)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(l2_normalize(v), v)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            l2_normalize([0.0, 0.0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=32))
    def test_result_is_unit_norm(self, values):
        v = np.asarray(values)
        if np.linalg.norm(v) == 0.0:
            return
        assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-9


class TestEmbeddingValidation:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            as_embedding([1.0, np.nan])

    def test_rejects_non_unit_when_flagged(self):
        with pytest.raises(ValueError):
            as_embedding([1.0, 1.0], unit_norm=True)

    def test_accepts_unit_when_flagged(self):
        v = as_embedding([0.6, 0.8], unit_norm=True)
        assert v.dtype == np.float64


class TestBoxes:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            validate_box((0, 0, 0, 1))
        with pytest.raises(ValueError):
            validate_box((0, 2, 1, 2))

    def test_iou_identity(self):
        assert box_iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_iou_disjoint(self):
        assert box_iou((0, 0, 1, 1), (2, 0, 3, 1)) == 0.0

    def test_iou_half_overlap(self):
        # 10x10 boxes offset by 5 on x: inter 50, union 150
        assert box_iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_iou_symmetry(self):
        a, b = (0, 0, 4, 4), (1, 1, 6, 5)
        assert box_iou(a, b) == box_iou(b, a)


class TestLabeledEmbedding:
    def test_oov_marker_is_not_an_iv_index(self):
        e = LabeledEmbedding(values=[1.0, 0.0], class_index=OOV_MARKER)
        assert e.is_oov
        with pytest.raises(ValueError):
            LabeledEmbedding(values=[1.0, 0.0], class_index=-2)

    def test_role_validation(self):
        with pytest.raises(ValueError):
            LabeledEmbedding(values=[1.0], class_index=0, role="thing")


class TestDetectionRecord:
    def test_argmax_consistency_enforced(self):
        DetectionRecord(box=(0, 0, 1, 1), scores=[0.1, 0.9], predicted_label=1, image_id="a")
        with pytest.raises(ValueError):
            DetectionRecord(box=(0, 0, 1, 1), scores=[0.1, 0.9], predicted_label=0, image_id="a")

    def test_tie_breaks_to_lowest_index(self):
        DetectionRecord(box=(0, 0, 1, 1), scores=[0.5, 0.5], predicted_label=0, image_id="a")
        with pytest.raises(ValueError):
            DetectionRecord(box=(0, 0, 1, 1), scores=[0.5, 0.5], predicted_label=1, image_id="a")

    def test_scores_range_enforced(self):
        with pytest.raises(ValueError):
            DetectionRecord(box=(0, 0, 1, 1), scores=[0.5, 1.5], predicted_label=1, image_id="a")

    def test_ground_truth_box_validity(self):
        with pytest.raises(ValueError):
            GroundTruthRecord(box=(3, 0, 1, 1), class_index=0, image_id="a")


class TestRunConfig:
    def test_roundtrip_stable(self):
        cfg = RunConfig(seed=123, k=4, n_seen=3, lambda_ld=0.5)
        again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            RunConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize(
        "field,value",
        [
            ("mask_ratio", 1.5),
            ("alpha_noise", -0.1),
            ("beta_reg", 0.0),
            ("pool_size", 0),
            ("top_k", 0),
            ("h", 0.0),
            ("tau_hat", -1.0),
            ("temperature_tau", 0.0),
            ("iterations", -1),
            ("fg_bg_ratio", (0, 1)),
        ],
    )
    def test_out_of_range_rejected(self, field, value):
        with pytest.raises(ValueError):
            RunConfig(**{field: value})
