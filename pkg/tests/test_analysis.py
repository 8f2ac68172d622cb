import numpy as np
import pytest

from driftlab import analysis
from driftlab.analysis import (
    MetricsTable,
    StitchCurve,
    confusion_and_miou,
    confusion_matrix,
    forgetting,
    learning_accuracy,
    stitching_curve,
)
from driftlab.model import ArchitectureMismatch, ModelConfig, SegNet
from driftlab.normalization import NormKind
from driftlab.synth import make_split

from .oracles import counting_miou


@pytest.fixture(scope="module")
def val():
    return make_split("Clear", "val", 16)


def _model(norm="BatchNorm", seed=0, widths=(16, 32, 64, 64)):
    return SegNet(ModelConfig(5, widths, NormKind.parse(norm), seed))


class TestMiou:
    def test_perfect(self):
        gt = np.random.default_rng(0).integers(0, 4, (5, 5))
        assert confusion_and_miou(gt, gt, 4)[1] == 100.0

    def test_disjoint(self):
        assert confusion_and_miou(np.zeros((2, 2)), np.ones((2, 2)), 2)[1] == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            h, w = rng.integers(1, 9, 2)
            k = int(rng.integers(2, 5))
            gt = rng.integers(0, k, (h, w))
            pred = rng.integers(0, k, (h, w))
            if rng.random() < 0.2:
                gt[rng.random((h, w)) < 0.3] = 255
                if (gt == 255).all():
                    gt[0, 0] = 0
            assert confusion_and_miou(pred, gt, k)[1] == counting_miou(pred, gt, k)

    def test_six_by_six_three_class(self):
        rng = np.random.default_rng(6)
        gt, pred = rng.integers(0, 3, (2, 6, 6))
        assert confusion_and_miou(pred, gt, 3)[1] == counting_miou(pred, gt, 3)

    def test_rows_are_ground_truth(self):
        cm = confusion_matrix(np.array([1, 1]), np.array([0, 1]), 2)
        np.testing.assert_array_equal(cm, [[0, 1], [0, 1]])

    def test_absent_classes_excluded(self):
        # class 2 appears in neither gt nor pred, so the mean is over two classes
        assert confusion_and_miou(np.array([0, 1]), np.array([0, 1]), 3)[1] == 100.0

    def test_ignore_only_is_error(self):
        with pytest.raises(ValueError):
            confusion_and_miou(np.zeros((2, 2)), np.full((2, 2), 255), 3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion_matrix(np.zeros((2, 2)), np.zeros((2, 3)), 3)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            confusion_matrix(np.full((2, 2), 3), np.zeros((2, 2)), 3)

    def test_batched_equals_merged(self):
        rng = np.random.default_rng(1)
        p, g = rng.integers(0, 5, (2, 4, 8, 8))
        total = sum(confusion_matrix(p[i], g[i], 5) for i in range(4))
        np.testing.assert_array_equal(total, confusion_matrix(p, g, 5))


class TestForgetting:
    def test_learning_accuracy(self):
        assert learning_accuracy(72.0, 57.7) == pytest.approx(64.85)

    def test_forgetting(self):
        assert forgetting(72.0, 38.8) == pytest.approx(33.2)

    @pytest.mark.parametrize("m", [0.0, 41.5, 100.0])
    def test_no_change_no_forgetting(self, m):
        assert forgetting(m, m) == 0.0

    def test_symmetric(self):
        assert learning_accuracy(10.0, 30.0) == learning_accuracy(30.0, 10.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            learning_accuracy()

    def test_table(self):
        t = MetricsTable.empty(["Clear", "NightLike"], "FineTune", 3)
        for (p, q), v in {(0, 0): 72.0, (0, 1): 10.5, (1, 0): 38.8, (1, 1): 57.7}.items():
            t.set(p, q, v)
        assert t.forgetting(0) == pytest.approx(33.2)
        assert t.learning_accuracy == pytest.approx(64.85)
        assert t.zero_shot == [10.5]
        assert len(t.rows()) == 4 and t.rows()[0] == ("FineTune", 3, 0, 0, "Clear", 72.0)

    def test_table_range_checked(self):
        t = MetricsTable.empty(["Clear"])
        with pytest.raises(ValueError):
            t.set(0, 0, 101.0)

    def test_aggregate(self):
        assert analysis.aggregate([3.0]) == (3.0, 0.0)
        mean, std = analysis.aggregate([1.0, 2.0, 3.0])
        assert (mean, std) == (2.0, 1.0)


class TestStitching:
    @pytest.mark.parametrize("norm", ["BatchNorm", "GroupNorm", "ContinualNorm"])
    def test_self_stitch_is_100(self, val, norm):
        m = _model(norm)
        curve = stitching_curve(m, m, val)
        assert curve.relative == [100.0] * len(curve.cuts)
        assert curve.cuts[-1] == analysis.FULL_CUT

    def test_head_reinit(self, val):
        f0 = _model(seed=0)
        f1 = f0.clone()
        fresh = _model(seed=99)
        for k, v in fresh.state_dict().items():
            if k.startswith("head"):
                f1.named_params()[k].data[...] = v
        curve = stitching_curve(f0, f1, val)
        assert curve.relative[:-1] == [100.0] * (len(curve.cuts) - 1)
        assert curve.relative[-1] != 100.0

    def test_zones(self, val):
        m = _model()
        curve = stitching_curve(m, m, val)
        assert [z for c, z, _ in curve.entries() if c.startswith("enc") or c == "stem"] == ["encoder"] * 4
        assert set(curve.zones[4:]) == {"decoder"}

    def test_final_entry_matches_table(self, val):
        f0, f1 = _model(seed=0), _model(seed=1)
        curve = stitching_curve(f0, f1, val)
        expected = 100 * analysis.evaluate(f1, val) / analysis.evaluate(f0, val)
        assert curve.value("full") == pytest.approx(expected, rel=1e-12)

    def test_mismatch(self, val):
        with pytest.raises(ArchitectureMismatch):
            stitching_curve(_model(), _model(widths=(8, 16, 32, 32)), val)

    def test_encoder_min(self):
        c = StitchCurve(["stem", "enc1", "dec1", "full"], [99.0, 80.0, 50.0, 40.0],
                        ["encoder", "encoder", "decoder", "decoder"], 70.0)
        assert c.encoder_min() == 80.0

    def test_relative_needs_positive_reference(self):
        with pytest.raises(ValueError):
            analysis.relative_miou(10.0, 0.0)


class TestZeroShot:
    def test_untrained_near_chance(self):
        for seed in range(3):
            m = _model(seed=seed)
            for domain in ("Clear", "NightLike"):
                assert analysis.zero_shot_eval(m, make_split(domain, "val", 16)) < 100 / 5 + 10

    def test_class_count_checked(self, val):
        m = SegNet(ModelConfig(3, (8, 8, 8, 8), NormKind.parse("BatchNorm"), 0))
        with pytest.raises(ValueError):
            analysis.evaluate(m, val)
