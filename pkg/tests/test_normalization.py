import numpy as np
import pytest

from driftlab.autodiff import Tensor
from driftlab.model import ModelConfig, SegNet
from driftlab.normalization import (
    EPS,
    Mode,
    NormKind,
    NormLayer,
    NormState,
    batch_norm_forward,
    continual_norm_forward,
    group_norm_forward,
    reestimate_population_stats,
    update_running_stats,
)

from .oracles import gradcheck


def _state(c, dtype=np.float64, mode=Mode.TRAIN, **kw):
    s = NormState.create(c, dtype=dtype, **kw)
    s.mode = mode
    return s


def _rand(shape, seed=0, scale=3.0, shift=2.0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) * scale + shift


class TestBatchNorm:
    def test_constant_channel_gives_zeros(self):
        out = batch_norm_forward(Tensor(np.full((2, 1, 3, 3), 5.0)), _state(1))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_inference_identity_stats(self):
        x = _rand((2, 3, 4, 4))
        out = batch_norm_forward(Tensor(x), _state(3, mode=Mode.INFERENCE))
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + EPS), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_train_moments(self, seed):
        out = batch_norm_forward(Tensor(_rand((4, 2, 3, 3), seed)), _state(2)).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_degenerate_batch(self):
        with pytest.raises(ValueError, match="degenerate batch"):
            batch_norm_forward(Tensor(np.ones((1, 2, 1, 1))), _state(2))

    def test_running_stats_use_unbiased_variance(self):
        x = _rand((2, 2, 2, 2))
        s = _state(2, momentum=1.0)
        batch_norm_forward(Tensor(x), s)
        np.testing.assert_allclose(s.running_mean, x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(s.running_var, x.var(axis=(0, 2, 3), ddof=1))

    def test_stats_only_updates_without_tape(self):
        x = Tensor(_rand((2, 2, 3, 3)), requires_grad=True)
        s = _state(2, mode=Mode.STATS_ONLY)
        out = batch_norm_forward(x, s)
        assert out._backward is None and not out.requires_grad
        assert s.num_batches == 1

    def test_inference_bit_identical_across_calls(self):
        s = _state(3, np.float32, Mode.INFERENCE)
        s.running_mean[:] = [0.3, -1.0, 2.0]
        s.running_var[:] = [0.5, 2.0, 9.0]
        x = Tensor(_rand((2, 3, 5, 5)).astype(np.float32))
        a = batch_norm_forward(x, s).data
        b = batch_norm_forward(x, s).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.INFERENCE])
    def test_gradients(self, mode):
        s = _state(3, mode=mode)
        s.running_mean[:] = [0.1, 0.2, -0.3]
        s.running_var[:] = [1.5, 0.5, 2.0]
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 3, 3))
        g0 = rng.standard_normal(3)
        b0 = rng.standard_normal(3)

        def fn(a, gamma, beta):
            s.gamma, s.beta = gamma, beta
            return batch_norm_forward(a, s)

        assert gradcheck(fn, [x, g0, b0]) < 1e-6


class TestRunningStats:
    def test_momentum_one_takes_batch(self):
        s = _state(2, momentum=1.0)
        update_running_stats(s, [3.0, 4.0], [5.0, 6.0])
        np.testing.assert_array_equal(s.running_mean, [3.0, 4.0])
        np.testing.assert_array_equal(s.running_var, [5.0, 6.0])

    def test_ema_step(self):
        s = _state(1)
        update_running_stats(s, [10.0], [1.0])
        assert s.running_mean[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("k", [1, 5, 20])
    def test_geometric_convergence(self, k):
        s = _state(1)
        for _ in range(k):
            update_running_stats(s, [10.0], [1.0])
        assert s.running_mean[0] == pytest.approx(10.0 * (1 - 0.9 ** k), rel=1e-12)

    def test_inference_is_read_only(self):
        with pytest.raises(RuntimeError):
            update_running_stats(_state(1, mode=Mode.INFERENCE), [1.0], [1.0])

    def test_cumulative_average_is_order_independent(self):
        batches = [np.array([v]) for v in (1.0, 7.0, 4.0)]
        results = []
        for order in ([0, 1, 2], [2, 0, 1]):
            s = _state(1, cumulative=True)
            for i in order:
                update_running_stats(s, batches[i], batches[i])
            results.append(s.running_mean[0])
        assert results[0] == pytest.approx(4.0) and results[1] == pytest.approx(4.0)


class TestGroupNorm:
    def test_groups_equal_channels_constant(self):
        x = np.ones((2, 4, 3, 3)) * np.arange(4)[None, :, None, None]
        np.testing.assert_array_equal(group_norm_forward(Tensor(x), 4).data, 0.0)

    def test_single_group_is_layer_norm(self):
        x = _rand((3, 4, 2, 2))
        out = group_norm_forward(Tensor(x), 1).data
        flat = x.reshape(3, -1)
        ref = (flat - flat.mean(1, keepdims=True)) / np.sqrt(flat.var(1, keepdims=True) + EPS)
        np.testing.assert_allclose(out.reshape(3, -1), ref, rtol=1e-12)

    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_slice_moments(self, groups):
        out = group_norm_forward(Tensor(_rand((3, 4, 5, 5), groups)), groups).data
        sl = out.reshape(3, groups, -1)
        assert np.abs(sl.mean(-1)).max() < 1e-5
        assert np.abs(sl.var(-1) - 1).max() < 1e-4

    def test_groups_must_divide(self):
        with pytest.raises(ValueError, match="divide"):
            group_norm_forward(Tensor(np.zeros((1, 6, 2, 2))), 4)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        args = [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)]
        assert gradcheck(lambda a, g, b: group_norm_forward(a, 2, g, b), args) < 1e-6
        assert gradcheck(lambda a: group_norm_forward(a, 2), args[:1]) < 1e-6


class TestContinualNorm:
    def test_fixed_point(self):
        # a +-1 checkerboard per channel is already standardized per slice and per channel
        c = 4
        pattern = np.indices((2, 4, 4)).sum(0) % 2 * 2.0 - 1.0
        x = np.repeat(pattern[:, None], c, axis=1)
        s = _state(c)
        s.gamma.data[:] = [1.0, 2.0, 0.5, -1.0]
        s.beta.data[:] = [0.0, 1.0, -1.0, 3.0]
        out = continual_norm_forward(Tensor(x), s, c).data
        ref = x * s.gamma.data[None, :, None, None] + s.beta.data[None, :, None, None]
        np.testing.assert_allclose(out, ref, atol=1e-4)

    @pytest.mark.parametrize("scale", [0.01, 1.0, 50.0])
    def test_train_moments_independent_of_scale(self, scale):
        out = continual_norm_forward(Tensor(_rand((4, 4, 3, 3)) * scale), _state(4), 2).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_lone_channel_scale_invariance(self):
        x = _rand((4, 4, 3, 3), 7)
        y = x.copy()
        y[:, 2] *= 10.0
        a = continual_norm_forward(Tensor(x), _state(4), 4).data
        b = continual_norm_forward(Tensor(y), _state(4), 4).data
        assert np.abs(a - b).max() < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_per_channel_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = _rand((3, 4, 4, 4), seed)
        y = x * rng.uniform(0.1, 20, 4)[None, :, None, None] + rng.uniform(-50, 50, 4)[None, :, None, None]
        a = continual_norm_forward(Tensor(x), _state(4), 4).data
        b = continual_norm_forward(Tensor(y), _state(4), 4).data
        assert np.abs(a - b).max() < 1e-4

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 4, 3, 3))
        s = _state(4)
        s.gamma.data[:] = rng.standard_normal(4)
        assert gradcheck(lambda a: continual_norm_forward(a, s, 2), [x]) < 1e-6


class TestNormKind:
    @pytest.mark.parametrize("text,kind,groups", [
        ("BatchNorm", "batch", None), ("bn", "batch", None), ("GroupNorm(4)", "group", 4),
        ("ContinualNorm", "continual", None), ("cn(2)", "continual", 2),
    ])
    def test_parse(self, text, kind, groups):
        nk = NormKind.parse(text)
        assert (nk.kind, nk.groups) == (kind, groups)
        assert NormKind.parse(str(nk)) == nk

    def test_default_groups(self):
        assert NormKind("continual").groups_for(16) == 8
        assert NormKind("continual").groups_for(4) == 4

    def test_bad_groups(self):
        with pytest.raises(ValueError):
            NormKind("group", 3).groups_for(16)

    def test_pinned_layer_ignores_train(self):
        layer = NormLayer("x", NormKind(), 2)
        layer.pinned = True
        layer.set_mode(Mode.TRAIN)
        assert layer.mode is Mode.INFERENCE


def _stream(seed=0, n=4, scale=1.0):
    rng = np.random.default_rng(seed)
    return [(rng.integers(0, 256, (8, 16, 16, 3)) * scale).clip(0, 255).astype(np.uint8) for _ in range(n)]


class TestReestimation:
    def _model(self, norm="BatchNorm"):
        return SegNet(ModelConfig(norm_kind=NormKind.parse(norm), seed=3))

    def test_weights_bit_identical(self):
        m = self._model()
        before = {k: v.data.tobytes() for k, v in m.named_params().items()}
        reestimate_population_stats(m, _stream())
        after = {k: v.data.tobytes() for k, v in m.named_params().items()}
        assert before == after

    def test_filter_matching_nothing(self):
        m = self._model()
        sd = {k: v.copy() for k, v in m.state_dict().items()}
        with pytest.raises(ValueError, match="stem.norm"):
            reestimate_population_stats(m, _stream(), "nothing.*")
        for k, v in m.state_dict().items():
            assert v.tobytes() == sd[k].tobytes()

    def test_empty_stream(self):
        m = self._model()
        sd = {k: v.copy() for k, v in m.state_dict().items()}
        with pytest.raises(ValueError, match="empty"):
            reestimate_population_stats(m, [])
        assert all(v.tobytes() == sd[k].tobytes() for k, v in m.state_dict().items())

    def test_only_selected_layers_change(self):
        m = self._model()
        before = {k: v.copy() for k, v in m.named_buffers().items()}
        reestimate_population_stats(m, _stream(), "stem.*")
        for k, v in m.named_buffers().items():
            changed = not np.array_equal(v, before[k])
            assert changed == k.startswith("stem."), k
        assert all(layer.mode is Mode.INFERENCE for layer in m.norm_layers())

    def test_rerun_on_same_stream_is_stable(self):
        m = self._model()
        data = _stream(1, n=6)
        reestimate_population_stats(m, data)
        first = {k: v.copy() for k, v in m.named_buffers().items()}
        reestimate_population_stats(m, data)
        for k, v in m.named_buffers().items():
            scale = np.sqrt(first[k.replace("running_mean", "running_var")]) if "mean" in k else first[k]
            assert np.max(np.abs(v - first[k]) / scale) < 0.05

    def test_cumulative_equals_batch_average(self):
        m = self._model()
        data = _stream(2, n=3)
        reestimate_population_stats(m, data, "stem.norm")
        # stem sees the raw input, so its stats are the mean of per-batch moments
        from driftlab.model import to_input
        conv = m.layers[0]
        means, vars_ = [], []
        for b in data:
            h = conv(to_input(b)).data.astype(np.float64)
            means.append(h.mean(axis=(0, 2, 3)))
            vars_.append(h.var(axis=(0, 2, 3), ddof=1))
        st = m.norm_layers()[0].state
        np.testing.assert_allclose(st.running_mean, np.mean(means, 0), rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(st.running_var, np.mean(vars_, 0), rtol=1e-4, atol=1e-5)

    def test_group_norm_model_has_nothing_to_estimate(self):
        with pytest.raises(ValueError, match="no batch-norm layer"):
            reestimate_population_stats(self._model("GroupNorm"), _stream())

    def test_continual_norm_layers_are_estimated(self):
        m = self._model("ContinualNorm")
        reestimate_population_stats(m, _stream(), ["enc1.*", "dec2.*"])
        assert m.norm_layers()[1].state.num_batches == 4
        assert m.norm_layers()[0].state.num_batches == 0
