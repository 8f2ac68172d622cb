import warnings

import numpy as np
import pytest

from driftlab import config, rng, synth, trainer
from driftlab.autodiff import OptimConfig
from driftlab.model import ModelConfig, SegNet
from driftlab.normalization import NormKind
from driftlab.trainer import (
    MethodState,
    TrainingDiverged,
    build_memory,
    ewc_loss,
    ewc_prepare,
    replay_step_batch,
    run_sequence,
    train_task,
)

SMALL = (8, 8, 16, 16)


def _model(seed=0, norm="BatchNorm"):
    return SegNet(ModelConfig(5, SMALL, NormKind.parse(norm), seed))


def _task(domain="Clear", n=16, seed=0):
    return synth.make_split(domain, "train", n, seed)


def _cfg(**kw):
    doc = {"name": "t", "model": {"widths": list(SMALL)}, "tasks": ["Clear", "NightLike"],
           "optim": {"steps": [12, 8]}, "data": {"train_size": 16, "val_size": 8}, "seeds": [0]}
    doc.update(kw)
    return config.parse(doc, env={})


def _same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


class TestTrainTask:
    def test_zero_steps_leaves_model(self):
        m = _model()
        ref = m.clone()
        hist = train_task(m, _task(), OptimConfig(total_steps=0))
        assert hist == [] and _same_state(m, ref)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            m = _model(3)
            train_task(m, _task(), OptimConfig(total_steps=6, batch_size=4), seed=3, tag="x")
            runs.append(m)
        assert _same_state(*runs)

    def test_changes_weights_and_logs_epochs(self):
        m = _model()
        ref = m.clone()
        hist = train_task(m, _task(n=16), OptimConfig(total_steps=10, batch_size=4), val=_task(n=4),
                          eval_every=2)
        assert not _same_state(m, ref)
        # 16 images at batch 4 -> 4 steps per epoch, so 3 epochs for 10 steps
        assert [h["step"] for h in hist] == [4, 8, 10]
        assert hist[0]["val_miou"] is None and hist[1]["val_miou"] is not None
        assert hist[-1]["val_miou"] is not None

    def test_class_count_checked(self):
        m = SegNet(ModelConfig(3, SMALL, NormKind.parse("BatchNorm"), 0))
        with pytest.raises(ValueError):
            train_task(m, _task(), OptimConfig(total_steps=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        m = _model()
        with pytest.raises(TrainingDiverged) as info:
            train_task(m, _task(), OptimConfig(base_lr=1e12, total_steps=20, batch_size=4))
        assert info.value.last_state.keys() == m.state_dict().keys()

    def test_frozen_prefix_untouched(self):
        m = _model()
        m.freeze_prefix("enc1")
        ref = m.clone()
        train_task(m, _task(), OptimConfig(total_steps=4, batch_size=4))
        a, b = m.state_dict(), ref.state_dict()
        for k in a:
            same = a[k].tobytes() == b[k].tobytes()
            assert same == (k.startswith("stem") or k.startswith("enc1")), k


class TestEWC:
    def test_zero_at_anchor(self):
        m = _model()
        info = ewc_prepare(m, _task(n=8), batch_size=4, batches=2)
        assert float(ewc_loss(m, info, 100.0).data) == 0.0

    def test_fisher_nonnegative_and_shapes(self):
        m = _model()
        info = ewc_prepare(m, _task(n=8), batch_size=4, batches=2)
        for k, p in m.named_params().items():
            assert info.fisher[k].shape == p.shape and info.fisher[k].min() >= 0
        assert any(f.max() > 0 for f in info.fisher.values())

    def test_prepare_leaves_running_stats(self):
        m = _model()
        before = {k: v.copy() for k, v in m.named_buffers().items()}
        ewc_prepare(m, _task(n=8), batch_size=4, batches=2)
        assert all(before[k].tobytes() == v.tobytes() for k, v in m.named_buffers().items())

    def test_penalty_value_and_gradient(self):
        m = _model()
        info = ewc_prepare(m, _task(n=8), batch_size=4, batches=2)
        g = np.random.default_rng(0)
        for p in m.named_params().values():
            p.data = p.data + g.normal(0, 0.01, p.shape).astype(p.dtype)
        lam = 7.0
        m.zero_grad()
        loss = ewc_loss(m, info, lam)
        loss.backward()
        expected = 0.0
        for k, p in m.named_params().items():
            d = p.data.astype(np.float64) - info.anchor[k]
            expected += lam / 2 * np.sum(info.fisher[k] * d * d)
            np.testing.assert_allclose(p.grad, lam * info.fisher[k] * d, rtol=1e-4, atol=1e-12)
        assert float(loss.data) == pytest.approx(expected, rel=1e-4)

    def test_negative_lambda(self):
        m = _model()
        info = ewc_prepare(m, _task(n=8), batch_size=4, batches=1)
        with pytest.raises(ValueError):
            ewc_loss(m, info, -1.0)
        with pytest.raises(config.ConfigError):
            _cfg(method={"name": "EWC", "lambda": -1})

    def test_lambda_zero_matches_finetune(self):
        ft = run_sequence(_cfg())
        ewc = run_sequence(_cfg(method={"name": "EWC", "lambda": 0.0}))
        assert _same_state(ft.models[-1], ewc.models[-1])
        np.testing.assert_array_equal(ft.table.grid, ewc.table.grid)

    def test_lambda_sweep_monotone(self):
        cfg = _cfg()
        train, val = trainer.load_data(cfg, 0)
        base = _model()
        train_task(base, train[0], cfg.tasks[0].optim, seed=0, tag="task0")
        info = ewc_prepare(base, train[0], 8, 4, 0, "f")
        drift = []
        for lam in (0.0, 10.0, 1e3, 1e6):
            m = base.clone()
            state = MethodState([info], lam, None, True)
            opt = OptimConfig(base_lr=0.005, total_steps=8, batch_size=8)
            train_task(m, train[1], opt, cfg.tasks[1].policy, state, seed=0, tag="task1")
            params = m.named_params()
            drift.append(np.sqrt(sum(np.sum((info.fisher[k] * (params[k].data - info.anchor[k])) ** 2)
                                     for k in params)))
        assert all(a > b for a, b in zip(drift, drift[1:])), drift


class TestReplay:
    def test_half_batch_from_memory(self):
        cur = _task(n=10)
        mem = _task("NightLike", n=20, seed=5)
        images, masks = replay_step_batch(cur, mem, 8, np.random.default_rng(0), np.arange(4))
        assert images.shape[0] == 8
        np.testing.assert_array_equal(images[:4], cur.images[:4])
        mem_bytes = {im.tobytes() for im in mem.images}
        assert sum(im.tobytes() in mem_bytes for im in images[4:]) == 4

    def test_uniform_draws(self):
        mem = _task(n=20)
        counts = np.zeros(20, int)
        g = np.random.default_rng(1)
        index = {im.tobytes(): i for i, im in enumerate(mem.images)}
        cur = _task("FogLike", n=4)
        for _ in range(2500):
            images, _ = replay_step_batch(cur, mem, 8, g, np.arange(4))
            for im in images[4:]:
                counts[index[im.tobytes()]] += 1
        n, p = counts.sum(), 1 / 20
        sigma = np.sqrt(n * p * (1 - p))
        assert n == 10_000
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)

    def test_errors(self):
        cur, mem = _task(n=4), _task(n=8)
        g = np.random.default_rng(0)
        with pytest.raises(ValueError):
            replay_step_batch(cur, mem, 7, g)
        with pytest.raises(ValueError):
            replay_step_batch(cur.subset([]), mem, 8, g)
        with pytest.raises(ValueError):
            replay_step_batch(cur, None, 8, g)

    def test_small_memory_warns(self):
        cur, mem = _task(n=4), _task(n=2)
        with pytest.warns(RuntimeWarning, match="replacement"):
            images, _ = replay_step_batch(cur, mem, 8, np.random.default_rng(0))
        assert images.shape[0] == 8

    def test_no_warning_when_memory_suffices(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            replay_step_batch(_task(n=4), _task(n=4), 8, np.random.default_rng(0))

    def test_memory_subset_of_earlier_tasks(self):
        t0 = _task(n=30)
        mem = build_memory([t0], 12, 0)
        assert len(mem) == 12 and set(mem.seeds) <= set(t0.seeds)

    @pytest.mark.parametrize("size", [0, 3])
    def test_config_rejects_small_memory(self, size):
        with pytest.raises(config.ConfigError):
            _cfg(method={"name": "Replay", "memory_size": size})

    def test_replay_run(self):
        res = run_sequence(_cfg(method={"name": "Replay", "memory_size": 8}))
        assert res.table.grid.shape == (2, 2) and not np.isnan(res.table.grid).any()


class TestSequences:
    def test_one_task(self):
        res = run_sequence(_cfg(tasks=["Clear"]))
        assert res.table.grid.shape == (1, 1)
        assert res.table.grid[0, 0] == res.histories[0][-1]["val_miou"]

    def test_two_tasks_fill_grid(self):
        res = run_sequence(_cfg())
        assert res.table.grid.shape == (2, 2) and not np.isnan(res.table.grid).any()
        assert len(res.models) == 2

    def test_offline_joint(self):
        res = run_sequence(_cfg(method={"name": "Offline"}))
        t = res.table
        assert t.joint and t.grid.shape == (1, 2) and not np.isnan(t.grid).any()
        assert np.isnan(t.forgetting(0))
        assert [r[2] for r in t.rows()] == ["joint", "joint"]

    def test_deterministic_tables(self):
        a = run_sequence(_cfg())
        b = run_sequence(_cfg())
        assert a.table.grid.tobytes() == b.table.grid.tobytes()
        assert _same_state(a.models[-1], b.models[-1])

    def test_checkpoints_and_cache(self, tmp_path):
        cfg = _cfg()
        a = run_sequence(cfg, 0, tmp_path / "a", tmp_path / "cache")
        b = run_sequence(cfg, 0, tmp_path / "b", tmp_path / "cache")
        assert [p.split("/")[-1] for p in a.checkpoint_dirs] == ["task0_Clear", "task1_NightLike"]
        assert len(list((tmp_path / "cache").iterdir())) == 1
        assert a.table.grid.tobytes() == b.table.grid.tobytes()
        for name in ("task0_Clear", "task1_NightLike"):
            for f in (tmp_path / "a" / name).iterdir():
                assert f.read_bytes() == (tmp_path / "b" / name / f.name).read_bytes()

    def test_freeze_before_second_task(self):
        cfg = _cfg(tasks=["Clear", {"domain": "NightLike", "freeze": {"upto": "stem"}}])
        res = run_sequence(cfg)
        a, b = res.models[0].state_dict(), res.models[1].state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a if k.startswith("stem"))

    def test_task0_key_ignores_later_tasks(self):
        a = _cfg()
        b = _cfg(tasks=["Clear", "FogLike"], method={"name": "EWC", "lambda": 5})
        c = _cfg(augment="Distort")
        assert trainer.task0_key(a, 0) == trainer.task0_key(b, 0)
        assert trainer.task0_key(a, 0) != trainer.task0_key(c, 0)
        assert trainer.task0_key(a, 0) != trainer.task0_key(a, 1)


def test_streams_are_independent_of_call_order():
    a = rng.stream(4, "shuffle", "task1", 0).permutation(10)
    rng.stream(4, "augment", "task1", 0, 0).random(100)
    b = rng.stream(4, "shuffle", "task1", 0).permutation(10)
    np.testing.assert_array_equal(a, b)
