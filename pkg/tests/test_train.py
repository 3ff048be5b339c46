import dataclasses
import math

import numpy as np
import pytest

from c2vkd import train as T
from c2vkd.gradcheck import tiny_config
from c2vkd.tensor import Tensor


def small_config(**kw):
    base = dataclasses.replace(
        tiny_config(0),
        n_train=12,
        n_val=6,
        batch_size=4,
        max_iters=6,
        eval_every=3,
        teacher_iters=4,
        lambda_g=1.0,
        lambda_p=1.0,
        lambda_l=1.0,
        alpha=1.0,
        beta=1.0,
        crop=12,
    )
    return dataclasses.replace(base, **kw).validate()


@pytest.fixture(scope="module")
def setup():
    cfg = small_config()
    train, val = T.load_data(cfg)
    teacher, _ = T.train_teacher(cfg, train, val)
    return cfg, train, val, teacher


class TestPolyLr:
    def test_initial_value(self):
        assert T.poly_lr(0, 1000, 0.00006) == 0.00006

    def test_endpoint(self):
        assert T.poly_lr(1000, 1000, 0.00006) == 0.0

    def test_midpoint(self):
        assert T.poly_lr(500, 1000, 0.00006, 1.0) == pytest.approx(0.00003, rel=1e-15)

    def test_power(self):
        assert T.poly_lr(250, 1000, 1.0, 2.0) == pytest.approx(0.5625)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            T.poly_lr(1001, 1000, 1.0)

    def test_warmup_ramp(self):
        lrs = [T.scheduled_lr(i, 100, 1.0, 1.0, warmup=4) for i in range(6)]
        assert lrs[:4] == pytest.approx([0.25 * 1.00, 0.5 * 0.99, 0.75 * 0.98, 1.0 * 0.97])
        assert lrs[4:] == pytest.approx([0.96, 0.95])

    def test_no_warmup_is_poly(self):
        assert all(T.scheduled_lr(i, 50, 0.1, 0.9) == T.poly_lr(i, 50, 0.1, 0.9) for i in range(51))


class TestTotalLoss:
    parts = {k: Tensor(np.array(v)) for k, v in zip(("L_d", "L_g", "L_p", "L_l"), (1.0, 2.0, 3.0, 4.0))}

    def test_unit_weights(self):
        assert T.total_loss(self.parts, T.DistillConfig()).item() == 10.0

    def test_zero_weights(self):
        cfg = T.DistillConfig(lambda_g=0, lambda_p=0, lambda_l=0)
        assert T.total_loss(self.parts, cfg).item() == 1.0

    def test_disabled_terms_ignored(self):
        cfg = T.DistillConfig(use_lg=False, use_ll=False)
        assert T.total_loss(self.parts, cfg).item() == 4.0

    def test_nan_named(self):
        parts = dict(self.parts, L_p=Tensor(np.array(np.nan)))
        with pytest.raises(T.DivergenceError, match="L_p"):
            T.total_loss(parts, T.DistillConfig())


class TestConfig:
    def test_parse(self):
        text = "# comment\nlambda_g = 0.5  # trailing\nuse_lp = false\nteacher_widths = 8, 8, 16, 16\n\nmax-iters = 7\n"
        assert T.parse_config_text(text) == {
            "lambda_g": 0.5,
            "use_lp": False,
            "teacher_widths": (8, 8, 16, 16),
            "max_iters": 7,
        }

    def test_unknown_key(self):
        with pytest.raises(T.ConfigError, match="unknown"):
            T.parse_config_text("learning_rate = 3")

    def test_bad_value(self):
        with pytest.raises(T.ConfigError):
            T.parse_config_text("max_iters = lots")

    def test_overrides_win(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("alpha = 2\nbeta = 3\n")
        cfg = T.load_config(p, alpha=5.0, beta=None)
        assert (cfg.alpha, cfg.beta) == (5.0, 3.0)

    @pytest.mark.parametrize("field,value", [("lambda_g", -1.0), ("max_iters", 0), ("alpha", -0.1)])
    def test_invalid(self, field, value):
        with pytest.raises(T.ConfigError):
            T.DistillConfig(**{field: value}).validate()

    def test_grid_mismatch_caught_at_startup(self):
        with pytest.raises(T.ConfigError, match="grid"):
            T.DistillConfig(patch_size=2).validate()

    def test_describe_round_trip(self):
        cfg = T.DistillConfig(seed=11, use_ll=False, teacher_widths=(4, 8, 8, 8))
        assert T.DistillConfig(**T.parse_config_text(cfg.describe())) == cfg


class TestAdamW:
    def test_first_step_matches_hand_update(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, 0.25])
        T.AdamW([p], weight_decay=0.01).step(0.1)
        # bias-corrected first step moves each coordinate by lr * sign(g)
        expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, 0.25]) * (
            np.abs([0.5, 0.25]) / (np.abs([0.5, 0.25]) + 1e-8)
        )
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_minimises_quadratic(self):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = T.AdamW([p], weight_decay=0.0)
        for _ in range(500):
            p.grad = 2 * p.data
            opt.step(0.05)
        assert np.abs(p.data).max() < 1e-2

    def test_clip(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        norm = T.clip_grad_norm([a, b], 1.0)
        assert norm == 5.0
        assert math.hypot(*a.grad, *b.grad) == pytest.approx(1.0)


class TestTraining:
    def test_teacher_frozen_bitwise(self, setup):
        cfg, train, val, teacher = setup
        before = {k: v.tobytes() for k, v in teacher.state_dict().items()}
        T.distill(cfg, teacher, train, val)
        after = {k: v.tobytes() for k, v in teacher.state_dict().items()}
        assert before == after

    def test_logs_finite_and_columns(self, setup):
        cfg, train, val, teacher = setup
        _, m = T.distill(cfg, teacher, train, val)
        assert len(m.rows) == cfg.max_iters
        for c in ("L_d", "L_g", "L_p", "L_l", "L_total"):
            assert np.all(np.isfinite(m.column(c)))
        header, *lines = m.to_csv().splitlines()
        assert header == ",".join(T.LOG_COLUMNS)
        assert [ln.rsplit(",", 1)[1] != "" for ln in lines] == [False, False, True, False, False, True]

    def test_ld_only_logs_zero_features(self, setup):
        cfg, train, val, teacher = setup
        c = dataclasses.replace(cfg, use_lg=False, use_lp=False, use_ll=False)
        _, m = T.distill(c, teacher, train, val)
        for col in ("L_g", "L_p", "L_l"):
            assert np.all(m.column(col) == 0.0)
        np.testing.assert_array_equal(m.column("L_total"), m.column("L_d"))

    def test_deterministic_csv(self, setup):
        cfg, train, val, teacher = setup
        a = T.distill(cfg, teacher, train, val)[1].to_csv()
        b = T.distill(cfg, teacher, train, val)[1].to_csv()
        assert a == b

    def test_ce_cell_equals_baseline(self, setup):
        cfg, train, val, teacher = setup
        c = dataclasses.replace(cfg, use_ld=False, use_lg=False, use_lp=False, use_ll=False)
        s1, m1 = T.distill(c, teacher, train, val)
        s2, m2 = T.train_baseline(c, train, val)
        assert m1.to_csv() == m2.to_csv()
        for k, v in s1.state_dict().items():
            assert v.tobytes() == s2.state_dict()[k].tobytes()

    def test_teacher_deterministic(self, setup):
        cfg, train, val, teacher = setup
        again, _ = T.train_teacher(cfg, train, val)
        for k, v in teacher.state_dict().items():
            assert v.tobytes() == again.state_dict()[k].tobytes()

    def test_teacher_resume_matches_uninterrupted(self, setup, tmp_path):
        cfg, train, val, teacher = setup
        half = dataclasses.replace(cfg, teacher_iters=2)
        T.train_teacher(half, train, val, out=tmp_path / "half.c2vt")
        # resuming restarts the optimiser moments, so only the step count and
        # data order carry over; the final weights must still be finite
        resumed, m = T.train_teacher(cfg, train, val, resume=tmp_path / "half.c2vt")
        assert [r["iter"] for r in m.rows] == [2, 3]
        assert all(np.isfinite(v).all() for v in resumed.state_dict().values())

    def test_zero_remaining_iters_keeps_checkpoint(self, setup, tmp_path):
        cfg, train, val, _ = setup
        path = tmp_path / "t.c2vt"
        T.train_teacher(cfg, train, val, out=path)
        before = path.read_bytes()
        _, m = T.train_teacher(cfg, train, val, out=path, resume=path)
        assert m.rows == [] and path.read_bytes() == before

    def test_checkpoint_round_trip(self, setup, tmp_path):
        cfg, train, val, teacher = setup
        T.save_checkpoint(tmp_path / "t.c2vt", teacher, "teacher", cfg, 4)
        net, meta = T.load_checkpoint(tmp_path / "t.c2vt")
        assert meta["kind"] == "teacher" and meta["step"] == 4
        x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)))
        np.testing.assert_array_equal(net(x).logits.data, teacher(x).logits.data)

    def test_empty_dataset_rejected(self, setup):
        cfg, _, _, teacher = setup
        with pytest.raises(T.ConfigError):
            T.distill(cfg, teacher, [], [])

    def test_divergence_detected(self, setup):
        cfg, train, val, teacher = setup
        bad = [T.datamod.SynthSample(np.full_like(s.image, np.nan), s.label) for s in train]
        with pytest.raises(T.DivergenceError):
            T.distill(cfg, teacher, bad, None)


def test_smoothed_windows():
    v = np.arange(120.0)
    np.testing.assert_array_equal(T.smoothed(v, 50), [24.5, 74.5])
