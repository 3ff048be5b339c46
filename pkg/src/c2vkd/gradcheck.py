"""Finite-difference verification of every distillation loss with respect to
the student-side parameters, on a tiny configuration so the whole suite runs
in seconds."""

from __future__ import annotations

import numpy as np

from .models import AlignHead, AttentionPoolHead, align_head, attention_pool
from .pdd import IGNORE_INDEX, pdd_loss
from .tensor import Tensor, backward, no_grad, rel_error
from .train import DistillConfig, build_student, build_teacher, total_loss
from .vlfd import global_loss, linguistic_loss, patch_wise_loss

LOSS_NAMES = ("L_l", "L_g", "L_p", "L_d", "L_all")


def tiny_config(seed: int = 0) -> DistillConfig:
    # 16x16 input: teacher grid 4x4, student grid 2x2, so the global loss
    # exercises pooling and the patch loss exercises q=2 partitions
    return DistillConfig(
        num_classes=3,
        image_size=16,
        patch_size=8,
        student_dim=8,
        student_depth=1,
        student_heads=2,
        teacher_widths=(4, 4, 8, 8),
        align_dim=8,
        pool_heads=2,
        lambda_g=0.7,
        lambda_p=1.3,
        lambda_l=0.9,
        alpha=1.5,
        beta=0.5,
        seed=seed,
        teacher_seed=seed + 100,
        crop=16,
    ).validate()


class Problem:
    """Fixed batch, frozen teacher outputs and the trainable student side."""

    def __init__(self, seed: int, batch: int = 2):
        cfg = self.cfg = tiny_config(seed)
        rng = np.random.default_rng([seed, 7])
        size = cfg.image_size
        self.x = rng.random((batch, 3, size, size))
        self.y = rng.integers(0, cfg.num_classes, (batch, size, size))
        self.y[0, 0, :3] = IGNORE_INDEX
        teacher = build_teacher(cfg)
        pool = AttentionPoolHead(teacher.feature_dim, cfg.align_dim, cfg.pool_heads, seed=seed + 1)
        with no_grad():
            tb = teacher(Tensor(self.x))
            self.t_logits, self.t_feat = tb.logits, tb.features
            self.gc = attention_pool(pool, tb.features)[0]
        self.student = build_student(cfg)
        # the positional table starts at zero; move it off that special point
        self.student.pos.data = rng.normal(0, 0.1, self.student.pos.shape)
        self.align = AlignHead(self.student.feature_dim, cfg.align_dim, seed=seed + 2)
        self.params = self.student.parameters() + self.align.parameters()

    def parts(self) -> dict:
        cfg = self.cfg
        sb = self.student(Tensor(self.x))
        grid = self.student.grid
        return {
            "L_l": linguistic_loss(align_head(self.align, sb.features)[0], self.gc),
            "L_g": global_loss(sb.features, self.t_feat, grid),
            "L_p": patch_wise_loss(sb.features, self.t_feat, grid),
            "L_d": pdd_loss(sb.logits, self.t_logits, self.y, cfg.alpha, cfg.beta),
        }

    def loss(self, name: str) -> Tensor:
        parts = self.parts()
        if name == "L_all":
            return total_loss(parts, self.cfg)
        return parts[name]


def check_loss(problem: Problem, name: str, per_param: int = 3, eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between backprop and central differences over a
    random sample of ``per_param`` coordinates from every parameter."""
    for p in problem.params:
        p.grad = None
    backward(problem.loss(name))
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for p in problem.params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            with no_grad():
                up = problem.loss(name).item()
            flat[i] = old - eps
            with no_grad():
                down = problem.loss(name).item()
            flat[i] = old
            analytic.append(g.reshape(-1)[i])
            numeric.append((up - down) / (2 * eps))
    return rel_error(np.array(analytic), np.array(numeric))


def run_suite(seeds=range(10), per_param: int = 3) -> dict[str, float]:
    """Worst relative error per loss over the given random points."""
    worst = dict.fromkeys(LOSS_NAMES, 0.0)
    for s in seeds:
        problem = Problem(int(s))
        for name in LOSS_NAMES:
            worst[name] = max(worst[name], check_loss(problem, name, per_param, seed=int(s)))
    return worst
