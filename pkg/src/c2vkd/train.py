"""Teacher pretraining, the supervised student baseline and the distillation
loop, plus the optimizer, learning-rate schedule and checkpoint helpers."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datamod
from .metrics import ConfusionMatrix, accumulate, miou
from .models import AlignHead, AttentionPoolHead, StudentNet, TeacherNet, align_head, attention_pool
from .nn import Module
from .pdd import ce_loss, pdd_loss
from .tensor import Tensor, backward, no_grad
from .vlfd import global_loss, linguistic_loss, patch_wise_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "L_d", "L_g", "L_p", "L_l", "L_total", "val_miou")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DivergenceError(RuntimeError):
    """A loss became non-finite during training."""


@dataclass
class DistillConfig:
    # loss weights
    lambda_g: float = 1.0
    lambda_p: float = 1.0
    lambda_l: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    # loss toggles; use_ld=False swaps the decoupled loss for plain CE
    use_ld: bool = True
    use_lg: bool = True
    use_lp: bool = True
    use_ll: bool = True
    # student optimisation
    base_lr: float = 1e-3
    power: float = 1.0
    warmup_iters: int = 0
    max_iters: int = 3000
    batch_size: int = 8
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 250
    # teacher pretraining
    teacher_lr: float = 2e-3
    teacher_iters: int = 2000
    teacher_seed: int = 0
    # data
    data_seed: int = 0
    n_train: int = 1000
    n_val: int = 200
    num_classes: int = 4
    image_size: int = 32
    crop: int = 28
    # architecture
    teacher_widths: tuple = (16, 32, 64, 64)
    patch_size: int = 4
    student_dim: int = 64
    student_depth: int = 4
    student_heads: int = 4
    student_mlp_ratio: int = 1
    align_dim: int = 64
    pool_heads: int = 4

    def validate(self) -> "DistillConfig":
        for name in ("lambda_g", "lambda_p", "lambda_l", "alpha", "beta", "base_lr", "teacher_lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.warmup_iters < 0:
            raise ConfigError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size % 4 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4 and by patch_size {self.patch_size}")
        if not 1 <= self.crop <= self.image_size:
            raise ConfigError(f"crop {self.crop} must lie in 1..{self.image_size}")
        if self.use_lp:
            tg, sg = self.image_size // 4, self.image_size // self.patch_size
            if tg % sg:
                raise ConfigError(
                    f"teacher feature grid {tg}x{tg} cannot be partitioned into the student's {sg}x{sg} token grid"
                )
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["teacher_widths"] = list(self.teacher_widths)
        return d

    def describe(self) -> str:
        """Config echo in the same ``key = value`` form the parser reads."""
        d = self.to_dict()
        d["teacher_widths"] = ", ".join(str(w) for w in self.teacher_widths)
        return "\n".join(f"{k} = {v}" for k, v in d.items())


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(DistillConfig)}


def coerce_value(key: str, raw: str):
    """Parse a textual config value for field ``key``."""
    default = getattr(DistillConfig(), key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    known = config_fields()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = coerce_value(key, val)
    return out


def load_config(path=None, **overrides) -> DistillConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return DistillConfig(**values).validate()


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def poly_lr(it: int, max_iters: int, base_lr: float, power: float = 1.0) -> float:
    if not 0 <= it <= max_iters:
        raise ValueError(f"iteration {it} outside 0..{max_iters}")
    return base_lr * (1.0 - it / max_iters) ** power


def scheduled_lr(it: int, max_iters: int, base_lr: float, power: float = 1.0, warmup: int = 0) -> float:
    """Poly schedule with an optional linear ramp over the first ``warmup`` steps."""
    lr = poly_lr(it, max_iters, base_lr, power)
    if it < warmup:
        lr *= (it + 1) / warmup
    return lr


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def total_loss(parts: dict, cfg: DistillConfig) -> Tensor:
    """L_d + λ_g·L_g + λ_p·L_p + λ_l·L_l; disabled terms contribute 0."""
    for name, val in parts.items():
        v = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(v):
            raise DivergenceError(f"loss term {name} is not finite ({v})")
    weights = {
        "L_d": 1.0,
        "L_g": cfg.lambda_g if cfg.use_lg else 0.0,
        "L_p": cfg.lambda_p if cfg.use_lp else 0.0,
        "L_l": cfg.lambda_l if cfg.use_ll else 0.0,
    }
    total = None
    for name in ("L_d", "L_g", "L_p", "L_l"):
        val = parts.get(name)
        w = weights[name]
        if val is None or w == 0.0:
            continue
        term = val * w if isinstance(val, Tensor) else Tensor(float(val) * w)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------------------
# models, checkpoints and evaluation
# ---------------------------------------------------------------------------


def build_teacher(cfg: DistillConfig) -> TeacherNet:
    return TeacherNet(cfg.num_classes, cfg.teacher_widths, seed=cfg.teacher_seed)


def build_student(cfg: DistillConfig) -> StudentNet:
    return StudentNet(
        cfg.num_classes,
        cfg.image_size,
        cfg.patch_size,
        cfg.student_dim,
        cfg.student_depth,
        cfg.student_heads,
        cfg.student_mlp_ratio,
        seed=cfg.seed,
    )


def save_checkpoint(path, net: Module, kind: str, cfg: DistillConfig, step: int, extra: dict | None = None) -> None:
    entries = net.state_dict()
    meta = {"kind": kind, "step": step, "config": cfg.to_dict()}
    if extra:
        meta.update(extra)
    entries[datamod.META_KEY] = datamod.pack_meta(meta)
    datamod.save_container(path, entries)


def load_checkpoint(path) -> tuple[Module, dict]:
    entries = datamod.load_container(path)
    if datamod.META_KEY not in entries:
        raise datamod.ContainerError(f"{path}: checkpoint has no metadata entry")
    meta = datamod.unpack_meta(entries.pop(datamod.META_KEY))
    ccfg = meta["config"]
    ccfg["teacher_widths"] = tuple(ccfg["teacher_widths"])
    cfg = DistillConfig(**ccfg)
    if meta["kind"] == "teacher":
        net = build_teacher(cfg)
    elif meta["kind"] == "student":
        net = build_student(cfg)
    else:
        raise datamod.ContainerError(f"{path}: unknown checkpoint kind {meta['kind']!r}")
    net.load_state_dict(entries)
    return net, meta


def evaluate(net, samples, num_classes: int, batch_size: int = 50) -> tuple[np.ndarray, float, ConfusionMatrix]:
    cm = ConfusionMatrix(num_classes)
    with no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = datamod.stack(samples[i : i + batch_size])
            pred = np.argmax(net(Tensor(x)).logits.data, axis=1)
            accumulate(cm, pred, y)
    iou, m = miou(cm)
    return iou, m, cm


def load_data(cfg: DistillConfig):
    train = datamod.generate_dataset(cfg.data_seed, cfg.n_train, cfg.image_size, cfg.image_size, cfg.num_classes)
    val = datamod.generate_dataset(cfg.data_seed + 1, cfg.n_val, cfg.image_size, cfg.image_size, cfg.num_classes)
    return train, val


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


class MetricsLog:
    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in LOG_COLUMNS])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @property
    def final_miou(self) -> float | None:
        for r in reversed(self.rows):
            if r.get("val_miou") not in (None, ""):
                return float(r["val_miou"])
        return None


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _check_finite(value: float, what: str, it: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became {value} at iteration {it}; lower the learning rate or check inputs")


def train_supervised(
    net: Module,
    train,
    val,
    cfg: DistillConfig,
    iters: int,
    base_lr: float,
    seed: int,
    start_iter: int = 0,
    optimizer: AdamW | None = None,
) -> tuple[MetricsLog, AdamW]:
    """Cross-entropy training shared by teacher pretraining and the student
    baseline."""
    if not train:
        raise ConfigError("training set is empty")
    opt = optimizer or AdamW(net.parameters(), cfg.weight_decay)
    params = opt.params
    stream = datamod.batch_stream(train, cfg.batch_size, seed, cfg.crop)
    metrics = MetricsLog()
    for _ in range(start_iter):
        next(stream)
    for it in range(start_iter, iters):
        lr = scheduled_lr(it, iters, base_lr, cfg.power, cfg.warmup_iters)
        x, y = next(stream)
        loss = ce_loss(net(Tensor(x)).logits, y)
        _check_finite(loss.item(), "L_d", it)
        opt.zero_grad()
        backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        opt.step(lr)
        val_m = None
        if val and ((it + 1) % cfg.eval_every == 0 or it + 1 == iters):
            val_m = evaluate(net, val, cfg.num_classes)[1]
        metrics.add(iter=it, lr=lr, L_d=loss.item(), L_g=0.0, L_p=0.0, L_l=0.0, L_total=loss.item(), val_miou=val_m)
    return metrics, opt


def train_teacher(cfg: DistillConfig, train, val=None, out: Path | None = None, resume: Path | None = None):
    """Supervised pretraining of the convolutional teacher."""
    if resume is not None:
        teacher, meta = load_checkpoint(resume)
        start = int(meta["step"])
    else:
        teacher, start = build_teacher(cfg), 0
    if start >= cfg.teacher_iters:
        log.info("teacher already at step %d, nothing to do", start)
        return teacher, MetricsLog()
    metrics, _ = train_supervised(teacher, train, val, cfg, cfg.teacher_iters, cfg.teacher_lr, cfg.teacher_seed, start)
    if metrics.final_miou is not None:
        log.info("teacher val mIoU %.4f", metrics.final_miou)
    if out is not None:
        save_checkpoint(out, teacher, "teacher", cfg, cfg.teacher_iters, {"val_miou": metrics.final_miou})
    return teacher, metrics


def train_baseline(cfg: DistillConfig, train, val=None):
    """Student trained with plain cross-entropy, no teacher."""
    student = build_student(cfg)
    metrics, _ = train_supervised(student, train, val, cfg, cfg.max_iters, cfg.base_lr, cfg.seed)
    return student, metrics


def distill(cfg: DistillConfig, teacher: TeacherNet, train, val=None):
    """One student trained against a frozen teacher.

    Each step runs both forwards, the attention-pool / align heads, the
    enabled feature losses, the decoupled (or CE) prediction loss, and one
    optimizer update of the student-side parameters only."""
    cfg.validate()
    if not train:
        raise ConfigError("training set is empty")
    student = build_student(cfg)
    tgrid = cfg.image_size // 4
    if teacher.feature_dim <= 0 or tgrid <= 0:
        raise ConfigError("teacher feature grid is empty")
    grid = student.grid
    pool = AttentionPoolHead(teacher.feature_dim, cfg.align_dim, cfg.pool_heads, seed=cfg.seed + 1)
    align = AlignHead(student.feature_dim, cfg.align_dim, seed=cfg.seed + 2)
    params = student.parameters() + (align.parameters() if cfg.use_ll else [])
    opt = AdamW(params, cfg.weight_decay)
    stream = datamod.batch_stream(train, cfg.batch_size, cfg.seed, cfg.crop)
    metrics = MetricsLog()
    need_teacher = cfg.use_ld or cfg.use_lg or cfg.use_lp or cfg.use_ll
    for it in range(cfg.max_iters):
        lr = scheduled_lr(it, cfg.max_iters, cfg.base_lr, cfg.power, cfg.warmup_iters)
        x, y = next(stream)
        X = Tensor(x)
        sb = student(X)
        with no_grad():
            tb = teacher(X) if need_teacher else None
            gc = attention_pool(pool, tb.features)[0] if cfg.use_ll else None
        parts = {}
        if cfg.use_ld:
            parts["L_d"] = pdd_loss(sb.logits, tb.logits, y, cfg.alpha, cfg.beta)
        else:
            parts["L_d"] = ce_loss(sb.logits, y)
        if cfg.use_ll:
            parts["L_l"] = linguistic_loss(align_head(align, sb.features)[0], gc)
        if cfg.use_lg:
            parts["L_g"] = global_loss(sb.features, tb.features, grid)
        if cfg.use_lp:
            parts["L_p"] = patch_wise_loss(sb.features, tb.features, grid)
        loss = total_loss(parts, cfg)
        opt.zero_grad()
        backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        opt.step(lr)
        val_m = None
        if val and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.max_iters):
            val_m = evaluate(student, val, cfg.num_classes)[1]
        row = {k: (parts[k].item() if k in parts else 0.0) for k in ("L_d", "L_g", "L_p", "L_l")}
        metrics.add(iter=it, lr=lr, L_total=loss.item(), val_miou=val_m, **row)
    return student, metrics


def smoothed(values, window: int = 50) -> np.ndarray:
    """Means of consecutive non-overlapping windows."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // window
    return values[: n * window].reshape(n, window).mean(axis=1)
