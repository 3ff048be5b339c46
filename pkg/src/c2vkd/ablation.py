"""Loss-combination grid and α/β sweep, run as independent training jobs."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .train import DistillConfig, distill, load_checkpoint

ALPHA_BETA = ((3.0, 1.0), (2.0, 1.0), (1.0, 1.0))

# L_d alone, L_d with each feature loss, everything, plus the CE student
CORE_CELLS = (
    ("ce", (False, False, False, False)),
    ("L_d", (True, False, False, False)),
    ("L_d+L_g", (True, True, False, False)),
    ("L_d+L_p", (True, False, True, False)),
    ("L_d+L_l", (True, False, False, True)),
    ("all", (True, True, True, True)),
)

CSV_COLUMNS = ("group", "cell", "use_ld", "use_lg", "use_lp", "use_ll", "alpha", "beta", "seed", "val_miou", "finite")


@dataclass(frozen=True)
class Cell:
    group: str
    name: str
    flags: tuple  # (use_ld, use_lg, use_lp, use_ll)
    alpha: float = 1.0
    beta: float = 1.0

    def config(self, base: DistillConfig, seed: int) -> DistillConfig:
        ld, lg, lp, ll = self.flags
        return dataclasses.replace(
            base, use_ld=ld, use_lg=lg, use_lp=lp, use_ll=ll, alpha=self.alpha, beta=self.beta, seed=seed
        )


def cell_name(flags) -> str:
    on = [n for n, f in zip(("L_d", "L_g", "L_p", "L_l"), flags) if f]
    if not flags[0]:
        on = ["ce"] + on
    return "+".join(on) if on else "ce"


def loss_grid() -> list[Cell]:
    """All 16 on/off combinations; "L_d off" means the student learns from
    cross-entropy on the labels instead."""
    return [Cell("grid", cell_name(f), f) for f in itertools.product((False, True), repeat=4)]


def alpha_beta_sweep() -> list[Cell]:
    return [Cell("alpha_beta", f"a{a:g}/b{b:g}", (True, True, True, True), a, b) for a, b in ALPHA_BETA]


def core_cells() -> list[Cell]:
    return [Cell("core", name, flags) for name, flags in CORE_CELLS]


def _job(args):
    cfg, teacher_path, data = args
    teacher, _ = load_checkpoint(teacher_path)
    train, val = data
    _, metrics = distill(cfg, teacher, train, val)
    finite = all(
        math.isfinite(r[c]) for r in metrics.rows for c in ("L_d", "L_g", "L_p", "L_l", "L_total")
    )
    return metrics.final_miou, finite, metrics


def run_cells(cells, base: DistillConfig, seeds, teacher_path, train, val, jobs: int = 1, keep_logs: bool = False):
    """Train every (cell, seed) pair; results come back in a fixed order
    regardless of how many worker processes are used.

    Returns a list of row dicts (plus a ``metrics`` entry when
    ``keep_logs``)."""
    keyed = {}
    order = []
    for cell in cells:
        for s in seeds:
            cfg = cell.config(base, int(s))
            key = (cell.flags, cell.alpha, cell.beta, int(s))
            order.append((cell, int(s), key))
            keyed.setdefault(key, cfg)
    tasks = [(cfg, str(teacher_path), (train, val)) for cfg in keyed.values()]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]
    by_key = dict(zip(keyed, results))
    rows = []
    for cell, s, key in order:
        m, finite, metrics = by_key[key]
        row = {
            "group": cell.group,
            "cell": cell.name,
            "use_ld": int(cell.flags[0]),
            "use_lg": int(cell.flags[1]),
            "use_lp": int(cell.flags[2]),
            "use_ll": int(cell.flags[3]),
            "alpha": cell.alpha,
            "beta": cell.beta,
            "seed": s,
            "val_miou": m,
            "finite": int(finite),
        }
        if keep_logs:
            row["metrics"] = metrics
        rows.append(row)
    return rows


def medians(rows) -> dict[tuple[str, str], float]:
    """Median val mIoU over seeds for every (group, cell)."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["group"], r["cell"]), []).append(r["val_miou"])
    return {k: float(np.median(v)) for k, v in groups.items()}


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in CSV_COLUMNS])
    return buf.getvalue()
