"""AUROC, bootstrap confidence intervals, subgroup analysis and report tables."""

import csv
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .cohort import TaskSpec
from .errors import (
    EmptyInput,
    EmptyTargetGroup,
    ResampleExhaustion,
    SingleClass,
    TargetLargerThanSource,
)

DEFAULT_BOOTSTRAP_N = 1000
DEFAULT_LEVEL = 0.95
MAX_REDRAWS = 100
MAX_SKIP_FRACTION = 0.9
DEFAULT_AUROC_FLOOR = 0.70

# (key, display label); age bins include their lower edge
GROUPS = {
    "gender": (("male", "Males"), ("female", "Females")),
    "race": (
        ("caucasian", "Caucasians"),
        ("african", "Africans"),
        ("asian", "Asians"),
        ("latino", "Latinos"),
        ("other", "Other"),
    ),
    "age": (
        ("18-49", "18-49yo."),
        ("50-64", "50-64yo."),
        ("65-77", "65-77yo."),
        (">=78", ">=78yo."),
    ),
}
AGE_EDGES = (50.0, 65.0, 78.0)
_CATEGORY_ALIASES = {"age_quartile": "age", "sex": "gender"}


def auroc(scores, labels):
    """Area under the ROC curve, ties between a positive and a negative counting 1/2.

    Computed exactly from tie groups of the sorted scores in O(n log n).
    Raises ``SingleClass`` unless both labels occur.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos = np.add.reduceat(y, starts)
    neg = np.diff(np.r_[starts, s.size]) - pos
    neg_below = np.cumsum(neg) - neg
    # twice the Mann-Whitney U, kept integral
    u2 = int(np.sum(pos * (2 * neg_below + neg)))
    return u2 / (2 * n_pos * n_neg)


class _TieGroups:
    """Sort structure reused across bootstrap resamples of one score vector."""

    def __init__(self, scores, labels):
        self.order = np.argsort(scores, kind="mergesort")
        s = scores[self.order]
        self.y = labels[self.order].astype(np.float64)
        self.starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])

    def auroc_weighted(self, counts):
        """AUROC of each row of resample multiplicities ``counts`` (B x n)."""
        c = counts[:, self.order]
        pos = np.add.reduceat(c * self.y, self.starts, axis=1)
        tot = np.add.reduceat(c, self.starts, axis=1)
        neg = tot - pos
        neg_below = np.cumsum(neg, axis=1) - neg
        u2 = np.sum(pos * (2 * neg_below + neg), axis=1)
        n_pos = pos.sum(axis=1)
        return u2 / (2 * n_pos * (tot.sum(axis=1) - n_pos))


def bootstrap_aurocs(scores, labels, n_iter=DEFAULT_BOOTSTRAP_N, seed=0, chunk=256):
    """Resampled AUROCs from an empirical bootstrap.

    Iteration ``i`` draws from its own generator seeded with ``(seed, i)``,
    so results do not depend on how iterations are batched. A resample
    holding a single class is redrawn up to 100 times, then skipped.

    Returns
    -------
    aurocs : ndarray
        One value per kept iteration, in iteration order.
    n_skipped : int
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    auroc(scores, labels)  # precondition: both classes present
    n = scores.size
    ties = _TieGroups(scores, labels)
    kept = []
    n_skipped = 0
    batch = []

    def flush():
        if batch:
            counts = np.stack([np.bincount(idx, minlength=n) for idx in batch]).astype(np.float64)
            kept.append(ties.auroc_weighted(counts))
            batch.clear()

    for i in range(n_iter):
        rng = np.random.default_rng((seed, i))
        for _ in range(MAX_REDRAWS):
            idx = rng.integers(0, n, n)
            n_pos = labels[idx].sum()
            if 0 < n_pos < n:
                batch.append(idx)
                break
        else:
            n_skipped += 1
        if len(batch) >= chunk:
            flush()
    flush()
    if n_skipped > MAX_SKIP_FRACTION * n_iter:
        raise ResampleExhaustion(f"{n_skipped} of {n_iter} resamples had a single class")
    values = np.concatenate(kept) if kept else np.empty(0)
    return values, n_skipped


def percentile_interval(values, level=DEFAULT_LEVEL):
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


def bootstrap_ci(scores, labels, n_iter=DEFAULT_BOOTSTRAP_N, level=DEFAULT_LEVEL, seed=0):
    """Percentile bootstrap interval ``(low, high)`` for the AUROC."""
    values, _ = bootstrap_aurocs(scores, labels, n_iter, seed)
    return percentile_interval(values, level)


@dataclass(frozen=True)
class EvalReport:
    task: object
    n_samples: int
    n_positive: int
    auroc: float
    ci_low: float
    ci_high: float
    bootstrap_n: int
    seed: int
    n_skipped: int = 0

    @property
    def prevalence(self):
        return self.n_positive


def evaluate_scores(task, scores, labels, bootstrap_n=DEFAULT_BOOTSTRAP_N, seed=0, level=DEFAULT_LEVEL):
    labels = np.asarray(labels)
    point = auroc(scores, labels)
    values, skipped = bootstrap_aurocs(scores, labels, bootstrap_n, seed)
    low, high = percentile_interval(values, level)
    return EvalReport(task, int(labels.size), int(labels.sum()), point, low, high, bootstrap_n, seed, skipped)


def evaluate_task(model, test, bootstrap_n=DEFAULT_BOOTSTRAP_N, seed=0, level=DEFAULT_LEVEL):
    """AUROC with bootstrap CI of ``model`` on a test ``TaskDataset``."""
    scores = model.predict_margin(test.X)
    return evaluate_scores(test.task, scores, test.y, bootstrap_n, seed, level)


def macro_auroc(reports):
    """Unweighted mean of per-task AUROCs (reports or plain numbers)."""
    values = [r.auroc if hasattr(r, "auroc") else float(r) for r in reports]
    if not values:
        raise EmptyInput("macro AUROC of zero tasks")
    return math.fsum(values) / len(values)


# -- subgroups -----------------------------------------------------------------

def _category(category):
    category = _CATEGORY_ALIASES.get(category, category)
    if category not in GROUPS:
        raise ValueError(f"unknown category {category!r}; expected one of {sorted(GROUPS)}")
    return category


def age_group(age):
    for (key, _), edge in zip(GROUPS["age"], AGE_EDGES):
        if age < edge:
            return key
    return GROUPS["age"][-1][0]


def group_of(example, category):
    category = _category(category)
    if category == "gender":
        return example.gender
    if category == "race":
        return example.race
    return age_group(example.age)


def _group_key(category, name):
    for key, label in GROUPS[category]:
        if name.lower() in (key, label.lower(), label.lower().rstrip(".")):
            return key
    raise ValueError(f"unknown {category} group {name!r}")


@dataclass(frozen=True)
class SubgroupReport:
    category: str
    group: str
    n_samples: int
    prevalence: int
    auroc: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    flagged: bool = False
    note: str = ""


def subgroup_eval(model, test, category, bootstrap_n=DEFAULT_BOOTSTRAP_N, seed=0, level=DEFAULT_LEVEL):
    """Per-group AUROC and CI over ``test``, one report per group of ``category``.

    Groups without both classes (including empty groups) are reported with
    null AUROC and ``flagged=True``.
    """
    category = _category(category)
    scores = np.asarray(model.predict_margin(test.X))
    y = test.y
    keys = np.array([group_of(ex, category) for ex in test], dtype=object)
    reports = []
    for key, label in GROUPS[category]:
        mask = keys == key
        n, n_pos = int(mask.sum()), int(y[mask].sum())
        if n_pos == 0 or n_pos == n:
            reports.append(SubgroupReport(category, label, n, n_pos, None, None, None, True, "single class"))
            continue
        values, _ = bootstrap_aurocs(scores[mask], y[mask], bootstrap_n, seed)
        low, high = percentile_interval(values, level)
        reports.append(SubgroupReport(category, label, n, n_pos, auroc(scores[mask], y[mask]), low, high))
    return reports


def downsample_train_group(train, group_feature, source_group, target_group, seed=0):
    """Subsample the source group's training rows to the target group's size.

    Rows outside the source group are kept untouched and in order.

    Parameters
    ----------
    train : TaskDataset
    group_feature : {"gender", "race", "age"}
    source_group, target_group : str
        Group keys (``"caucasian"``) or labels (``"Caucasians"``).
    seed : int
    """
    category = _category(group_feature)
    src = _group_key(category, source_group)
    tgt = _group_key(category, target_group)
    keys = [group_of(ex, category) for ex in train]
    src_idx = [i for i, k in enumerate(keys) if k == src]
    n_target = sum(1 for k in keys if k == tgt)
    if n_target == 0:
        raise EmptyTargetGroup(f"no training rows in group {target_group!r}")
    if n_target > len(src_idx):
        raise TargetLargerThanSource(
            f"target group has {n_target} rows, source only {len(src_idx)}"
        )
    rng = np.random.default_rng(seed)
    chosen = set(np.asarray(src_idx)[rng.choice(len(src_idx), n_target, replace=False)].tolist())
    src_set = set(src_idx)
    kept = [ex for i, ex in enumerate(train) if i not in src_set or i in chosen]
    return train.subset(kept)


# -- tables ------------------------------------------------------------------

TABLE_COLUMNS = ("Value", "Threshold", "Unit", "Samples [Prev.]", "AUROC (95% CI)")
SUBGROUP_COLUMNS = ("Category", "Samples [Prev.]", "AUROC")


def _fmt_auroc(point, low, high):
    if point is None:
        return "n/a"
    return f"{point:.3f} ({low:.3f}, {high:.3f})"


def build_report_table(reports, auroc_floor=DEFAULT_AUROC_FLOOR):
    """Rows for tasks with AUROC strictly above ``auroc_floor``, best first."""
    kept = [r for r in reports if r.auroc is not None and r.auroc > auroc_floor]
    kept.sort(key=lambda r: (-r.auroc, r.task.key))
    return [
        (
            r.task.analyte,
            f"{r.task.symbol}{float(r.task.threshold)}",
            r.task.unit,
            f"{r.n_samples} [{r.n_positive}]",
            _fmt_auroc(r.auroc, r.ci_low, r.ci_high),
        )
        for r in kept
    ]


def subgroup_rows(reports):
    rows = []
    for r in reports:
        rows.append((r.group, f"{r.n_samples:,} [{r.prevalence:,}]", _fmt_auroc(r.auroc, r.ci_low, r.ci_high)))
    return rows


def format_table(rows, columns=TABLE_COLUMNS, title=None):
    """Aligned plain-text table; an empty ``rows`` still prints the header."""
    widths = [len(c) for c in columns]
    for row in rows:
        widths = [max(w, len(str(v))) for w, v in zip(widths, row)]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    lines = [title] if title else []
    lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
    lines.append(rule)
    for row in rows:
        lines.append("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_rows_csv(rows, path, columns=TABLE_COLUMNS):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


EVAL_LOG_COLUMNS = (
    "key", "analyte", "direction", "threshold", "unit", "n_samples", "n_positive",
    "auroc", "ci_low", "ci_high", "bootstrap_n", "seed", "n_skipped",
)


def write_eval_log(reports, path):
    """Every task's report at full precision, regardless of AUROC."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_LOG_COLUMNS)
        for r in reports:
            t = r.task
            writer.writerow([
                t.key, t.analyte, t.direction, repr(t.threshold), t.unit, r.n_samples, r.n_positive,
                repr(r.auroc), repr(r.ci_low), repr(r.ci_high), r.bootstrap_n, r.seed, r.n_skipped,
            ])


def read_eval_log(path):
    reports = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            task = TaskSpec(row["analyte"], row["direction"], float(row["threshold"]), row["unit"])
            reports.append(EvalReport(
                task, int(row["n_samples"]), int(row["n_positive"]), float(row["auroc"]),
                float(row["ci_low"]), float(row["ci_high"]), int(row["bootstrap_n"]),
                int(row["seed"]), int(row["n_skipped"]),
            ))
    return reports


def write_subgroup_csv(reports, path):
    fields = list(SubgroupReport.__dataclass_fields__)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in reports:
            d = asdict(r)
            writer.writerow(["" if d[f] is None else (repr(d[f]) if isinstance(d[f], float) else d[f]) for f in fields])
