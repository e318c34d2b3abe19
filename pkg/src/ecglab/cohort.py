"""Temporal ECG/lab pairing, abnormality thresholds and per-task labeled datasets."""

import bisect
import csv
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NoReferenceBounds
from .ingest import RACES

DIRECTIONS = ("low", "high")
DEFAULT_HORIZON_S = 3600.0

# "other" is the all-zero race baseline
RACE_INDICATORS = tuple(r for r in RACES if r != "other")
FEATURE_NAMES = (
    "rr_interval",
    "p_onset",
    "p_end",
    "qrs_onset",
    "qrs_end",
    "t_end",
    "p_axis",
    "qrs_axis",
    "t_axis",
    "age",
    "gender_male",
) + tuple(f"race_{r}" for r in RACE_INDICATORS)
AGE_INDEX = FEATURE_NAMES.index("age")
GENDER_INDEX = FEATURE_NAMES.index("gender_male")
RACE_INDEX = {r: FEATURE_NAMES.index(f"race_{r}") for r in RACE_INDICATORS}


@dataclass(frozen=True)
class TaskSpec:
    analyte: str
    direction: str
    threshold: float
    unit: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be 'low' or 'high', got {self.direction!r}")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    @property
    def key(self):
        """Filesystem-safe identifier, e.g. ``urea_nitrogen__low``."""
        slug = re.sub(r"[^0-9a-z]+", "_", self.analyte.lower()).strip("_")
        return f"{slug}__{self.direction}"

    @property
    def symbol(self):
        return "<" if self.direction == "low" else ">"

    def is_positive(self, value, boundary_positive=False):
        if value == self.threshold:
            return boundary_positive
        if self.direction == "low":
            return value < self.threshold
        return value > self.threshold


@dataclass(frozen=True)
class LabeledExample:
    record_id: str
    subject_id: str
    features: tuple  # 15 floats, NaN where absent
    label: int
    lab_value: float
    pairing_gap_s: float

    @property
    def age(self):
        return self.features[AGE_INDEX]

    @property
    def gender(self):
        return "male" if self.features[GENDER_INDEX] == 1.0 else "female"

    @property
    def race(self):
        for race, idx in RACE_INDEX.items():
            if self.features[idx] == 1.0:
                return race
        return "other"


class TaskDataset:
    """Labeled examples for one task, ordered by ``record_id``.

    ``X`` is an ``(n, 15)`` float array with NaN for absent features and
    ``y`` the 0/1 labels; both are built lazily and cached.
    """

    def __init__(self, task, examples, feature_names=FEATURE_NAMES):
        self.task = task
        self.examples = tuple(examples)
        self.feature_names = tuple(feature_names)
        self._X = None
        self._y = None

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __repr__(self):
        return f"TaskDataset({self.task.key}, n={len(self)}, positives={self.n_positive})"

    @property
    def X(self):
        if self._X is None:
            if self.examples:
                self._X = np.array([ex.features for ex in self.examples], dtype=np.float64)
            else:
                self._X = np.empty((0, len(self.feature_names)), dtype=np.float64)
        return self._X

    @property
    def y(self):
        if self._y is None:
            self._y = np.array([ex.label for ex in self.examples], dtype=np.int8)
        return self._y

    @property
    def n_positive(self):
        return int(sum(ex.label for ex in self.examples))

    @property
    def subject_ids(self):
        return [ex.subject_id for ex in self.examples]

    def subset(self, examples):
        return TaskDataset(self.task, examples, self.feature_names)


class Pair(NamedTuple):
    ecg: object
    observation: object
    gap_s: float


def encode_features(ecg):
    """15-slot numeric vector: 9 ECG features, age, male indicator, 4 race indicators."""
    vec = [math.nan if v is None else float(v) for v in ecg.ecg_features()]
    vec.append(float(ecg.age_years))
    vec.append(1.0 if ecg.gender == "male" else 0.0)
    vec.extend(1.0 if ecg.race == r else 0.0 for r in RACE_INDICATORS)
    return tuple(vec)


def resolve_threshold(observations, analyte, direction):
    """Median of the per-observation ``ref_low`` (low) or ``ref_high`` (high) bound.

    Observations of other analytes and observations lacking the bound are
    ignored. Raises ``NoReferenceBounds`` if nothing remains.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 'low' or 'high', got {direction!r}")
    attr = "ref_low" if direction == "low" else "ref_high"
    bounds = sorted(
        getattr(obs, attr)
        for obs in observations
        if obs.analyte == analyte and getattr(obs, attr) is not None
    )
    if not bounds:
        raise NoReferenceBounds(f"no {attr} values for analyte {analyte!r}")
    mid = len(bounds) // 2
    if len(bounds) % 2:
        return float(bounds[mid])
    return (bounds[mid - 1] + bounds[mid]) / 2.0


def resolve_task(observations, analyte, direction, unit):
    return TaskSpec(analyte, direction, resolve_threshold(observations, analyte, direction), unit)


def _group_index(group):
    order = sorted(range(len(group)), key=lambda i: (group[i].timestamp, i))
    times = [group[i].timestamp.timestamp() for i in order]
    return [group[i] for i in order], times


def pair_ecg_to_lab(ecgs, labs, analyte, horizon_s=DEFAULT_HORIZON_S):
    """Pair each ECG with the same subject's nearest observation of ``analyte``.

    Parameters
    ----------
    ecgs : iterable of EcgRecord
    labs : LabTable or dict
        Observations grouped by ``(subject_id, analyte)``.
    analyte : str
    horizon_s : float
        Maximum allowed ``|ecg time - lab time|`` in seconds.

    Returns
    -------
    list of Pair
        Sorted by record_id. Equal gaps resolve to the earlier observation,
        then to input order; ECGs without an in-horizon observation are
        left out.
    """
    if not horizon_s > 0:
        raise ValueError("horizon_s must be positive")
    groups = labs.groups if hasattr(labs, "groups") else labs
    cache = {}
    pairs = []
    for ecg in ecgs:
        key = (ecg.subject_id, analyte)
        if key not in cache:
            cache[key] = _group_index(groups.get(key, []))
        obs_sorted, times = cache[key]
        if not times:
            continue
        t = ecg.timestamp.timestamp()
        pos = bisect.bisect_left(times, t)
        best = None
        if pos > 0:
            first = bisect.bisect_left(times, times[pos - 1])
            best = (t - times[first], first)
        if pos < len(times):
            gap = times[pos] - t
            if best is None or gap < best[0]:
                best = (gap, pos)
        gap, idx = best
        if gap <= horizon_s:
            pairs.append(Pair(ecg, obs_sorted[idx], float(gap)))
    pairs.sort(key=lambda p: p.ecg.record_id)
    return pairs


def build_task_dataset(pairs, task, boundary_positive=False):
    """Label each pair for ``task``; a value equal to the threshold is negative by default."""
    examples = []
    seen = set()
    for pair in sorted(pairs, key=lambda p: p.ecg.record_id):
        rid = pair.ecg.record_id
        if rid in seen:
            raise ValueError(f"record {rid!r} paired more than once")
        seen.add(rid)
        value = pair.observation.value
        examples.append(LabeledExample(
            record_id=rid,
            subject_id=pair.ecg.subject_id,
            features=encode_features(pair.ecg),
            label=int(task.is_positive(value, boundary_positive)),
            lab_value=float(value),
            pairing_gap_s=float(pair.gap_s),
        ))
    return TaskDataset(task, examples)


def build_cohort(ecgs, labs, horizon_s=DEFAULT_HORIZON_S, analytes=None, boundary_positive=False):
    """All low/high task datasets derivable from the lab table.

    A direction is skipped when no observation of the analyte carries the
    corresponding reference bound.
    """
    datasets = []
    for analyte in analytes or labs.analytes:
        observations = labs.for_analyte(analyte)
        pairs = None
        for direction in DIRECTIONS:
            try:
                task = resolve_task(observations, analyte, direction, labs.units[analyte])
            except NoReferenceBounds:
                continue
            if pairs is None:
                pairs = pair_ecg_to_lab(ecgs, labs, analyte, horizon_s)
            datasets.append(build_task_dataset(pairs, task, boundary_positive))
    return datasets


def class_counts_by_fold(dataset, folds):
    """``{fold: (positives, negatives)}`` for each fold name."""
    mapping = folds.mapping if hasattr(folds, "mapping") else folds
    counts = Counter()
    for ex in dataset:
        counts[(mapping[ex.subject_id], ex.label)] += 1
    return {f: (counts[(f, 1)], counts[(f, 0)]) for f in ("train", "validation", "test")}


def filter_tasks(datasets, folds, min_per_class=10):
    """Keep tasks with at least ``min_per_class`` positives and negatives in every fold."""
    kept = []
    for ds in datasets:
        counts = class_counts_by_fold(ds, folds)
        if all(pos >= min_per_class and neg >= min_per_class for pos, neg in counts.values()):
            kept.append(ds)
    return kept


# -- persistence -------------------------------------------------------------

_META_COLUMNS = ("record_id", "subject_id", "label", "lab_value", "pairing_gap_s")


def _fmt(v):
    return "" if math.isnan(v) else repr(v)


def write_task_dataset(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(dataset.feature_names) + list(_META_COLUMNS))
        for ex in dataset:
            writer.writerow(
                [_fmt(v) for v in ex.features]
                + [ex.record_id, ex.subject_id, ex.label, repr(ex.lab_value), repr(ex.pairing_gap_s)]
            )


def read_task_dataset(path, task):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = len(header) - len(_META_COLUMNS)
        names = header[:n_feat]
        examples = []
        for row in reader:
            feats = tuple(math.nan if c == "" else float(c) for c in row[:n_feat])
            rid, sid, label, value, gap = row[n_feat:]
            examples.append(LabeledExample(rid, sid, feats, int(label), float(value), float(gap)))
    return TaskDataset(task, examples, names)


_MANIFEST_COLUMNS = ("key", "analyte", "direction", "threshold", "unit", "n_samples", "n_positive")


def write_task_manifest(datasets, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_MANIFEST_COLUMNS)
        for ds in datasets:
            t = ds.task
            writer.writerow([t.key, t.analyte, t.direction, repr(t.threshold), t.unit, len(ds), ds.n_positive])


def read_task_manifest(path):
    """List of ``(TaskSpec, n_samples, n_positive)`` in file order."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        (TaskSpec(r["analyte"], r["direction"], float(r["threshold"]), r["unit"]),
         int(r["n_samples"]), int(r["n_positive"]))
        for r in rows
    ]

