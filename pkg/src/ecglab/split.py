"""Subject-grouped train/validation/test assignment stratified by gender and age."""

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import TooFewSubjects, UnknownSubject

FOLDS = ("train", "validation", "test")
DEFAULT_RATIO = (18, 1, 1)
MIN_SUBJECTS = 20


@dataclass(frozen=True)
class FoldAssignment:
    mapping: dict
    seed: int = 0
    ratio: tuple = DEFAULT_RATIO

    def __getitem__(self, subject_id):
        return self.mapping[subject_id]

    def __contains__(self, subject_id):
        return subject_id in self.mapping

    def __len__(self):
        return len(self.mapping)

    def subjects(self, fold):
        return sorted(s for s, f in self.mapping.items() if f == fold)


def _deal_pattern(ratio):
    """One cycle of fold labels from smooth weighted round-robin.

    Minority folds end up evenly spaced, e.g. 18:1:1 puts validation and
    test about ten slots apart.
    """
    total = sum(ratio)
    credit = [0] * len(ratio)
    cycle = []
    for _ in range(total):
        for i, w in enumerate(ratio):
            credit[i] += w
        pick = max(range(len(ratio)), key=lambda i: (credit[i], -i))
        credit[pick] -= total
        cycle.append(FOLDS[pick])
    return cycle


def _subject_strata(examples):
    ages = defaultdict(list)
    genders = {}
    for ex in examples:
        ages[ex.subject_id].append(ex.age)
        genders.setdefault(ex.subject_id, ex.gender)
    subjects = sorted(ages)
    mean_age = np.array([np.mean(ages[s]) for s in subjects])
    return subjects, mean_age, [genders[s] for s in subjects]


def stratified_group_split(examples, seed=0, ratio=DEFAULT_RATIO):
    """Assign each subject to one fold, balancing gender and age quartile.

    Subjects are bucketed by gender and by the quartile of their mean age
    (quartile edges computed from the cohort). Each bucket is shuffled with
    its own seeded stream and dealt, in bucket order, along a repeating
    cycle of fold labels matching ``ratio``.

    Parameters
    ----------
    examples : iterable of LabeledExample or TaskDataset
        Anything exposing ``subject_id``, ``age`` and ``gender``; nested
        datasets are flattened.
    seed : int
    ratio : tuple of int
        Train, validation, test weights.

    Returns
    -------
    FoldAssignment
    """
    flat = []
    for item in examples:
        if hasattr(item, "examples"):
            flat.extend(item.examples)
        else:
            flat.append(item)
    subjects, mean_age, genders = _subject_strata(flat)
    if len(subjects) < MIN_SUBJECTS:
        raise TooFewSubjects(f"{len(subjects)} subjects; at least {MIN_SUBJECTS} required")

    edges = np.quantile(mean_age, [0.25, 0.5, 0.75])
    quartile = np.searchsorted(edges, mean_age, side="right")
    buckets = defaultdict(list)
    for i, subject in enumerate(subjects):
        buckets[(genders[i], int(quartile[i]))].append(subject)

    pattern = _deal_pattern(ratio)
    streams = np.random.SeedSequence(seed).spawn(len(buckets))
    mapping = {}
    cursor = 0
    for stream, key in zip(streams, sorted(buckets)):
        members = buckets[key]
        perm = np.random.default_rng(stream).permutation(len(members))
        for j in perm:
            mapping[members[j]] = pattern[cursor % len(pattern)]
            cursor += 1
    return FoldAssignment(mapping, seed, tuple(ratio))


def apply_assignment(dataset, assignment):
    """Partition ``dataset`` into ``(train, validation, test)`` datasets."""
    mapping = assignment.mapping if hasattr(assignment, "mapping") else assignment
    parts = {f: [] for f in FOLDS}
    for ex in dataset:
        try:
            parts[mapping[ex.subject_id]].append(ex)
        except KeyError:
            raise UnknownSubject(f"subject {ex.subject_id!r} has no fold") from None
    return tuple(dataset.subset(parts[f]) for f in FOLDS)


def save_assignment(assignment, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "fold"])
        for subject in sorted(assignment.mapping):
            writer.writerow([subject, assignment.mapping[subject]])


def load_assignment(path, seed=0):
    mapping = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            fold = row["fold"].strip().lower()
            if fold == "val":
                fold = "validation"
            if fold not in FOLDS:
                raise ValueError(f"{path}: unknown fold {row['fold']!r}")
            subject = row["subject_id"].strip()
            if mapping.setdefault(subject, fold) != fold:
                raise ValueError(f"{path}: subject {subject!r} listed in two folds")
    return FoldAssignment(mapping, seed)
