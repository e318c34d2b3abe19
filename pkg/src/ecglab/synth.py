"""Seeded synthetic ECG/lab cohorts with known feature-label dependence.

Each analyte has a latent score ``s = w * z + (1 - w) * e`` where ``z`` is
the standardized mean of its driver features, ``e`` is unit-variance
logistic noise and ``w`` the signal strength. Cut points on ``s`` give the
configured low/high prevalences, and lab values are a monotone map of
``s`` that lands the cut points exactly on the reference bounds, so the
median-threshold labeling in :mod:`ecglab.cohort` recovers the latent
labels.
"""

import configparser
import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .cohort import FEATURE_NAMES, encode_features
from .errors import InvalidConfig, SingleClass
from .evaluation import auroc
from .ingest import ECG_FEATURES, GENDERS, RACES, EcgRecord, LabObservation, write_ecg_table, write_lab_table

# race proportions of the reference cohort's demographic table
REFERENCE_RACE_COUNTS = (157926, 40205, 7295, 13842, 17306)
REFERENCE_MALE_FRACTION = 122125 / (122125 + 118767)

_LOGISTIC_SD = math.pi / math.sqrt(3.0)
_EPOCH = datetime(2150, 1, 1, tzinfo=timezone.utc)
_POPULATION_DRAWS = 200_000


@dataclass(frozen=True)
class AnalyteSpec:
    name: str
    unit: str
    ref_low: float
    ref_high: float
    signal_strength: float = 1.0
    driver_features: tuple = ("t_end",)
    low_prevalence: float = 0.1
    high_prevalence: float = 0.2


DEFAULT_ANALYTES = (
    AnalyteSpec("Urea Nitrogen", "mg/dL", 6.0, 20.0, 1.0, ("t_end",), 0.1, 0.3),
    AnalyteSpec("Potassium", "mEq/L", 3.5, 5.2, 0.6, ("t_axis", "rr_interval"), 0.15, 0.15),
    AnalyteSpec("Hemoglobin", "g/dL", 13.0, 17.5, 0.0, ("age",), 0.3, 0.1),
)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 2000
    ecgs_per_subject: tuple = (1, 4)
    analytes: tuple = DEFAULT_ANALYTES
    max_gap_s: float = 1800.0
    lab_coverage: float = 0.95
    distractor_rate: float = 0.2
    missing_rate: float = 0.05
    bound_missing_rate: float = 0.05
    race_weights: tuple = REFERENCE_RACE_COUNTS
    male_fraction: float = REFERENCE_MALE_FRACTION
    seed: int = 0

    def validate(self):
        if self.n_subjects < 20:
            raise InvalidConfig("n_subjects must be at least 20")
        lo, hi = self.ecgs_per_subject
        if not 1 <= lo <= hi:
            raise InvalidConfig("ecgs_per_subject must be a range 1 <= lo <= hi")
        if not self.analytes:
            raise InvalidConfig("at least one analyte required")
        names = [a.name for a in self.analytes]
        if len(set(names)) != len(names):
            raise InvalidConfig("analyte names must be unique")
        for a in self.analytes:
            if not 0.0 <= a.signal_strength <= 1.0:
                raise InvalidConfig(f"{a.name}: signal_strength outside [0, 1]")
            if not a.ref_low < a.ref_high:
                raise InvalidConfig(f"{a.name}: ref_low must be below ref_high")
            if not (0 < a.low_prevalence < 1 and 0 < a.high_prevalence < 1
                    and a.low_prevalence + a.high_prevalence < 1):
                raise InvalidConfig(f"{a.name}: prevalences must be in (0, 1) and sum below 1")
            unknown = set(a.driver_features) - set(FEATURE_NAMES)
            if not a.driver_features or unknown:
                raise InvalidConfig(f"{a.name}: bad driver features {sorted(unknown) or '[]'}")
        for rate in (self.lab_coverage, self.distractor_rate, self.missing_rate,
                     self.bound_missing_rate, self.male_fraction):
            if not 0.0 <= rate <= 1.0:
                raise InvalidConfig("rates and fractions must lie in [0, 1]")
        if len(self.race_weights) != len(RACES) or min(self.race_weights) <= 0:
            raise InvalidConfig("race_weights needs 5 positive weights")
        if self.max_gap_s <= 0:
            raise InvalidConfig("max_gap_s must be positive")


class GeneratedCohort(NamedTuple):
    ecg_path: Path
    lab_path: Path
    manifest_path: Path
    latent_path: Path
    manifest: dict


def _allocate(n, weights, rng):
    """Shuffled labels with counts proportional to ``weights``, every class at least once when n allows."""
    w = np.asarray(weights, dtype=np.float64)
    raw = n * w / w.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="mergesort")[: n - counts.sum()]:
        counts[i] += 1
    if n >= len(w):
        for i in np.flatnonzero(counts == 0):
            counts[i] += 1
            counts[np.argmax(counts)] -= 1
    labels = np.repeat(np.arange(len(w)), counts)
    return rng.permutation(labels)


def _ecg_features(rng, n):
    p_onset = rng.normal(40, 8, n)
    p_end = p_onset + rng.normal(110, 15, n)
    qrs_onset = p_end + rng.normal(50, 12, n)
    qrs_end = qrs_onset + rng.normal(95, 15, n)
    t_end = qrs_end + rng.normal(300, 35, n)
    cols = {
        "rr_interval_ms": rng.normal(850, 150, n).clip(300, 2000),
        "p_onset_ms": p_onset,
        "p_end_ms": p_end,
        "qrs_onset_ms": qrs_onset,
        "qrs_end_ms": qrs_end,
        "t_end_ms": t_end,
        "p_axis_deg": rng.normal(50, 25, n).clip(-180, 180),
        "qrs_axis_deg": rng.normal(15, 45, n).clip(-180, 180),
        "t_axis_deg": rng.normal(40, 45, n).clip(-180, 180),
    }
    out = {}
    for name in ECG_FEATURES:
        col = np.round(cols[name])
        if name.endswith("_ms"):
            col = np.maximum(col, 0.0)
        out[name] = col
    return out


def _standardized_driver_mean(F, drivers):
    cols = [FEATURE_NAMES.index(d) for d in drivers]
    Z = F[:, cols]
    mu = np.nanmean(Z, axis=0)
    sd = np.nanstd(Z, axis=0)
    sd[sd == 0] = 1.0
    Z = np.nan_to_num((Z - mu) / sd, nan=0.0)
    z = Z.mean(axis=1)
    return (z - z.mean()) / (z.std() or 1.0)


def _latent_probabilities(z, w, cut_low, cut_high):
    """P(low), P(high) given the driver score, for signal strength ``w``."""
    if w >= 1.0:
        return (z * w < cut_low).astype(float), (z * w > cut_high).astype(float)
    scale = _LOGISTIC_SD / (1.0 - w)

    def sig(t):
        return 0.5 * (1.0 + np.tanh(t / 2.0))

    return sig(scale * (cut_low - w * z)), sig(scale * (w * z - cut_high))


def _noise(rng, n):
    return rng.logistic(0.0, 1.0, n) / _LOGISTIC_SD


def generate(config=None, out_dir="."):
    """Write ``ecg.csv``, ``labs.csv``, ``latent.csv`` and ``manifest.txt`` into ``out_dir``.

    Output is byte-identical for a fixed config, seed included.
    """
    config = config or SynthConfig()
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)

    n_sub = config.n_subjects
    races = _allocate(n_sub, config.race_weights, rng)
    genders = _allocate(n_sub, (config.male_fraction, 1.0 - config.male_fraction), rng)
    base_age = rng.normal(62, 17, n_sub).clip(18, 95)
    lo, hi = config.ecgs_per_subject
    n_ecg_per = rng.integers(lo, hi + 1, n_sub)
    start = rng.uniform(0, 365 * 86400, n_sub)

    subj_idx = np.repeat(np.arange(n_sub), n_ecg_per)
    n = subj_idx.size
    # successive ECGs of a subject 2-30 days apart
    spacing = rng.uniform(2 * 86400, 30 * 86400, n)
    offsets = np.zeros(n)
    first = np.r_[0, np.cumsum(n_ecg_per)[:-1]]
    for s in range(n_sub):
        k = n_ecg_per[s]
        offsets[first[s]:first[s] + k] = np.r_[0.0, np.cumsum(spacing[first[s] + 1:first[s] + k])]
    ecg_time = np.round(start[subj_idx] + offsets)
    ages = np.minimum(base_age[subj_idx] + offsets / (365.25 * 86400), 120.0)
    ages = np.round(ages, 1)

    feats = _ecg_features(rng, n)
    for name in ECG_FEATURES:
        feats[name][rng.random(n) < config.missing_rate] = np.nan

    records = []
    width = len(str(n_sub))
    for i in range(n):
        s = subj_idx[i]
        records.append(EcgRecord(
            record_id=f"e{i:0{len(str(n))}d}",
            subject_id=f"s{s:0{width}d}",
            timestamp=_EPOCH + timedelta(seconds=float(ecg_time[i])),
            age_years=float(ages[i]),
            gender=GENDERS[genders[s]],
            race=RACES[races[s]],
            **{name: None if np.isnan(feats[name][i]) else float(feats[name][i]) for name in ECG_FEATURES},
        ))
    F = np.array([encode_features(r) for r in records])

    observations = []
    latent_rows = []
    manifest = {
        "generator": "ecglab.synth",
        "seed": config.seed,
        "n_subjects": n_sub,
        "n_ecgs": n,
        "ecgs_per_subject": f"{lo}-{hi}",
        "missing_rate": config.missing_rate,
        "max_gap_s": config.max_gap_s,
        "ecg_file": "ecg.csv",
        "lab_file": "labs.csv",
        "latent_file": "latent.csv",
    }
    for a_idx, spec in enumerate(config.analytes, start=1):
        w = spec.signal_strength
        z = _standardized_driver_mean(F, spec.driver_features)
        s_latent = w * z + (1.0 - w) * _noise(rng, n)
        cut_low = float(np.quantile(s_latent, spec.low_prevalence))
        cut_high = float(np.quantile(s_latent, 1.0 - spec.high_prevalence))
        slope = (spec.ref_high - spec.ref_low) / (cut_high - cut_low)
        values = spec.ref_low + (s_latent - cut_low) * slope
        p_low, p_high = _latent_probabilities(z, w, cut_low, cut_high)

        has_lab = rng.random(n) < config.lab_coverage
        gaps = np.round(rng.uniform(-config.max_gap_s, config.max_gap_s, n))
        bound_missing = rng.random(n) < config.bound_missing_rate
        for i in np.flatnonzero(has_lab):
            observations.append(_observation(
                records[i], spec, values[i], ecg_time[i] + gaps[i], bound_missing[i]))
        # out-of-horizon draws 2-6 h away, carrying unrelated values
        n_dis = int(round(config.distractor_rate * n))
        dis_idx = np.sort(rng.choice(n, n_dis, replace=False)) if n_dis else np.empty(0, int)
        dis_gap = rng.uniform(2 * 3600, 6 * 3600, n_dis) * rng.choice([-1.0, 1.0], n_dis)
        dis_val = spec.ref_low + (rng.permutation(s_latent)[:n_dis] - cut_low) * slope
        for j, i in enumerate(dis_idx):
            observations.append(_observation(
                records[i], spec, dis_val[j], ecg_time[i] + np.round(dis_gap[j]), False))

        for i in range(n):
            latent_rows.append((records[i].record_id, spec.name, repr(float(p_low[i])), repr(float(p_high[i]))))

        pop_low, pop_high = _population_auroc(rng, z, w, cut_low, cut_high)
        prefix = f"analyte.{a_idx}"
        manifest.update({
            f"{prefix}.name": spec.name,
            f"{prefix}.unit": spec.unit,
            f"{prefix}.ref_low": spec.ref_low,
            f"{prefix}.ref_high": spec.ref_high,
            f"{prefix}.signal_strength": w,
            f"{prefix}.drivers": ",".join(spec.driver_features),
            f"{prefix}.low.prevalence_target": spec.low_prevalence,
            f"{prefix}.high.prevalence_target": spec.high_prevalence,
            f"{prefix}.low.population_auroc": round(pop_low, 6),
            f"{prefix}.high.population_auroc": round(pop_high, 6),
        })

    ecg_path = out / "ecg.csv"
    lab_path = out / "labs.csv"
    latent_path = out / "latent.csv"
    manifest_path = out / "manifest.txt"
    write_ecg_table(records, ecg_path)
    observations.sort(key=lambda o: (o.subject_id, o.analyte, o.timestamp))
    write_lab_table(observations, lab_path)
    with open(latent_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["record_id", "analyte", "p_low", "p_high"])
        writer.writerows(latent_rows)
    write_manifest(manifest, manifest_path)
    return GeneratedCohort(ecg_path, lab_path, manifest_path, latent_path, manifest)


def _observation(record, spec, value, t, bound_missing):
    return LabObservation(
        subject_id=record.subject_id,
        analyte=spec.name,
        value=float(value),
        unit=spec.unit,
        ref_low=None if bound_missing else spec.ref_low,
        ref_high=None if bound_missing else spec.ref_high,
        timestamp=_EPOCH + timedelta(seconds=float(t)),
    )


def _population_auroc(rng, z, w, cut_low, cut_high):
    """Monte Carlo AUROC of the driver score for fresh noise draws."""
    zz = rng.choice(z, _POPULATION_DRAWS)
    s = w * zz + (1.0 - w) * _noise(rng, _POPULATION_DRAWS)
    out = []
    for labels, score in (((s < cut_low), -zz), ((s > cut_high), zz)):
        try:
            out.append(auroc(score, labels))
        except SingleClass:
            out.append(math.nan)
    return tuple(out)


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in manifest.items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path):
    manifest = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                manifest[key.strip()] = value.strip()
    return manifest


def read_latent(path):
    """``{(record_id, analyte): (p_low, p_high)}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {
            (r["record_id"], r["analyte"]): (float(r["p_low"]), float(r["p_high"]))
            for r in csv.DictReader(fh)
        }


def _parse_range(text):
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


def load_config(path):
    """Read a :class:`SynthConfig` from an INI file.

    ``[cohort]`` holds scalar settings; each ``[analyte:<name>]`` section
    defines one analyte. Without analyte sections the defaults are used.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise InvalidConfig(f"cannot read config {path}")
    try:
        kw = {}
        if parser.has_section("cohort"):
            sec = parser["cohort"]
            for key in ("n_subjects", "seed"):
                if key in sec:
                    kw[key] = sec.getint(key)
            for key in ("max_gap_s", "lab_coverage", "distractor_rate", "missing_rate",
                        "bound_missing_rate", "male_fraction"):
                if key in sec:
                    kw[key] = sec.getfloat(key)
            if "ecgs_per_subject" in sec:
                kw["ecgs_per_subject"] = _parse_range(sec["ecgs_per_subject"])
            if "race_weights" in sec:
                kw["race_weights"] = tuple(float(v) for v in sec["race_weights"].split(","))
        analytes = []
        for name in parser.sections():
            if not name.startswith("analyte:"):
                continue
            sec = parser[name]
            analytes.append(AnalyteSpec(
                name=name.split(":", 1)[1].strip(),
                unit=sec.get("unit", ""),
                ref_low=sec.getfloat("ref_low"),
                ref_high=sec.getfloat("ref_high"),
                signal_strength=sec.getfloat("signal_strength", 1.0),
                driver_features=tuple(d.strip() for d in sec.get("drivers", "t_end").split(",")),
                low_prevalence=sec.getfloat("low_prevalence", 0.1),
                high_prevalence=sec.getfloat("high_prevalence", 0.2),
            ))
        if analytes:
            kw["analytes"] = tuple(analytes)
    except (ValueError, TypeError, KeyError) as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    config = SynthConfig(**kw)
    config.validate()
    return config


def with_seed(config, seed):
    return replace(config, seed=seed)
