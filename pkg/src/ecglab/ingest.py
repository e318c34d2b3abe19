"""Loading and writing the ECG-record and lab-observation tables.

Both tables are header-named delimited text. Missing numeric cells are
either empty or the literal ``NA``; there are no numeric sentinels.
"""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from typing import Optional

from .errors import DuplicateRecordId, MalformedRow, MissingColumn, UnitConflict

INTERVAL_FEATURES = (
    "rr_interval_ms",
    "p_onset_ms",
    "p_end_ms",
    "qrs_onset_ms",
    "qrs_end_ms",
    "t_end_ms",
)
AXIS_FEATURES = ("p_axis_deg", "qrs_axis_deg", "t_axis_deg")
ECG_FEATURES = INTERVAL_FEATURES + AXIS_FEATURES

GENDERS = ("male", "female")
RACES = ("caucasian", "african", "asian", "latino", "other")

# attribute -> default column header
DEFAULT_ECG_SCHEMA = {
    "record_id": "record_id",
    "subject_id": "subject_id",
    "timestamp": "timestamp",
    "rr_interval_ms": "rr_interval",
    "p_onset_ms": "p_onset",
    "p_end_ms": "p_end",
    "qrs_onset_ms": "qrs_onset",
    "qrs_end_ms": "qrs_end",
    "t_end_ms": "t_end",
    "p_axis_deg": "p_axis",
    "qrs_axis_deg": "qrs_axis",
    "t_axis_deg": "t_axis",
    "age_years": "age",
    "gender": "gender",
    "race": "race",
}

DEFAULT_LAB_SCHEMA = {
    "subject_id": "subject_id",
    "analyte": "analyte",
    "value": "value",
    "unit": "unit",
    "ref_low": "ref_low",
    "ref_high": "ref_high",
    "timestamp": "timestamp",
}

MISSING_TOKENS = ("", "NA")
MALFORMED_TOLERANCE = 0.01

_GENDER_ALIASES = {"m": "male", "f": "female"}
_RACE_ALIASES = {
    "caucasians": "caucasian",
    "white": "caucasian",
    "africans": "african",
    "black": "african",
    "asians": "asian",
    "latinos": "latino",
    "hispanic": "latino",
}


@dataclass(frozen=True)
class EcgRecord:
    record_id: str
    subject_id: str
    timestamp: datetime
    rr_interval_ms: Optional[float]
    p_onset_ms: Optional[float]
    p_end_ms: Optional[float]
    qrs_onset_ms: Optional[float]
    qrs_end_ms: Optional[float]
    t_end_ms: Optional[float]
    p_axis_deg: Optional[float]
    qrs_axis_deg: Optional[float]
    t_axis_deg: Optional[float]
    age_years: float
    gender: str
    race: str

    def ecg_features(self):
        return tuple(getattr(self, name) for name in ECG_FEATURES)


@dataclass(frozen=True)
class LabObservation:
    subject_id: str
    analyte: str
    value: float
    unit: str
    ref_low: Optional[float]
    ref_high: Optional[float]
    timestamp: datetime


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str


@dataclass
class EcgTable:
    records: list
    rejects: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class LabTable:
    """Lab observations plus a ``(subject_id, analyte)`` index and per-analyte units."""

    observations: list
    rejects: list = field(default_factory=list)

    def __post_init__(self):
        self.groups = defaultdict(list)
        self.units = {}
        for obs in self.observations:
            self.groups[(obs.subject_id, obs.analyte)].append(obs)
            self.units.setdefault(obs.analyte, obs.unit)
        self.groups = dict(self.groups)

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    @property
    def analytes(self):
        return sorted(self.units)

    def group(self, subject_id, analyte):
        return self.groups.get((subject_id, analyte), [])

    def for_analyte(self, analyte):
        return [obs for obs in self.observations if obs.analyte == analyte]


def parse_timestamp(text):
    """Parse ISO-8601 into an aware UTC datetime truncated to whole seconds."""
    text = text.strip()
    if text.endswith("Z") or text.endswith("z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts):
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_optional(text):
    text = text.strip()
    if text in MISSING_TOKENS:
        return None
    return _parse_finite(text)


def _parse_finite(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {text!r}")
    return value


def _format_optional(value):
    return "" if value is None else repr(float(value))


def _check_header(header, schema, path):
    missing = [col for col in schema.values() if col not in header]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")


def _check_reject_rate(rejects, n_rows, path):
    if rejects and len(rejects) > MALFORMED_TOLERANCE * n_rows:
        first = rejects[0]
        raise MalformedRow(
            f"{path}: {len(rejects)} of {n_rows} rows malformed "
            f"(first at line {first.line}: {first.reason})",
            rejects,
        )


def _parse_ecg_row(row, schema):
    def cell(attr):
        return row[schema[attr]]

    values = {}
    for attr in INTERVAL_FEATURES:
        v = _parse_optional(cell(attr))
        if v is not None and v < 0:
            raise ValueError(f"{attr} negative ({v})")
        values[attr] = v
    for attr in AXIS_FEATURES:
        v = _parse_optional(cell(attr))
        if v is not None and not -360.0 <= v <= 360.0:
            raise ValueError(f"{attr} outside [-360, 360] ({v})")
        values[attr] = v
    age = _parse_finite(cell("age_years"))
    if not 18.0 <= age <= 120.0:
        raise ValueError(f"age {age} outside [18, 120]")
    gender = cell("gender").strip().lower()
    gender = _GENDER_ALIASES.get(gender, gender)
    if gender not in GENDERS:
        raise ValueError(f"unknown gender {cell('gender')!r}")
    race = cell("race").strip().lower()
    race = _RACE_ALIASES.get(race, race)
    if race not in RACES:
        raise ValueError(f"unknown race {cell('race')!r}")
    record_id = cell("record_id").strip()
    subject_id = cell("subject_id").strip()
    if not record_id or not subject_id:
        raise ValueError("empty record_id or subject_id")
    return EcgRecord(
        record_id=record_id,
        subject_id=subject_id,
        timestamp=parse_timestamp(cell("timestamp")),
        age_years=age,
        gender=gender,
        race=race,
        **values,
    )


def _parse_lab_row(row, schema):
    def cell(attr):
        return row[schema[attr]]

    ref_low = _parse_optional(cell("ref_low"))
    ref_high = _parse_optional(cell("ref_high"))
    if ref_low is not None and ref_high is not None and ref_low > ref_high:
        raise ValueError(f"ref_low {ref_low} > ref_high {ref_high}")
    subject_id = cell("subject_id").strip()
    analyte = cell("analyte").strip()
    if not subject_id or not analyte:
        raise ValueError("empty subject_id or analyte")
    return LabObservation(
        subject_id=subject_id,
        analyte=analyte,
        value=_parse_finite(cell("value")),
        unit=cell("unit").strip(),
        ref_low=ref_low,
        ref_high=ref_high,
        timestamp=parse_timestamp(cell("timestamp")),
    )


def _read_rows(path, schema, parse, delimiter):
    items, rejects = [], []
    n_rows = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        _check_header(reader.fieldnames or [], schema, path)
        for row in reader:
            n_rows += 1
            try:
                if None in row or any(v is None for v in row.values()):
                    raise ValueError("wrong number of cells")
                items.append(parse(row, schema))
            except (ValueError, KeyError) as exc:
                rejects.append(RejectedRow(reader.line_num, str(exc)))
    _check_reject_rate(rejects, n_rows, path)
    return items, rejects


def load_ecg_table(path, schema=None, delimiter=","):
    """Load ECG records from a delimited text file.

    Parameters
    ----------
    path : str or Path
        File to read; the first row is the header.
    schema : dict, optional
        Maps ``EcgRecord`` attribute names to column headers. Unlisted
        attributes fall back to ``DEFAULT_ECG_SCHEMA``.
    delimiter : str
        Column separator, ``","`` or ``"\\t"``.

    Returns
    -------
    EcgTable
        Valid records in file order plus the rejected rows. Loading fails
        with ``MalformedRow`` when more than 1% of rows are rejected.
    """
    schema = {**DEFAULT_ECG_SCHEMA, **(schema or {})}
    records, rejects = _read_rows(path, schema, _parse_ecg_row, delimiter)
    seen = set()
    for rec in records:
        if rec.record_id in seen:
            raise DuplicateRecordId(f"{path}: record_id {rec.record_id!r} repeated")
        seen.add(rec.record_id)
    return EcgTable(records, rejects)


def load_lab_table(path, schema=None, delimiter=","):
    """Load lab observations; every analyte must use a single unit."""
    schema = {**DEFAULT_LAB_SCHEMA, **(schema or {})}
    observations, rejects = _read_rows(path, schema, _parse_lab_row, delimiter)
    units = {}
    for obs in observations:
        unit = units.setdefault(obs.analyte, obs.unit)
        if unit != obs.unit:
            raise UnitConflict(
                f"{path}: analyte {obs.analyte!r} appears in both {unit!r} and {obs.unit!r}"
            )
    return LabTable(observations, rejects)


def write_ecg_table(records, path, schema=None, delimiter=","):
    schema = {**DEFAULT_ECG_SCHEMA, **(schema or {})}
    attrs = [f.name for f in fields(EcgRecord)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow([schema[a] for a in attrs])
        for rec in records:
            row = []
            for a in attrs:
                v = getattr(rec, a)
                if a == "timestamp":
                    row.append(format_timestamp(v))
                elif a in ECG_FEATURES:
                    row.append(_format_optional(v))
                elif a == "age_years":
                    row.append(repr(float(v)))
                else:
                    row.append(v)
            writer.writerow(row)


def write_lab_table(observations, path, schema=None, delimiter=","):
    schema = {**DEFAULT_LAB_SCHEMA, **(schema or {})}
    attrs = [f.name for f in fields(LabObservation)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow([schema[a] for a in attrs])
        for obs in observations:
            writer.writerow([
                obs.subject_id,
                obs.analyte,
                repr(float(obs.value)),
                obs.unit,
                _format_optional(obs.ref_low),
                _format_optional(obs.ref_high),
                format_timestamp(obs.timestamp),
            ])
