"""Triplet data model, cohort I/O, window extraction and balanced sampling.

A patient is an unordered set of (value, time, feature_type) observations.
Time-series observations carry scalars, images carry pixel grids and texts
carry token-id sequences. Times are hours since admission.

Cohort file format (JSON Lines, one patient per line, keys sorted)::

    {"age": 63.0, "gender": 1, "id": "p00017",
     "images": [{"pixels": [[...], ...], "t": 2.5}],
     "onsets": {"intubation": null, "mortality": 41.0, "vasopressor": 30.25},
     "stay_end": 41.0,
     "texts": [{"t": 0.0, "tokens": [12, 7, 3]}],
     "ts": [{"f": 0, "t": 0.125, "v": 88.1}, ...]}

``ts`` rows are sorted by (t, f). ``f`` indexes ``TS_FEATURES``; images use
feature type ``IMAGE_FT`` and texts ``TEXT_FT``. The feature-name table ships
alongside the cohort as ``manifest.json`` (see :func:`feature_manifest`).
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

TASKS = ("mortality", "vasopressor", "intubation")
VITALS = ("heart_rate", "resp_rate", "dbp", "sbp", "temperature", "spo2")
LABS = (
    "hematocrit",
    "platelet",
    "wbc",
    "bilirubin",
    "ph",
    "hco3",
    "creatinine",
    "lactate",
    "potassium",
    "sodium",
)
TS_FEATURES = VITALS + LABS
N_TS = len(TS_FEATURES)
IMAGE_FT = N_TS
TEXT_FT = N_TS + 1
N_FEATURE_TYPES = N_TS + 2

MAX_STAY_HOURS = 1440.0
HORIZON_HOURS = 12.0
MIN_WINDOW_HOURS = 3.0
MAX_WINDOW_HOURS = 24.0
VALIDITY_HOURS = 1.0
MIN_VITAL_TYPES = 5
# Times live on a 1/64 h grid so differences and shifts are exact in binary.
TIME_QUANTUM = 1.0 / 64.0
SCHEMA_VERSION = 1


class CohortError(ValueError):
    pass


def quantize_time(t):
    return np.floor(np.asarray(t, dtype=np.float64) / TIME_QUANTUM) * TIME_QUANTUM


@dataclass(frozen=True)
class Observation:
    value: object
    time: float
    feature_type: int


@dataclass(frozen=True)
class StaticFeatures:
    age: float
    gender: int


@dataclass
class PatientRecord:
    id: str
    static: StaticFeatures
    stay_end: float
    onsets: dict
    ts_time: np.ndarray
    ts_feature: np.ndarray
    ts_value: np.ndarray
    image_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    images: list = field(default_factory=list)
    text_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    texts: list = field(default_factory=list)

    def __post_init__(self):
        self.ts_time = np.asarray(self.ts_time, dtype=np.float64)
        self.ts_feature = np.asarray(self.ts_feature, dtype=np.int64)
        self.ts_value = np.asarray(self.ts_value, dtype=np.float64)
        self.image_times = np.asarray(self.image_times, dtype=np.float64)
        self.text_times = np.asarray(self.text_times, dtype=np.float64)
        order = np.lexsort((self.ts_feature, self.ts_time))
        if not np.array_equal(order, np.arange(len(order))):
            self.ts_time = self.ts_time[order]
            self.ts_feature = self.ts_feature[order]
            self.ts_value = self.ts_value[order]
        for attr, payload in (("image_times", "images"), ("text_times", "texts")):
            times = getattr(self, attr)
            order = np.argsort(times, kind="stable")
            if not np.array_equal(order, np.arange(len(order))):
                setattr(self, attr, times[order])
                items = getattr(self, payload)
                setattr(self, payload, [items[i] for i in order])

    def observations(self) -> list[Observation]:
        obs = [Observation(float(v), float(t), int(f)) for t, f, v in zip(self.ts_time, self.ts_feature, self.ts_value)]
        obs += [Observation(px, float(t), IMAGE_FT) for t, px in zip(self.image_times, self.images)]
        obs += [Observation(tok, float(t), TEXT_FT) for t, tok in zip(self.text_times, self.texts)]
        return obs

    @property
    def has_image(self) -> bool:
        return len(self.images) > 0

    @property
    def has_text(self) -> bool:
        return len(self.texts) > 0

    def validate(self) -> None:
        def fail(rule):
            raise CohortError(f"record {self.id}: {rule}")

        if len(self.ts_time) + len(self.images) + len(self.texts) < 1:
            fail("no observations")
        if not 0 < self.stay_end <= MAX_STAY_HOURS:
            fail(f"stay_end {self.stay_end} outside (0, {MAX_STAY_HOURS}]")
        if self.static.age < 18:
            fail(f"age {self.static.age} below 18")
        if self.static.gender not in (0, 1):
            fail(f"gender {self.static.gender} not in {{0, 1}}")
        for times in (self.ts_time, self.image_times, self.text_times):
            if len(times) and (times.min() < 0 or times.max() > self.stay_end):
                fail("observation time outside [0, stay_end]")
        if len(self.ts_feature) and (self.ts_feature.min() < 0 or self.ts_feature.max() >= N_TS):
            fail("time-series feature id out of range")
        if not np.all(np.isfinite(self.ts_value)):
            fail("non-finite time-series value")
        for task in TASKS:
            if task not in self.onsets:
                fail(f"missing onset entry for {task}")
            onset = self.onsets[task]
            if onset is not None and not 0 < onset <= self.stay_end:
                fail(f"{task} onset {onset} outside (0, stay_end={self.stay_end}]")

    def n_vital_types(self) -> int:
        return int(len(np.unique(self.ts_feature[self.ts_feature < len(VITALS)])))

    def to_json(self) -> str:
        d = {
            "id": self.id,
            "age": float(self.static.age),
            "gender": int(self.static.gender),
            "stay_end": float(self.stay_end),
            "onsets": {k: (None if self.onsets[k] is None else float(self.onsets[k])) for k in TASKS},
            "ts": [
                {"t": float(t), "f": int(f), "v": float(v)}
                for t, f, v in zip(self.ts_time, self.ts_feature, self.ts_value)
            ],
            "images": [{"t": float(t), "pixels": np.asarray(px).tolist()} for t, px in zip(self.image_times, self.images)],
            "texts": [{"t": float(t), "tokens": [int(x) for x in tok]} for t, tok in zip(self.text_times, self.texts)],
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PatientRecord":
        ts = d.get("ts", [])
        return cls(
            id=str(d["id"]),
            static=StaticFeatures(float(d["age"]), int(d["gender"])),
            stay_end=float(d["stay_end"]),
            onsets={k: (None if v is None else float(v)) for k, v in d["onsets"].items()},
            ts_time=[o["t"] for o in ts],
            ts_feature=[o["f"] for o in ts],
            ts_value=[o["v"] for o in ts],
            image_times=[o["t"] for o in d.get("images", [])],
            images=[np.asarray(o["pixels"], dtype=np.float64) for o in d.get("images", [])],
            text_times=[o["t"] for o in d.get("texts", [])],
            texts=[np.asarray(o["tokens"], dtype=np.int64) for o in d.get("texts", [])],
        )


@dataclass(frozen=True)
class ModalityMask:
    has_timeseries: bool = True
    has_image: bool = False
    has_text: bool = False

    def as_tuple(self) -> tuple[bool, bool, bool]:
        return (self.has_timeseries, self.has_image, self.has_text)


@dataclass(frozen=True)
class Window:
    patient_id: str
    t_current: float
    horizon_start: float
    label: dict
    presence: ModalityMask

    def masked(self, image: bool = False, text: bool = False) -> "Window":
        """Copy with the image and/or text modality switched off."""
        p = self.presence
        return Window(
            self.patient_id,
            self.t_current,
            self.horizon_start,
            self.label,
            ModalityMask(True, p.has_image and not image, p.has_text and not text),
        )


# ---------------------------------------------------------------------------
# loading


@dataclass
class LoadedCohort:
    records: list
    excluded: list

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def write_cohort(path, records: Sequence[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json())
            fh.write("\n")


def load_cohort(path, schema_version: int = SCHEMA_VERSION) -> LoadedCohort:
    """Parse and validate a JSONL cohort file.

    Patients observing fewer than five distinct vital-sign types are dropped
    and listed in ``excluded``.
    """
    if schema_version != SCHEMA_VERSION:
        raise CohortError(f"unsupported schema version {schema_version}")
    records, excluded = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = PatientRecord.from_dict(d)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CohortError(f"{path}:{lineno}: malformed record ({exc})") from None
            rec.validate()
            if rec.n_vital_types() < MIN_VITAL_TYPES:
                excluded.append(rec.id)
                continue
            records.append(rec)
    return LoadedCohort(records, excluded)


def feature_manifest() -> dict:
    table = {name: i for i, name in enumerate(TS_FEATURES)}
    table["image"] = IMAGE_FT
    table["text"] = TEXT_FT
    return {"schema_version": SCHEMA_VERSION, "feature_types": table, "n_feature_types": N_FEATURE_TYPES}


# ---------------------------------------------------------------------------
# characterization


def characterize_sampling(record: PatientRecord) -> dict:
    """Per time-series feature: irregular / asynchronous flags.

    A feature seen fewer than three times has undefined irregularity; it is
    reported as ``irregular=False`` with ``undefined=True``.
    """
    obs_times = np.unique(record.ts_time)
    present_at = {t: set() for t in obs_times}
    for t, f in zip(record.ts_time, record.ts_feature):
        present_at[t].add(int(f))
    out = {}
    for f in range(N_TS):
        times = np.unique(record.ts_time[record.ts_feature == f])
        gaps = np.diff(times)
        undefined = len(times) < 3
        irregular = (not undefined) and bool(np.any(gaps[1:] != gaps[:-1]))
        asynchronous = any(len(present_at[t]) < N_TS for t in times)
        out[TS_FEATURES[f]] = {"irregular": irregular, "asynchronous": asynchronous, "undefined": undefined}
    return out


def is_asynchronous(record: PatientRecord) -> bool:
    """True if some time-series observation time lacks at least one feature."""
    pairs = np.unique(np.stack([record.ts_time, record.ts_feature]), axis=1)
    _, per_time = np.unique(pairs[0], return_counts=True)
    return bool(np.any(per_time < N_TS))


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationStats:
    feature_min: np.ndarray
    feature_max: np.ndarray
    age_min: float
    age_max: float

    def to_dict(self) -> dict:
        return {
            "feature_min": [float(x) for x in self.feature_min],
            "feature_max": [float(x) for x in self.feature_max],
            "age_min": float(self.age_min),
            "age_max": float(self.age_max),
        }

    @classmethod
    def from_dict(cls, d) -> "NormalizationStats":
        return cls(np.asarray(d["feature_min"]), np.asarray(d["feature_max"]), d["age_min"], d["age_max"])


def fit_normalization(train: Sequence[PatientRecord]) -> NormalizationStats:
    lo = np.full(N_TS, np.inf)
    hi = np.full(N_TS, -np.inf)
    ages = []
    for r in train:
        ages.append(r.static.age)
        if len(r.ts_value):
            np.minimum.at(lo, r.ts_feature, r.ts_value)
            np.maximum.at(hi, r.ts_feature, r.ts_value)
    bad = [TS_FEATURES[i] for i in range(N_TS) if not hi[i] > lo[i]]
    if bad:
        raise CohortError(f"degenerate features (max == min or unobserved): {', '.join(bad)}")
    a_lo, a_hi = (min(ages), max(ages)) if ages else (18.0, 100.0)
    if not a_hi > a_lo:
        a_hi = a_lo + 1.0
    return NormalizationStats(lo, hi, float(a_lo), float(a_hi))


def apply_normalization(record: PatientRecord, stats: NormalizationStats) -> PatientRecord:
    """Min-max scale the time-series values (no clipping). Images/texts untouched."""
    lo = stats.feature_min[record.ts_feature]
    hi = stats.feature_max[record.ts_feature]
    return PatientRecord(
        id=record.id,
        static=record.static,
        stay_end=record.stay_end,
        onsets=record.onsets,
        ts_time=record.ts_time,
        ts_feature=record.ts_feature,
        ts_value=(record.ts_value - lo) / (hi - lo),
        image_times=record.image_times,
        images=record.images,
        text_times=record.text_times,
        texts=record.texts,
    )


# ---------------------------------------------------------------------------
# windows


def label_window(t_current: float, onset: float | None, horizon: float = HORIZON_HOURS) -> int:
    """1 iff the event starts within (t_current, t_current + horizon]."""
    return int(onset is not None and t_current < onset <= t_current + horizon)


def _has_recent_ts(record: PatientRecord, t_current: float) -> bool:
    lo = np.searchsorted(record.ts_time, t_current - VALIDITY_HOURS, side="left")
    hi = np.searchsorted(record.ts_time, t_current, side="right")
    return hi > lo


def make_window(record: PatientRecord, t_current: float) -> Window:
    t_current = float(t_current)
    return Window(
        patient_id=record.id,
        t_current=t_current,
        horizon_start=max(0.0, t_current - MAX_WINDOW_HOURS),
        label={task: label_window(t_current, record.onsets[task]) for task in TASKS},
        presence=ModalityMask(
            True,
            bool(len(record.image_times) and record.image_times[0] <= t_current),
            bool(len(record.text_times) and record.text_times[0] <= t_current),
        ),
    )


def window_is_valid(record: PatientRecord, t_current: float, task: str | None = None) -> bool:
    if t_current < MIN_WINDOW_HOURS or t_current > record.stay_end:
        return False
    if task is not None:
        onset = record.onsets[task]
        if onset is not None and t_current >= onset:
            return False
    return _has_recent_ts(record, t_current)


def _draw(rng, lo, hi):
    return float(quantize_time(rng.uniform(lo, hi)))


def extract_training_window(
    record: PatientRecord,
    rng: np.random.Generator,
    task: str = "mortality",
    want_label: int | None = None,
    max_tries: int = 20,
) -> Window | None:
    """Draw a random training window, or ``None`` when no valid draw is found.

    ``t_current`` is uniform on [3, stay_end]. With ``want_label=1`` the draw
    is restricted to the 12 h positive region before onset (used to supply
    positives to the balanced sampler).
    """
    lo, hi = MIN_WINDOW_HOURS, record.stay_end
    onset = record.onsets[task]
    if want_label == 1:
        if onset is None:
            return None
        lo, hi = max(lo, onset - HORIZON_HOURS), min(hi, onset)
    if hi < lo:
        return None
    for _ in range(max_tries):
        t = _draw(rng, lo, hi)
        if want_label == 1 and t == hi:
            continue
        if window_is_valid(record, t, task):
            return make_window(record, t)
    return None


def patient_seed(seed: int, patient_id: str) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(patient_id.encode())]


def extract_inference_windows(
    record: PatientRecord, seed: int, task: str = "mortality", n_each: int = 5, max_tries: int = 200
) -> list[Window]:
    """Up to ``n_each`` positive and ``n_each`` negative fixed evaluation windows."""
    rng = np.random.default_rng(patient_seed(seed, record.id))
    onset = record.onsets[task]
    windows = []
    regions = []
    if onset is not None:
        regions.append((1, max(MIN_WINDOW_HOURS, onset - HORIZON_HOURS), onset))
        regions.append((0, MIN_WINDOW_HOURS, onset - HORIZON_HOURS))
    else:
        regions.append((0, MIN_WINDOW_HOURS, record.stay_end))
    for label, lo, hi in regions:
        if hi <= lo:
            continue
        got = []
        for _ in range(max_tries):
            if len(got) == n_each:
                break
            t = _draw(rng, lo, hi)
            if not window_is_valid(record, t, task) or label_window(t, onset) != label:
                continue
            got.append(make_window(record, t))
        windows.extend(got)
    return windows


def balanced_batches(
    windows: Sequence[Window], batch_size: int, rng: np.random.Generator, task: str = "mortality"
) -> Iterator[list[Window]]:
    """Yield ceil(len/batch_size) batches of ceil(b/2) positives + floor(b/2) negatives.

    Each class is drawn from a shuffled pool; an exhausted pool is reshuffled
    and reused, so a scarce class repeats within an epoch.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    pos = [w for w in windows if w.label[task] == 1]
    neg = [w for w in windows if w.label[task] == 0]
    if not pos:
        raise CohortError(f"no positive windows for task {task}")
    if not neg:
        raise CohortError(f"no negative windows for task {task}")
    n_pos, n_neg = math.ceil(batch_size / 2), batch_size // 2

    def stream(pool):
        while True:
            for i in rng.permutation(len(pool)):
                yield pool[i]

    ps, ns = stream(pos), stream(neg)
    for _ in range(math.ceil(len(windows) / batch_size)):
        yield [next(ps) for _ in range(n_pos)] + [next(ns) for _ in range(n_neg)]
