"""Synthetic tri-modal EHR-like cohort.

Per patient:

* a latent severity ``x`` follows a mean-reverting AR(1) on an hourly grid;
* an image latent ``m`` and a text cluster ``c`` are drawn once;
* each of the 16 time-series features is observed at its own Poisson times
  with value ``mean + sd * (loading * x(t) + noise)`` (irregular and
  asynchronous by construction);
* images are a fixed random projection of ``(x(t_capture), m)`` plus noise;
* texts are token sequences drawn mostly from the vocabulary block of
  cluster ``c``;
* event onset for each task is the first hour at which
  ``x + w_img * m + w_txt * q_c + k * q_c * trend(x) + age term`` crosses a
  task threshold, so image and text carry signal the time series lacks;
* modality missingness is drawn independently of everything else.

Thresholds are calibrated in one pass as population quantiles so the share
of patients with an onset matches the prevalence targets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import (
    MAX_STAY_HOURS,
    TASKS,
    CohortError,
    PatientRecord,
    StaticFeatures,
    quantize_time,
)

# (mean, sd, loading on latent severity) per time-series feature, roughly in
# clinical units; loadings mix signs and strengths.
FEATURE_PROFILE = {
    "heart_rate": (85.0, 15.0, 0.9),
    "resp_rate": (18.0, 4.0, 0.8),
    "dbp": (65.0, 10.0, -0.6),
    "sbp": (120.0, 18.0, -0.7),
    "temperature": (37.0, 0.6, 0.4),
    "spo2": (96.0, 2.5, -0.8),
    "hematocrit": (32.0, 5.0, -0.3),
    "platelet": (200.0, 70.0, -0.4),
    "wbc": (11.0, 4.0, 0.5),
    "bilirubin": (1.2, 0.8, 0.5),
    "ph": (7.38, 0.06, -0.6),
    "hco3": (24.0, 4.0, -0.5),
    "creatinine": (1.3, 0.7, 0.6),
    "lactate": (2.0, 1.2, 0.9),
    "potassium": (4.1, 0.5, 0.2),
    "sodium": (139.0, 4.0, 0.1),
}

# Relative weight of the image latent and the text cluster in each task's risk.
TASK_MODALITY_WEIGHTS = {
    "mortality": (0.8, 0.7),
    "vasopressor": (1.0, 0.8),
    "intubation": (0.8, 1.0),
}


@dataclass
class SynthConfig:
    n_patients: int = 2500
    split_fractions: tuple = (0.8, 0.1, 0.1)
    image_missing: float = 0.76
    text_missing: float = 0.49
    prevalence: dict = field(
        default_factory=lambda: {"mortality": 0.10, "vasopressor": 0.27, "intubation": 0.39}
    )
    stay_min: float = 24.0
    stay_max: float = 96.0
    onset_min_hour: int = 6
    vital_rate: float = 0.5
    lab_rate: float = 0.08
    ar_phi: float = 0.95
    obs_noise: float = 0.35
    image_size: int = 56
    max_images: int = 1
    image_noise: float = 1.0
    vocab_size: int = 64
    n_text_clusters: int = 4
    text_len: tuple = (4, 12)
    text_purity: float = 0.75
    image_signal: float = 1.2
    text_signal: float = 1.2
    interaction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("image_missing", "text_missing", "text_purity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CohortError(f"synth.{name}={v} outside [0, 1]")
        for task, p in self.prevalence.items():
            if task not in TASKS or not 0.0 < p < 1.0:
                raise CohortError(f"synth.prevalence.{task}={p} invalid")
        if self.n_patients < 1:
            raise CohortError("synth.n_patients must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise CohortError("synth.split_fractions must be three numbers summing to 1")
        if not 0 < self.stay_min <= self.stay_max <= MAX_STAY_HOURS:
            raise CohortError("synth stay range must satisfy 0 < stay_min <= stay_max <= 1440")
        if self.image_size % 7:
            raise CohortError("synth.image_size must be a multiple of 7 (7x7 patch grid)")
        if self.vocab_size < self.n_text_clusters + 1:
            raise CohortError("synth.vocab_size too small for the cluster count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["text_len"] = list(self.text_len)
        return d


@dataclass
class _Latent:
    stay: float
    x: np.ndarray
    m: float
    q: float
    cluster: int
    age: float
    gender: int


def image_patterns(cfg: SynthConfig) -> np.ndarray:
    """The fixed (2, H, W) projection turning (x, m) into a pixel grid.

    Each pattern is one patch-sized motif tiled over the 7x7 grid, so every
    image token carries the latents along the same direction and they can be
    read without knowing which patch a token came from.
    """
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    p = cfg.image_size // 7
    pat = np.tile(rng.normal(size=(2, p, p)), (1, 7, 7))
    return pat / np.sqrt((pat**2).mean(axis=(1, 2), keepdims=True))


def _latent(cfg: SynthConfig, i: int) -> _Latent:
    rng = np.random.default_rng([cfg.seed, i, 0])
    stay = float(quantize_time(rng.uniform(cfg.stay_min, cfg.stay_max)))
    n_hours = int(np.ceil(stay)) + 1
    x = np.empty(n_hours)
    x[0] = rng.normal()
    scale = np.sqrt(1.0 - cfg.ar_phi**2)
    eps = rng.normal(size=n_hours)
    for h in range(1, n_hours):
        x[h] = cfg.ar_phi * x[h - 1] + scale * eps[h]
    cluster = int(rng.integers(cfg.n_text_clusters))
    q = np.linspace(-1.0, 1.0, cfg.n_text_clusters)[cluster] if cfg.n_text_clusters > 1 else 0.0
    return _Latent(
        stay=stay,
        x=x,
        m=float(rng.normal()),
        q=float(q),
        cluster=cluster,
        age=round(float(rng.uniform(18.0, 90.0)), 1),
        gender=int(rng.integers(2)),
    )


def _risk(cfg: SynthConfig, lat: _Latent, task: str) -> np.ndarray:
    w_img, w_txt = TASK_MODALITY_WEIGHTS[task]
    x = lat.x
    trend = x - np.concatenate([np.full(6, x[0]), x[:-6]])
    return (
        x
        + w_img * cfg.image_signal * lat.m
        + w_txt * cfg.text_signal * lat.q
        + cfg.interaction * lat.q * trend
        + 0.3 * (lat.age - 54.0) / 20.0
    )


def _onset(risk: np.ndarray, threshold: float, lo: int, stay: float) -> float | None:
    """The hour of peak risk, if the peak clears the threshold.

    Whether an event happens depends on the whole risk level, static offsets
    included; when it happens follows the dynamic course. A first-crossing rule
    would instead put every high-offset patient's onset at ``lo``.
    """
    hi = int(np.floor(stay))
    if hi < lo:
        return None
    seg = risk[lo : hi + 1]
    k = int(np.argmax(seg))
    return float(lo + k) if seg[k] > threshold else None


def _peak(risk: np.ndarray, lo: int, stay: float) -> float:
    hi = int(np.floor(stay))
    return float(risk[lo : hi + 1].max()) if hi >= lo else -np.inf


def _calibrate(peaks: np.ndarray, prevalence: float, task: str) -> float:
    finite = peaks[np.isfinite(peaks)]
    if len(finite) == 0:
        raise CohortError(f"cannot calibrate {task}: no patient admits an onset")
    threshold = float(np.quantile(peaks, 1.0 - prevalence, method="lower"))
    realized = float(np.mean(peaks > threshold))
    tol = max(0.02, 3.0 / len(peaks))
    if abs(realized - prevalence) > tol:
        raise CohortError(f"prevalence target {prevalence} for {task} infeasible (best {realized:.3f})")
    return threshold


def _observe(cfg: SynthConfig, i: int, lat: _Latent, stay: float, onsets: dict, patterns: np.ndarray) -> PatientRecord:
    rng = np.random.default_rng([cfg.seed, i, 1])
    grid = np.arange(len(lat.x), dtype=np.float64)

    def x_at(t):
        return np.interp(t, grid, lat.x)

    times, feats, values = [], [], []
    for f, (name, (mu, sd, load)) in enumerate(FEATURE_PROFILE.items()):
        rate = cfg.vital_rate if f < 6 else cfg.lab_rate
        n = rng.poisson(rate * stay)
        t = np.unique(quantize_time(rng.uniform(0.0, stay, size=n)))
        v = mu + sd * (load * x_at(t) + cfg.obs_noise * rng.normal(size=len(t)))
        times.append(t)
        feats.append(np.full(len(t), f))
        values.append(np.round(v, 3))

    image_times, images = [], []
    if rng.random() >= cfg.image_missing:
        n_img = 1 + (int(rng.integers(cfg.max_images)) if cfg.max_images > 1 else 0)
        t_img = [rng.uniform(0.0, min(6.0, stay))] + list(rng.uniform(0.0, stay, size=n_img - 1))
        for t in sorted(float(quantize_time(t)) for t in t_img):
            px = patterns[0] * x_at(t) + patterns[1] * lat.m + cfg.image_noise * rng.normal(size=patterns[0].shape)
            image_times.append(t)
            images.append(np.round(px, 4))

    text_times, texts = [], []
    if rng.random() >= cfg.text_missing:
        n_tok = int(rng.integers(cfg.text_len[0], cfg.text_len[1] + 1))
        block = (cfg.vocab_size - 1) // cfg.n_text_clusters
        lo = 1 + lat.cluster * block
        own = rng.integers(lo, lo + block, size=n_tok)
        other = rng.integers(1, cfg.vocab_size, size=n_tok)
        toks = np.where(rng.random(n_tok) < cfg.text_purity, own, other)
        text_times.append(0.0)
        texts.append(toks.astype(np.int64))

    return PatientRecord(
        id=f"p{i:06d}",
        static=StaticFeatures(lat.age, lat.gender),
        stay_end=stay,
        onsets=onsets,
        ts_time=np.concatenate(times),
        ts_feature=np.concatenate(feats),
        ts_value=np.concatenate(values),
        image_times=image_times,
        images=images,
        text_times=text_times,
        texts=texts,
    )


def synth_generate(cfg: SynthConfig) -> dict[str, list[PatientRecord]]:
    """Generate ``{"train": [...], "val": [...], "test": [...]}`` deterministically."""
    cfg.validate()
    lats = [_latent(cfg, i) for i in range(cfg.n_patients)]
    lo = cfg.onset_min_hour

    risks = {task: [_risk(cfg, lat, task) for lat in lats] for task in TASKS}
    stays = np.array([lat.stay for lat in lats])
    thresholds = {}
    onsets = [dict.fromkeys(TASKS) for _ in lats]

    # mortality ends the stay, so it is calibrated first and the others on the truncated stays
    peaks = np.array([_peak(r, lo, s) for r, s in zip(risks["mortality"], stays)])
    thresholds["mortality"] = _calibrate(peaks, cfg.prevalence["mortality"], "mortality")
    for j, (r, s) in enumerate(zip(risks["mortality"], stays)):
        onset = _onset(r, thresholds["mortality"], lo, s)
        onsets[j]["mortality"] = onset
        if onset is not None:
            stays[j] = onset
    for task in ("vasopressor", "intubation"):
        peaks = np.array([_peak(r, lo, s) for r, s in zip(risks[task], stays)])
        thresholds[task] = _calibrate(peaks, cfg.prevalence[task], task)
        for j, (r, s) in enumerate(zip(risks[task], stays)):
            onsets[j][task] = _onset(r, thresholds[task], lo, s)

    patterns = image_patterns(cfg)
    records = [_observe(cfg, i, lat, float(stays[i]), onsets[i], patterns) for i, lat in enumerate(lats)]

    order = np.random.default_rng([cfg.seed, 0x5111]).permutation(cfg.n_patients)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_patients))
    n_val = int(round(cfg.split_fractions[1] * cfg.n_patients))
    parts = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    return {name: [records[i] for i in sorted(idx)] for name, idx in parts.items()}


def generation_report(splits: dict[str, list[PatientRecord]]) -> list[dict]:
    rows = []
    for name, recs in splits.items():
        n = len(recs)
        row = {
            "split": name,
            "patients": n,
            "image_missing_rate": float(np.mean([not r.has_image for r in recs])) if n else float("nan"),
            "text_missing_rate": float(np.mean([not r.has_text for r in recs])) if n else float("nan"),
        }
        for task in TASKS:
            row[f"prevalence_{task}"] = float(np.mean([r.onsets[task] is not None for r in recs])) if n else float("nan")
        rows.append(row)
    return rows
