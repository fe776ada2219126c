"""Run configuration: presets, YAML loading, validation and fingerprints."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cohort import CohortError
from .evaluation import SweepSpec
from .model import ConfigError, FusionConfig, fingerprint
from .synth import SynthConfig
from .train import TrainConfig

CONFIG_VERSION = 1
SECTIONS = ("synth", "fusion", "train", "sweep", "paths")

# Full-scale protocol values. Where the protocol leaves a value open the desk
# default is reused; see DESCRIPTIONS.
FULL = {
    "seed": 0,
    "synth": {
        "n_patients": 42813,
        "image_size": 224,
        "vocab_size": 28996,
    },
    "fusion": {
        "d": 256,
        "layers": 6,
        "d_enc": 768,
        "text_len": 128,
        "vocab_size": 28996,
        "image_size": 224,
    },
    "train": {"epochs": 50, "lrs": [1e-6, 3e-6, 1e-5, 3e-5, 1e-4]},
}

DESK = {
    "seed": 0,
    "synth": {
        "n_patients": 3000,
        "split_fractions": [0.7, 0.15, 0.15],
        "image_size": 56,
        "vocab_size": 64,
        "vital_rate": 0.2,
        "image_signal": 2.0,
        "text_signal": 2.0,
    },
    "fusion": {
        "d": 32,
        "layers": 2,
        "d_enc": 16,
        "text_len": 16,
        "vocab_size": 64,
        "image_size": 56,
    },
    "train": {"epochs": 15, "lrs": [1e-3]},
}

PRESETS = {"full": FULL, "desk": DESK}

DESCRIPTIONS = {
    "version": "config schema version (required)",
    "seed": "master seed: cohort generation",
    "preset": "base preset the file overrides (full or desk)",
    "synth.n_patients": "patients generated (split by synth.split_fractions)",
    "synth.split_fractions": "train/val/test fractions",
    "synth.image_missing": "target fraction of patients without an image",
    "synth.text_missing": "target fraction of patients without text",
    "synth.prevalence": "per-task event prevalence targets",
    "synth.stay_min": "shortest stay (h)",
    "synth.stay_max": "longest stay (h)",
    "synth.onset_min_hour": "earliest admissible event onset (h)",
    "synth.vital_rate": "vital-sign observations per hour per feature",
    "synth.lab_rate": "lab observations per hour per feature",
    "synth.ar_phi": "AR(1) coefficient of the latent severity",
    "synth.obs_noise": "observation noise (latent units)",
    "synth.image_size": "image grid side (multiple of 7)",
    "synth.max_images": "images per imaged patient (upper bound)",
    "synth.image_noise": "pixel noise",
    "synth.vocab_size": "text vocabulary size",
    "synth.n_text_clusters": "latent text clusters",
    "synth.text_len": "min/max tokens per text",
    "synth.text_purity": "fraction of tokens drawn from the patient's cluster",
    "synth.image_signal": "weight of the image-only latent in event risk",
    "synth.text_signal": "weight of the text-cluster latent in event risk",
    "synth.interaction": "weight of the cluster x severity-trend term",
    "fusion.d": "model width",
    "fusion.layers": "encoder layers per modality tower",
    "fusion.heads": "attention heads",
    "fusion.bottleneck": "shared bottleneck tokens",
    "fusion.fusion_layer": "first layer (1-based) exchanging bottleneck tokens",
    "fusion.maa": "logit combination head: tsa, aa or ctaa",
    "fusion.tau": "CTAA softmax temperature",
    "fusion.dropout": "dropout rate during training",
    "fusion.modalities": "towers built (ts only = time-series reference)",
    "fusion.d_enc": "frozen featurizer output width",
    "fusion.text_len": "text tokens per note after padding/truncation",
    "fusion.vocab_size": "text vocabulary size seen by the model",
    "fusion.image_size": "image grid side seen by the model",
    "fusion.n_feature_types": "feature-type table rows",
    "fusion.featurizer_seed": "seed of the frozen image/text featurizers",
    "fusion.time_mode": "relative (t - t_current) or absolute time embedding",
    "fusion.umse_disabled": "modalities whose time/feature-type embeddings are zeroed",
    "fusion.k_images": "most recent images used per window",
    "fusion.k_texts": "most recent texts used per window",
    "fusion.multi_token": "train one classifier head per modality subset",
    "fusion.filler": "content fed to absent towers in batched mode",
    "train.task": "mortality, vasopressor or intubation",
    "train.epochs": "epochs per run",
    "train.batch_size": "windows per balanced batch",
    "train.lrs": "learning-rate sweep",
    "train.weight_decay": "decoupled weight decay",
    "train.seeds": "model seeds (one run per lr x seed)",
    "train.mma_image": "probability of hiding a present image during training",
    "train.mma_text": "probability of hiding a present text during training",
    "train.clip_norm": "global gradient-norm clip (0 disables)",
    "train.eval_seed": "seed of the fixed evaluation windows",
    "train.precision": "float32 or float64",
    "sweep.modality": "modality masked by sweep-missing: image, text or both",
    "sweep.fractions": "fractions of modality-bearing cases masked",
    "sweep.seed": "seed selecting the masked cases",
    "paths.data_dir": "cohort directory (gen-data output, train input)",
    "paths.out_dir": "run directory for checkpoints, logs and reports",
}


def _base_sections() -> dict:
    synth = SynthConfig().to_dict()
    synth.pop("seed")
    return {
        "synth": synth,
        "fusion": FusionConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "sweep": SweepSpec().to_dict(),
        "paths": {"data_dir": "data", "out_dir": "runs"},
    }


def preset_values(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}, not {name!r}")
    base = _base_sections()
    p = PRESETS[name]
    for sec in SECTIONS:
        base[sec].update(copy.deepcopy(p.get(sec, {})))
    return {"version": CONFIG_VERSION, "seed": p["seed"], "preset": name, **base}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in SECTIONS:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class RunConfig:
    version: int
    seed: int
    preset: str
    synth: SynthConfig
    fusion: FusionConfig
    train: TrainConfig
    sweep: SweepSpec
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        synth = self.synth.to_dict()
        synth.pop("seed")
        return {
            "version": self.version,
            "seed": self.seed,
            "preset": self.preset,
            "synth": synth,
            "fusion": self.fusion.to_dict(),
            "train": self.train.to_dict(),
            "sweep": self.sweep.to_dict(),
            "paths": dict(self.paths),
        }

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        # where outputs go does not change them
        d = self.to_dict()
        d.pop("paths")
        return fingerprint(d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def from_mapping(raw: dict, preset: str | None = None) -> RunConfig:
    """Overlay ``raw`` on its preset; raises ConfigError naming the offending key."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if "version" not in raw:
        raise ConfigError("missing required field: version")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {raw['version']!r}")
    name = preset or raw.get("preset", "desk")
    merged = preset_values(name)
    for key, val in raw.items():
        if key in ("version", "preset"):
            continue
        if key == "seed":
            merged["seed"] = int(val)
        elif key in SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"{key}: expected a mapping")
            unknown = set(val) - set(merged[key])
            if unknown:
                raise ConfigError(f"unknown key: {key}.{sorted(unknown)[0]}")
            merged[key].update(val)
        else:
            raise ConfigError(f"unknown key: {key}")
    try:
        synth = SynthConfig(seed=merged["seed"], **_tuples(merged["synth"], ("split_fractions", "text_len")))
        synth.validate()
        fusion = FusionConfig.from_dict(merged["fusion"])
        fusion.validate()
        train = TrainConfig.from_dict(merged["train"])
        train.validate()
        sweep = SweepSpec(**merged["sweep"])
        sweep.validate()
    except (TypeError, CohortError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if fusion.image_size != synth.image_size or fusion.vocab_size < synth.vocab_size:
        raise ConfigError("fusion.image_size/vocab_size must match synth.image_size/vocab_size")
    return RunConfig(CONFIG_VERSION, merged["seed"], name, synth, fusion, train, sweep, dict(merged["paths"]))


def _tuples(d: dict, keys) -> dict:
    return {k: (tuple(v) if k in keys else v) for k, v in d.items()}


def load_config(path, preset: str | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return from_mapping(raw or {}, preset)


def default_config(preset: str = "desk") -> RunConfig:
    return from_mapping({"version": CONFIG_VERSION}, preset)


def key_table() -> str:
    """Every config key with its full and desk value, for ``--help``."""
    full = flatten(preset_values("full"))
    desk = flatten(preset_values("desk"))
    width = max(len(k) for k in full)
    lines = [f"  {'key'.ljust(width)}  {'full':>14}  {'desk':>14}  description"]
    for key in full:
        pv, dv = json.dumps(full[key]), json.dumps(desk[key])
        lines.append(f"  {key.ljust(width)}  {pv[:14]:>14}  {dv[:14]:>14}  {DESCRIPTIONS.get(key, '')}")
    return "\n".join(lines)
