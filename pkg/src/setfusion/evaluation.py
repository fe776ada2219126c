"""Evaluation protocols: fixed-window scoring, missing-modality sweeps,
fusion-layer search, embedding ablations and CTAA attention summaries."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .metrics import MetricReport, MetricRow, ScoredSet, score_windows
from .model import FusionConfig, FusionModel, fingerprint
from .train import Prepared, TrainConfig, best_per_seed, featurizer_key, train

ABLATION_ARMS = ("default", "no_ts_umse", "no_imgtxt_umse", "no_all_umse", "absolute_time")
SWEEP_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


class EvaluationError(ValueError):
    pass


def _check_compatible(model: FusionModel, data: Prepared) -> None:
    if featurizer_key(model.cfg) != data.featurizer_key:
        raise EvaluationError(
            f"model featurizer/input settings {featurizer_key(model.cfg)} do not match the prepared data {data.featurizer_key}"
        )


def evaluate(model: FusionModel, data: Prepared, split: str = "test", windows=None) -> ScoredSet:
    """Score the split's fixed inference windows (or ``windows``) once each."""
    _check_compatible(model, data)
    ws = data.eval_windows[split] if windows is None else windows
    scored = score_windows(model, data.sources[split], ws, data.task)
    scored.tags = {"split": split, "task": data.task}
    return scored


# ---------------------------------------------------------------------------
# missing-modality sweep


@dataclass
class SweepSpec:
    modality: str = "image"
    fractions: tuple = SWEEP_FRACTIONS
    seed: int = 0

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)

    def validate(self) -> None:
        if self.modality not in ("image", "text", "both"):
            raise EvaluationError("sweep.modality must be image, text or both")
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise EvaluationError("sweep.fractions must lie in [0, 1]")
        if list(self.fractions) != sorted(self.fractions):
            raise EvaluationError("sweep.fractions must be sorted ascending")

    def to_dict(self) -> dict:
        return {"modality": self.modality, "fractions": list(self.fractions), "seed": self.seed}


def _bears(window, modality: str) -> bool:
    p = window.presence
    if modality == "image":
        return p.has_image
    if modality == "text":
        return p.has_text
    return p.has_image or p.has_text


def sweep_masks(windows, spec: SweepSpec):
    """Yield ``(fraction, case_pct, masked windows)`` per fraction.

    Masked cases are a prefix of one seeded permutation of the
    modality-bearing cases, so each fraction's set contains the previous one.
    """
    spec.validate()
    bearing = [i for i, w in enumerate(windows) if _bears(w, spec.modality)]
    order = np.random.default_rng([spec.seed, 0x5157]).permutation(len(bearing))
    n_total = len(windows)
    img = spec.modality in ("image", "both")
    txt = spec.modality in ("text", "both")
    for f in spec.fractions:
        k = int(np.floor(f * len(bearing)))
        chosen = {bearing[j] for j in order[:k]}
        masked = [w.masked(image=img, text=txt) if i in chosen else w for i, w in enumerate(windows)]
        yield f, (100.0 * k / n_total if n_total else 0.0), masked


def missing_sweep(model: FusionModel, data: Prepared, spec: SweepSpec, split: str = "test") -> list[ScoredSet]:
    out = []
    for f, pct, ws in sweep_masks(data.eval_windows[split], spec):
        s = evaluate(model, data, split, ws)
        s.tags.update({"modality": spec.modality, "fraction": f, "case_pct": pct})
        out.append(s)
    return out


def sweep_report(models: dict, data: Prepared, spec: SweepSpec, fp: str, split: str = "test") -> MetricReport:
    """Sweep every seed's model and collect one report row per fraction."""
    rows = None
    for seed, model in sorted(models.items()):
        sets = missing_sweep(model, data, spec, split)
        if rows is None:
            rows = [
                MetricRow(
                    {"modality": s.tags["modality"], "fraction": s.tags["fraction"], "case_pct": s.tags["case_pct"]},
                    {"auprc": {}, "auroc": {}},
                )
                for s in sets
            ]
        for row, s in zip(rows, sets):
            for k, v in s.metrics().items():
                row.values[k][seed] = v
    return MetricReport("sweep", rows or [], sorted(models), fp)


# ---------------------------------------------------------------------------
# fusion-layer search


@dataclass
class FLSResult:
    report: MetricReport
    selected: int
    models: dict  # layer -> {seed: model}
    seconds: dict = dataclasses.field(default_factory=dict)  # layer -> wall-clock training time

    def val_auprc(self, layer: int) -> float:
        return next(r.mean("auprc") for r in self.report.rows if r.condition["fusion_layer"] == layer)


def fls_search(fcfg: FusionConfig, tcfg: TrainConfig, data: Prepared, layers=None, out_dir=None) -> FLSResult:
    """Train one model per fusion start layer (shared seeds); pick the best validation AUPRC.

    Ties go to the smaller layer.
    """
    layers = list(layers or range(1, fcfg.layers + 1))
    for layer in layers:
        if not 1 <= layer <= fcfg.layers:
            raise EvaluationError(f"fusion layer {layer} outside [1, {fcfg.layers}]")
    rows, models, seconds = [], {}, {}
    for layer in layers:
        cfg = dataclasses.replace(fcfg, fusion_layer=layer)
        sub = None if out_dir is None else f"{out_dir}/fusion_layer_{layer}"
        start = time.perf_counter()
        best = best_per_seed(train(cfg, tcfg, data, sub))
        seconds[layer] = time.perf_counter() - start
        models[layer] = {s: r.model for s, r in best.items()}
        vals = {"auprc": {}, "auroc": {}}
        for s, r in best.items():
            row = r.best_row
            vals["auprc"][s] = row["val_auprc"]
            vals["auroc"][s] = row["val_auroc"]
        rows.append(MetricRow({"fusion_layer": layer}, vals))
    means = [r.mean("auprc") for r in rows]
    selected = layers[int(np.argmax(means))]  # argmax returns the first maximum
    fp = fingerprint({"fusion": fcfg.to_dict(), "train": tcfg.to_dict(), "data": data.fingerprint, "layers": layers})
    return FLSResult(MetricReport("fls", rows, list(tcfg.seeds), fp), selected, models, seconds)


# ---------------------------------------------------------------------------
# ablations


def ablation_config(fcfg: FusionConfig, arm: str) -> FusionConfig:
    if arm == "default":
        return fcfg
    if arm == "no_ts_umse":
        return dataclasses.replace(fcfg, umse_disabled=("ts",))
    if arm == "no_imgtxt_umse":
        return dataclasses.replace(fcfg, umse_disabled=("image", "text"))
    if arm == "no_all_umse":
        return dataclasses.replace(fcfg, umse_disabled=("ts", "image", "text"))
    if arm == "absolute_time":
        return dataclasses.replace(fcfg, time_mode="absolute")
    raise EvaluationError(f"unknown ablation arm {arm!r}; expected one of {ABLATION_ARMS}")


def ablate(fcfg: FusionConfig, tcfg: TrainConfig, data: Prepared, arms, split: str = "test", out_dir=None):
    """Train and evaluate each arm under identical seeds; returns (report, {arm: {seed: model}})."""
    rows, models = [], {}
    for arm in arms:
        cfg = ablation_config(fcfg, arm)
        sub = None if out_dir is None else f"{out_dir}/{arm}"
        best = best_per_seed(train(cfg, tcfg, data, sub))
        models[arm] = {s: r.model for s, r in best.items()}
        vals = {"auprc": {}, "auroc": {}}
        for s, r in best.items():
            for k, v in evaluate(r.model, data, split).metrics().items():
                vals[k][s] = v
        rows.append(MetricRow({"arm": arm}, vals))
    fp = fingerprint({"fusion": fcfg.to_dict(), "train": tcfg.to_dict(), "data": data.fingerprint, "arms": list(arms)})
    return MetricReport("ablation", rows, list(tcfg.seeds), fp), models


# ---------------------------------------------------------------------------
# attention


def presence_pattern(has_image: bool, has_text: bool) -> str:
    return "ts" + ("+image" if has_image else "") + ("+text" if has_text else "")


def attention_report(model: FusionModel, data: Prepared, split: str = "test") -> dict:
    """Mean CTAA weights (ts, image, text) per presence pattern, with window counts."""
    if model.cfg.maa != "ctaa":
        raise EvaluationError("attention_report needs a CTAA model")
    s = evaluate(model, data, split)
    out = {}
    for im in (False, True):
        for tx in (False, True):
            sel = (s.presence[:, 0] == im) & (s.presence[:, 1] == tx)
            if sel.any():
                w = s.attention[sel].mean(axis=0)
                out[presence_pattern(im, tx)] = {"n": int(sel.sum()), "ts": float(w[0]), "image": float(w[1]), "text": float(w[2])}
    return out
