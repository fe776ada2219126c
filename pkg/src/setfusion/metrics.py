"""Ranking metrics, window scoring and CSV metric reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .cohort import Window
from .umse import collate


class MetricError(ValueError):
    pass


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise MetricError(f"{len(scores)} scores vs {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return scores, labels


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with tied scores evaluated as one threshold."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of every tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    tags: dict = field(default_factory=dict)
    attention: np.ndarray | None = None
    presence: np.ndarray | None = None

    def metrics(self) -> dict:
        return {"auprc": auprc(self.scores, self.labels), "auroc": auroc(self.scores, self.labels)}


@torch.no_grad()
def score_windows(model, source, windows: list[Window], task: str, batch_size: int = 256) -> ScoredSet:
    """Score windows once each in eval mode (dropout off).

    Windows are batched in order of time-series length to keep padding small;
    results come back in the original order.
    """
    was_training = model.training
    model.eval()
    dtype = model.fsn_init.dtype
    labels = np.array([w.label[task] for w in windows], dtype=np.int64)
    n = len(windows)
    probs, attn, pres = np.zeros(n), np.zeros((n, 3)), np.zeros((n, 2), dtype=bool)
    items = [source.inputs(w) for w in windows]
    order = np.argsort([len(it.ts_value) for it in items], kind="stable")
    try:
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            batch = collate([items[j] for j in idx], task, dtype)
            out = model(batch)
            probs[idx] = out["prob"].detach().to(torch.float64).numpy()
            attn[idx] = out["attention"].detach().to(torch.float64).numpy()
            pres[idx] = batch.presence.numpy()
    finally:
        model.train(was_training)
    return ScoredSet(probs, labels, attention=attn, presence=pres)


# ---------------------------------------------------------------------------
# reports

METRICS = ("auprc", "auroc")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class MetricRow:
    condition: dict
    values: dict  # metric -> {seed: value}

    def mean(self, metric: str) -> float:
        vals = list(self.values[metric].values())
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class MetricReport:
    """One row per condition; per-seed values plus their mean for each metric.

    CSV columns: the condition keys (in row order), then for each metric
    ``<metric>_mean`` and ``<metric>_seed<k>``, then ``fingerprint``.
    """

    kind: str
    rows: list
    seeds: list
    fingerprint: str

    def condition_keys(self) -> list:
        keys = []
        for r in self.rows:
            keys.extend(k for k in r.condition if k not in keys)
        return keys

    def header(self) -> list:
        cols = ["report"] + self.condition_keys()
        for m in METRICS:
            cols.append(f"{m}_mean")
            cols.extend(f"{m}_seed{s}" for s in self.seeds)
        return cols + ["fingerprint"]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        keys = self.condition_keys()
        for r in self.rows:
            line = [self.kind] + [_fmt(r.condition.get(k, "")) for k in keys]
            for m in METRICS:
                line.append(_fmt(r.mean(m)))
                line.extend(_fmt(r.values[m].get(s, float("nan"))) for s in self.seeds)
            w.writerow(line + [self.fingerprint])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise MetricError(f"{path}: empty report")
        header = list(rows[0].keys())
        seeds = [int(c.split("_seed")[1]) for c in header if c.startswith(f"{METRICS[0]}_seed")]
        metric_cols = {f"{m}_mean" for m in METRICS} | {f"{m}_seed{s}" for m in METRICS for s in seeds}
        cond_keys = [c for c in header if c not in metric_cols and c not in ("report", "fingerprint")]
        out = []
        for r in rows:
            out.append(
                MetricRow(
                    {k: r[k] for k in cond_keys},
                    {m: {s: float(r[f"{m}_seed{s}"]) for s in seeds} for m in METRICS},
                )
            )
        return cls(rows[0]["report"], out, seeds, rows[0]["fingerprint"])

    def column(self, key: str) -> list:
        return [r.condition[key] for r in self.rows]

    def means(self, metric: str) -> list:
        return [r.mean(metric) for r in self.rows]
