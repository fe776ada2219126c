"""Training: BCE, AdamW, missing-modality augmentation, multi-token loss, sweeps."""

from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .cohort import (
    TASKS,
    NormalizationStats,
    PatientRecord,
    Window,
    apply_normalization,
    balanced_batches,
    extract_inference_windows,
    extract_training_window,
    fit_normalization,
)
from .metrics import MetricError, auprc, auroc, score_windows
from .model import HEAD_SUBSETS, ConfigError, FusionConfig, FusionModel, build_model, ctaa_weights, fingerprint, save_model
from .umse import ImageFeaturizer, WindowSource

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
LOG_COLUMNS = (
    "run_id",
    "lr",
    "seed",
    "epoch",
    "train_loss",
    "val_auprc",
    "val_auroc",
    "attn_ts",
    "attn_img",
    "attn_txt",
)


@dataclass
class TrainConfig:
    task: str = "mortality"
    epochs: int = 50
    batch_size: int = 32
    lrs: tuple = (1e-6, 3e-6, 1e-5, 3e-5, 1e-4)
    weight_decay: float = 0.01
    seeds: tuple = (0, 1, 2)
    mma_image: float = 0.3
    mma_text: float = 0.3
    clip_norm: float = 1.0
    eval_seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.lrs = tuple(float(x) for x in self.lrs)
        self.seeds = tuple(int(s) for s in self.seeds)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"train.task must be one of {TASKS}")
        if not self.lrs:
            raise ConfigError("train.lrs must be non-empty")
        if not self.seeds:
            raise ConfigError("train.seeds must be non-empty")
        for name in ("mma_image", "mma_text"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"train.{name}={v} outside [0, 1]")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lrs"] = list(self.lrs)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and optimizer


def bce_loss(prob, label):
    """Mean binary cross-entropy with probabilities clamped away from 0 and 1."""
    if prob.numel() == 0:
        raise ValueError("bce_loss on an empty batch")
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = label.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def optimizer_step(params, grads, state: dict, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps=1e-8):
    """AdamW update in place.

    ``params``/``grads`` map name -> tensor; ``state`` holds ``step`` and the
    per-parameter moments ``m``/``v``. Weight decay shrinks the weights
    directly (``p -= lr * wd * p``) rather than entering the gradient.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise ad.NumericFault(f"optimizer: non-finite gradient in {name}; step aborted")
    b1, b2 = betas
    state["step"] = t = state.get("step", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = m_all.setdefault(name, torch.zeros_like(p))
            v = v_all.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state


def trainable(model: FusionModel) -> dict:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def clip_gradients(params: dict, max_norm: float | None) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# augmentation and multi-token loss


def mma_augment(windows: list[Window], p_img: float, p_txt: float, rng: np.random.Generator) -> list[Window]:
    """Independently hide image (prob ``p_img``) and text (prob ``p_txt``) per window.

    Two uniforms are drawn for every window regardless of presence, so the
    random stream does not depend on the data.
    """
    u = rng.random((len(windows), 2))
    return [w.masked(image=bool(a < p_img), text=bool(b < p_txt)) for w, (a, b) in zip(windows, u)]


def _subset_presence(presence: dict, subset) -> dict:
    return {
        "ts": presence["ts"],
        "image": presence["image"] & ("image" in subset),
        "text": presence["text"] & ("text" in subset),
    }


def multi_token_loss(model: FusionModel, batch):
    """Per window: mean BCE over the heads whose modality subset it contains."""
    base = model._presence(batch)
    dtype = model.fsn_init.dtype
    total = torch.zeros(len(batch), dtype=dtype)
    count = torch.zeros(len(batch), dtype=dtype)
    for head, subset in HEAD_SUBSETS.items():
        if not set(subset) <= set(model.cfg.modalities):
            continue
        applies = torch.ones(len(batch), dtype=torch.bool)
        for m in ("image", "text"):
            if m in subset:
                applies &= base[m]
        if not bool(applies.any()):
            continue
        out = model(batch, presence=_subset_presence(base, subset), head=head)
        p = out["prob"].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = batch.label.to(dtype)
        per = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
        total = total + torch.where(applies, per, torch.zeros((), dtype=dtype))
        count = count + applies.to(dtype)
    return (total / count).mean()


def batch_loss(model: FusionModel, batch):
    if model.cfg.multi_token:
        return multi_token_loss(model, batch)
    return bce_loss(model(batch)["prob"], batch.label)


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class Prepared:
    """Normalized splits, window sources and the fixed evaluation windows for one task."""

    task: str
    stats: NormalizationStats
    train: list
    sources: dict
    eval_windows: dict
    featurizer_key: tuple
    fingerprint: str


def featurizer_key(cfg: FusionConfig) -> tuple:
    return (cfg.image_size, cfg.d_enc, cfg.featurizer_seed, cfg.text_len, cfg.vocab_size, cfg.k_images, cfg.k_texts)


def prepare(splits: dict, fcfg: FusionConfig, task: str, eval_seed: int = 0) -> Prepared:
    stats = fit_normalization(splits["train"])
    featurizer = ImageFeaturizer(fcfg.image_size, fcfg.d_enc, fcfg.featurizer_seed)
    sources, windows, normed = {}, {}, {}
    for name in ("train", "val", "test"):
        records = [apply_normalization(r, stats) for r in splits.get(name, [])]
        normed[name] = records
        sources[name] = WindowSource(
            records, stats, featurizer, fcfg.text_len, fcfg.vocab_size, fcfg.k_images, fcfg.k_texts
        )
        windows[name] = [w for r in records for w in extract_inference_windows(r, eval_seed, task)]
    fp = fingerprint(
        {
            "task": task,
            "eval_seed": eval_seed,
            "stats": stats.to_dict(),
            "ids": {k: [r.id for r in v] for k, v in normed.items()},
            "featurizer": list(featurizer_key(fcfg)),
        }
    )
    return Prepared(task, stats, normed["train"], sources, windows, featurizer_key(fcfg), fp)


def epoch_pool(records: list[PatientRecord], rng: np.random.Generator, task: str) -> list[Window]:
    """One random window per patient plus one pre-onset window per positive patient."""
    pool = []
    for r in records:
        w = extract_training_window(r, rng, task)
        if w is not None:
            pool.append(w)
        if r.onsets[task] is not None:
            w = extract_training_window(r, rng, task, want_label=1)
            if w is not None:
                pool.append(w)
    return pool


# ---------------------------------------------------------------------------
# training runs


@dataclass
class RunResult:
    run_id: str
    lr: float
    seed: int
    log: list
    best_epoch: int
    best_auprc: float
    model: FusionModel | None
    diverged: bool = False

    @property
    def best_row(self) -> dict | None:
        return next((r for r in self.log if r["epoch"] == self.best_epoch), None)


def run_id(lr: float, seed: int) -> str:
    return f"lr{lr:g}_s{seed}"


def _epoch_seed(seed: int, epoch: int) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, int(epoch), 0x5EED]


def _validation(model, data: Prepared, task: str):
    ws = data.eval_windows["val"]
    scored = score_windows(model, data.sources["val"], ws, task)
    try:
        return auprc(scored.scores, scored.labels), auroc(scored.scores, scored.labels)
    except MetricError:
        return float("nan"), float("nan")


def _attn_columns(model: FusionModel) -> tuple:
    if model.ctaa_logits is None:
        return ("", "", "")
    w = ctaa_weights(model.ctaa_logits.detach(), model.cfg.tau)
    return tuple(float(x) for x in w)


def _state_tensors(model, opt_state, best_state):
    out = {}
    for n, p in model.named_parameters():
        out[f"param/{n}"] = (p.detach().double().numpy(), True)
    for n, t in opt_state.get("m", {}).items():
        out[f"adam_m/{n}"] = (t.double().numpy(), False)
    for n, t in opt_state.get("v", {}).items():
        out[f"adam_v/{n}"] = (t.double().numpy(), False)
    for n, t in (best_state or {}).items():
        out[f"best/{n}"] = (t.double().numpy(), False)
    return out


def save_train_state(path, model, opt_state, best_state, meta: dict) -> None:
    tmp = f"{path}.tmp"
    ad.save_checkpoint(tmp, _state_tensors(model, opt_state, best_state), meta["fingerprint"], meta)
    os.replace(tmp, path)


def load_train_state(path, model, expect_fingerprint: str):
    tensors, _, meta = ad.load_checkpoint(path, expect_fingerprint)
    dtype = model.fsn_init.dtype
    params = dict(model.named_parameters())
    opt_state = {"step": meta["step"], "m": {}, "v": {}}
    best = {}
    with torch.no_grad():
        for key, (arr, _) in tensors.items():
            kind, name = key.split("/", 1)
            t = torch.from_numpy(arr).to(dtype)
            if kind == "param":
                params[name].copy_(t)
            elif kind == "adam_m":
                opt_state["m"][name] = t
            elif kind == "adam_v":
                opt_state["v"][name] = t
            else:
                best[name] = t
    return opt_state, best or None, meta


def train_run(
    fcfg: FusionConfig,
    tcfg: TrainConfig,
    data: Prepared,
    lr: float,
    seed: int,
    state_path=None,
    stop_after: int | None = None,
) -> RunResult:
    """Train one (lr, seed) point; keep the snapshot with the best validation AUPRC.

    Every epoch reseeds numpy and torch from (seed, epoch), so a run restored
    from ``state_path`` continues exactly as the uninterrupted run would.
    ``stop_after`` ends the run after that many epochs (simulated interrupt).
    """
    task = tcfg.task
    dtype = tcfg.dtype
    rid = run_id(lr, seed)
    fp = fingerprint({"fusion": fcfg.to_dict(), "train": tcfg.to_dict(), "data": data.fingerprint, "lr": lr, "seed": seed})
    model = build_model(fcfg, seed, dtype)
    params = trainable(model)
    opt_state: dict = {"step": 0}
    rows: list = []
    best_state, best_epoch, best_auprc = None, -1, float("-inf")
    start = 0
    if state_path is not None and Path(state_path).exists():
        opt_state, best_state, meta = load_train_state(state_path, model, fp)
        rows, start = meta["log"], meta["epoch"]
        best_epoch, best_auprc = meta["best_epoch"], meta["best_auprc"]

    for epoch in range(start, tcfg.epochs):
        rng = np.random.default_rng(_epoch_seed(seed, epoch))
        torch.manual_seed(int(rng.integers(2**62)))
        model.train()
        losses = []
        try:
            pool = epoch_pool(data.train, rng, task)
            for wins in balanced_batches(pool, tcfg.batch_size, rng, task):
                wins = mma_augment(wins, tcfg.mma_image, tcfg.mma_text, rng)
                batch = data.sources["train"].batch(wins, task, dtype)
                loss = batch_loss(model, batch)
                ad.reset_gradients(params.values())
                ad.backward(loss, params.values())
                clip_gradients(params, tcfg.clip_norm)
                optimizer_step(params, {n: p.grad for n, p in params.items()}, opt_state, lr, tcfg.weight_decay)
                losses.append(float(loss.detach()))
        except ad.NumericFault as exc:
            log.warning("run %s diverged at epoch %d: %s", rid, epoch + 1, exc)
            rows.append(_row(rid, lr, seed, epoch + 1, float("nan"), float("nan"), float("nan"), ("", "", "")))
            return RunResult(rid, lr, seed, rows, best_epoch, best_auprc, _restore(model, best_state), True)

        val_auprc, val_auroc = _validation(model, data, task)
        rows.append(_row(rid, lr, seed, epoch + 1, float(np.mean(losses)), val_auprc, val_auroc, _attn_columns(model)))
        if val_auprc > best_auprc:
            best_auprc, best_epoch = val_auprc, epoch + 1
            best_state = {n: t.detach().clone() for n, t in model.state_dict().items()}
        log.info("%s epoch %d loss %.4f val auprc %.4f", rid, epoch + 1, rows[-1]["train_loss"], val_auprc)
        if state_path is not None:
            meta = {
                "fingerprint": fp,
                "epoch": epoch + 1,
                "step": opt_state["step"],
                "log": rows,
                "best_epoch": best_epoch,
                "best_auprc": best_auprc,
            }
            save_train_state(state_path, model, opt_state, best_state, meta)
        if stop_after is not None and epoch + 1 >= stop_after and epoch + 1 < tcfg.epochs:
            return RunResult(rid, lr, seed, rows, best_epoch, best_auprc, None)

    return RunResult(rid, lr, seed, rows, best_epoch, best_auprc, _restore(model, best_state))


def _row(rid, lr, seed, epoch, loss, val_auprc, val_auroc, attn) -> dict:
    return dict(zip(LOG_COLUMNS, (rid, lr, seed, epoch, loss, val_auprc, val_auroc, *attn)))


def _restore(model: FusionModel, best_state) -> FusionModel:
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def train(fcfg: FusionConfig, tcfg: TrainConfig, data: Prepared, out_dir=None) -> list[RunResult]:
    """Sweep every (lr, seed); returns one result per run.

    With ``out_dir``, rewrites ``train_log.csv`` after every run, saves the
    best snapshot as ``<run_id>.ckpt`` and keeps a resumable ``<run_id>.state``
    per run (a finished state is reloaded instead of retrained).
    """
    fcfg.validate()
    tcfg.validate()
    results = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for lr in tcfg.lrs:
        for seed in tcfg.seeds:
            state = out / f"{run_id(lr, seed)}.state" if out is not None else None
            res = train_run(fcfg, tcfg, data, lr, seed, state_path=state)
            results.append(res)
            if out is not None:
                write_log(out / "train_log.csv", [row for r in results for row in r.log])
                if res.model is not None and res.best_epoch > 0:
                    save_model(
                        res.model,
                        out / f"{res.run_id}.ckpt",
                        {
                            "fingerprint_extra": {"data": data.fingerprint, "seed": seed, "lr": lr},
                            "task": tcfg.task,
                            "best_epoch": res.best_epoch,
                            "best_val_auprc": res.best_auprc,
                        },
                    )
    return results


def write_log(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def best_per_seed(results: list[RunResult]) -> dict:
    """For each seed, the run whose best validation AUPRC is highest (ties -> first lr)."""
    best = {}
    for r in results:
        if r.model is None:
            continue
        if r.seed not in best or r.best_auprc > best[r.seed].best_auprc:
            best[r.seed] = r
    return best


def fit_windows(model: FusionModel, source, windows, task: str, steps: int, lr: float, clip_norm=None, tol=None):
    """Full-batch training on a fixed window set; returns the loss trace.

    Stops early once the loss falls below ``tol``.
    """
    params = trainable(model)
    state: dict = {"step": 0}
    batch = source.batch(windows, task, model.fsn_init.dtype)
    trace = []
    model.train()
    for _ in range(steps):
        loss = batch_loss(model, batch)
        trace.append(float(loss.detach()))
        if tol is not None and trace[-1] < tol:
            break
        ad.reset_gradients(params.values())
        ad.backward(loss, params.values())
        clip_gradients(params, clip_norm)
        optimizer_step(params, {n: p.grad for n, p in params.items()}, state, lr, 0.0)
    return trace


def clone_model(model: FusionModel) -> FusionModel:
    return copy.deepcopy(model)
