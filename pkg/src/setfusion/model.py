"""Skip-bottleneck multi-tower transformer with modality-aware attention heads.

One pre-norm transformer tower per modality. From layer ``fusion_layer``
onward each tower also processes a small shared set of bottleneck tokens;
after every such layer the towers' bottleneck outputs are averaged over the
modalities that are actually present (absent modalities are skipped, so their
filler input never leaks into the shared state).

The prediction head combines per-modality classifier logits:

* ``tsa``  - only the time-series tower carries a CLS token; its logit is used.
* ``aa``   - mean of the per-modality logits over present modalities.
* ``ctaa`` - softmax(w / tau) over present modalities weights the logits.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from . import autodiff as ad
from .cohort import N_FEATURE_TYPES
from .umse import MODALITIES, UMSE, Batch, Dense

MAA_VARIANTS = ("tsa", "aa", "ctaa")
HEAD_SUBSETS = {
    "ts": ("ts",),
    "ts+image": ("ts", "image"),
    "ts+text": ("ts", "text"),
    "ts+image+text": ("ts", "image", "text"),
}
FILLERS = ("zeros", "ones", "random")


class ConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    d: int = 32
    layers: int = 2
    heads: int = 4
    bottleneck: int = 4
    fusion_layer: int = 1
    maa: str = "tsa"
    tau: float = 0.2
    dropout: float = 0.1
    modalities: tuple = MODALITIES
    d_enc: int = 16
    text_len: int = 16
    vocab_size: int = 64
    image_size: int = 56
    n_feature_types: int = N_FEATURE_TYPES
    featurizer_seed: int = 0
    time_mode: str = "relative"
    umse_disabled: tuple = ()
    k_images: int = 1
    k_texts: int = 1
    multi_token: bool = False
    filler: str = "zeros"

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.umse_disabled = tuple(self.umse_disabled)

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("fusion.layers must be >= 1")
        if not 1 <= self.fusion_layer <= self.layers:
            raise ConfigError(f"fusion.fusion_layer={self.fusion_layer} outside [1, {self.layers}]")
        if self.bottleneck < 1:
            raise ConfigError("fusion.bottleneck must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"fusion.d={self.d} not divisible by heads={self.heads}")
        if self.maa not in MAA_VARIANTS:
            raise ConfigError(f"fusion.maa must be one of {MAA_VARIANTS}")
        if "ts" not in self.modalities or not set(self.modalities) <= set(MODALITIES):
            raise ConfigError(f"fusion.modalities must include ts and be drawn from {MODALITIES}")
        if not set(self.umse_disabled) <= set(MODALITIES):
            raise ConfigError(f"fusion.umse_disabled must be drawn from {MODALITIES}")
        if self.time_mode not in ("relative", "absolute"):
            raise ConfigError("fusion.time_mode must be relative or absolute")
        if self.filler not in FILLERS:
            raise ConfigError(f"fusion.filler must be one of {FILLERS}")
        if self.tau <= 0:
            raise ConfigError("fusion.tau must be > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("fusion.dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["umse_disabled"] = list(self.umse_disabled)
        return d

    @classmethod
    def from_dict(cls, d) -> "FusionConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown fusion keys: {sorted(unknown)}")
        return cls(**d)


def fingerprint(payload) -> str:
    """sha256 of the canonical (sorted-key, compact) JSON encoding."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# layers


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.shift = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return ad.layer_norm(x, self.gain, self.shift)


class Attention(nn.Module):
    """Multi-head self-attention; dropout is applied by the enclosing layer's residual branch."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        # a key bias only adds a per-query constant to the scores, which softmax
        # removes, so it would be a parameter with identically zero gradient
        self.q, self.k, self.v, self.o = Dense(d, d), Dense(d, d, bias=False), Dense(d, d), Dense(d, d)

    def forward(self, x, mask):
        n_batch, n, d = x.shape
        h = self.heads
        dh = d // h

        def split(t):
            return t.reshape(n_batch, n, h, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ad.matmul(q, k.transpose(-1, -2)) * (1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, mask[:, None, None, :])
        out = ad.matmul(attn, v).transpose(1, 2).reshape(n_batch, n, d)
        return self.o(out)


class EncoderLayer(nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then + FF(LN(.)) with a 4x GELU MLP."""

    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = LayerNorm(d)
        self.ff1 = Dense(d, 4 * d)
        self.ff2 = Dense(4 * d, d)
        self.dropout = dropout

    def forward(self, x, mask):
        h = x + F.dropout(self.attn(self.norm1(x), mask), self.dropout, self.training)
        ff = self.ff2(ad.gelu(self.ff1(self.norm2(h))))
        return h + F.dropout(ff, self.dropout, self.training)


def tower_layer_forward(layer: EncoderLayer, z, mask, z_fsn=None):
    """One encoder layer on ``[z || z_fsn]``; returns ``(z', z_fsn_hat)``.

    Without bottleneck tokens (layers before fusion starts) it is a plain
    encoder layer and the second element is ``None``.
    """
    if z_fsn is None:
        return layer(z, mask), None
    n = z.shape[1]
    b = z_fsn.shape[1]
    x = ad.concat([z, z_fsn], axis=1)
    m = torch.cat([mask, torch.ones(mask.shape[0], b, dtype=torch.bool)], dim=1)
    out = layer(x, m)
    return ad.slice_axis(out, 0, n, axis=1), ad.slice_axis(out, n, n + b, axis=1)


class Tower(nn.Module):
    def __init__(self, cfg: FusionConfig, with_cls: bool):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg.d, cfg.heads, cfg.dropout) for _ in range(cfg.layers))
        self.cls = nn.Parameter(torch.zeros(1, cfg.d)) if with_cls else None
        self.final_norm = LayerNorm(cfg.d) if with_cls else None


class Classifier(nn.Module):
    """Linear -> LayerNorm -> ReLU -> Linear on [CLS || static]."""

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.fc1 = Dense(d_in, d_hidden)
        self.norm = LayerNorm(d_hidden)
        self.fc2 = Dense(d_hidden, 1)

    def forward(self, x):
        return self.fc2(ad.relu(self.norm(self.fc1(x)))).squeeze(-1)


# ---------------------------------------------------------------------------
# fusion arithmetic


def skip_average(z_hat: dict, presence: dict):
    """Bottleneck update: mean of the per-modality outputs over present modalities.

    ``z_hat['ts']`` is always counted; ``image``/``text`` count where their
    presence flag (a bool tensor broadcastable over the batch) is True.
    Modalities missing from ``z_hat`` count as absent.
    """
    total = z_hat["ts"]
    count = torch.ones(total.shape[0], dtype=total.dtype)
    for m in ("image", "text"):
        if m in z_hat:
            p = presence[m]
            total = total + torch.where(p[:, None, None], z_hat[m], torch.zeros((), dtype=total.dtype))
            count = count + p.to(total.dtype)
    return total / count[:, None, None]


def maa_logit(logits: dict, presence: dict, variant: str, ctaa_logits=None, tau: float = 1.0):
    """Combine per-modality logits; returns ``(logit [N], weights [N, 3])``.

    Weights are the effective per-modality shares (ts, image, text) used for
    reporting. Absent modalities get weight 0 under every variant.
    """
    ref = logits["ts"]
    n = ref.shape[0]
    zero = torch.zeros((), dtype=ref.dtype)
    pres = torch.stack(
        [torch.ones(n, dtype=torch.bool)]
        + [presence[m] & torch.tensor(m in logits) for m in ("image", "text")],
        dim=1,
    )
    if variant == "tsa":
        w = torch.zeros(n, 3, dtype=ref.dtype)
        w[:, 0] = 1.0
        return ref, w
    vals = [ref] + [logits.get(m, torch.zeros(n, dtype=ref.dtype)) for m in ("image", "text")]
    if variant == "aa":
        total = vals[0] + torch.where(pres[:, 1], vals[1], zero) + torch.where(pres[:, 2], vals[2], zero)
        count = pres.to(ref.dtype).sum(dim=1)
        return total / count, pres.to(ref.dtype) / count[:, None]
    if variant == "ctaa":
        s = (ctaa_logits / tau).expand(n, 3)
        s_max = torch.where(pres, s, torch.tensor(float("-inf"), dtype=ref.dtype)).amax(dim=1, keepdim=True)
        e = torch.where(pres, torch.exp(s - s_max), zero)
        num = e[:, 0] * vals[0] + torch.where(pres[:, 1], e[:, 1] * vals[1], zero) + torch.where(pres[:, 2], e[:, 2] * vals[2], zero)
        den = e[:, 0] + e[:, 1] + e[:, 2]
        return num / den, e / den[:, None]
    raise ConfigError(f"unknown MAA variant {variant!r}")


def ctaa_weights(ctaa_logits, tau: float, present=(True, True, True)):
    """Softmax(w / tau) restricted to the present modalities."""
    w = torch.as_tensor(ctaa_logits, dtype=torch.float64)
    mask = torch.tensor(present, dtype=torch.bool)
    return ad.softmax(w / tau, mask)


# ---------------------------------------------------------------------------
# model


class FusionModel(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.umse = UMSE(
            d=cfg.d,
            d_enc=cfg.d_enc,
            image_size=cfg.image_size,
            vocab_size=cfg.vocab_size,
            text_len=cfg.text_len,
            featurizer_seed=cfg.featurizer_seed,
            n_feature_types=cfg.n_feature_types,
            time_mode=cfg.time_mode,
            disabled=cfg.umse_disabled,
        )
        self.towers = nn.ModuleDict(
            {m: Tower(cfg, with_cls=(m == "ts" or cfg.maa != "tsa")) for m in cfg.modalities}
        )
        self.fsn_init = nn.Parameter(torch.zeros(cfg.bottleneck, cfg.d))
        self.static = Dense(2, cfg.d)
        names = [h for h, sub in HEAD_SUBSETS.items() if set(sub) <= set(cfg.modalities)] if cfg.multi_token else ["main"]
        self.heads = nn.ModuleDict({h.replace("+", "_"): Classifier(2 * cfg.d, cfg.d) for h in names})
        self.ctaa_logits = nn.Parameter(torch.zeros(3)) if cfg.maa == "ctaa" else None

    # initialization ---------------------------------------------------------

    def init_catalog(self) -> dict:
        cat = {}
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("bias", "shift") or name == "ctaa_logits":
                kind = "zeros"
            elif leaf == "gain":
                kind = "ones"
            else:
                kind = "matrix"
            cat[name] = (tuple(p.shape), kind)
        return cat

    def reset_parameters(self, seed: int) -> "FusionModel":
        values = ad.seeded_init(self.init_catalog(), seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                p.copy_(torch.from_numpy(values[name]).to(p.dtype))
        return self

    # forward ----------------------------------------------------------------

    def _presence(self, batch: Batch) -> dict:
        n = len(batch)
        return {
            "ts": torch.ones(n, dtype=torch.bool),
            "image": batch.presence[:, 0] & ("image" in self.cfg.modalities),
            "text": batch.presence[:, 1] & ("text" in self.cfg.modalities),
        }

    def _filler(self, like):
        if self.cfg.filler == "zeros":
            return torch.zeros_like(like)
        if self.cfg.filler == "ones":
            return torch.ones_like(like)
        g = torch.Generator().manual_seed(0)
        return torch.randn(like.shape, generator=g, dtype=like.dtype)

    def encode(self, batch: Batch, presence: dict | None = None, reference: bool = False):
        """Run the towers; returns (CLS outputs per modality, presence, bottleneck state)."""
        cfg = self.cfg
        presence = presence or self._presence(batch)
        tokens = {m: v for m, v in self.umse.compose(batch).items() if m in cfg.modalities}
        n = len(batch)
        if reference:
            if n != 1:
                raise ValueError("reference semantics run one window at a time")
            active = [m for m in cfg.modalities if bool(presence[m][0])]
        else:
            active = list(cfg.modalities)

        x, masks = {}, {}
        for m in active:
            z, mask = tokens[m]
            if m != "ts" and not reference:
                p = presence[m]
                first = torch.zeros_like(mask)
                first[:, 0] = True
                z = torch.where(p[:, None, None], z, self._filler(z))
                mask = torch.where(p[:, None], mask, first)
            tower = self.towers[m]
            if tower.cls is not None:
                z = ad.concat([tower.cls.expand(n, 1, cfg.d), z], axis=1)
                mask = torch.cat([torch.ones(n, 1, dtype=torch.bool), mask], dim=1)
            x[m], masks[m] = z, mask

        z_fsn = None
        for li in range(cfg.layers):
            if li + 1 >= cfg.fusion_layer:
                if z_fsn is None:
                    z_fsn = self.fsn_init.expand(n, cfg.bottleneck, cfg.d)
                z_hat = {}
                for m in active:
                    x[m], z_hat[m] = tower_layer_forward(self.towers[m].layers[li], x[m], masks[m], z_fsn)
                z_fsn = skip_average(z_hat, presence)
            else:
                for m in active:
                    x[m], _ = tower_layer_forward(self.towers[m].layers[li], x[m], masks[m])

        cls = {m: self.towers[m].final_norm(x[m][:, 0]) for m in active if self.towers[m].cls is not None}
        return cls, presence, z_fsn

    def _logit(self, cls: dict, static_repr, presence: dict, head: str):
        clf = self.heads[head.replace("+", "_")]
        logits = {m: clf(ad.concat([c, static_repr], axis=1)) for m, c in cls.items()}
        return maa_logit(logits, presence, self.cfg.maa, self.ctaa_logits, self.cfg.tau)

    def head_for(self, presence: dict) -> list[str]:
        """Per-row head names (the head matching each window's present subset)."""
        if not self.cfg.multi_token:
            return ["main"] * len(presence["ts"])
        names = []
        for im, tx in zip(presence["image"].tolist(), presence["text"].tolist()):
            names.append("ts" + ("+image" if im else "") + ("+text" if tx else ""))
        return names

    def forward(self, batch: Batch, reference: bool = False, presence: dict | None = None, head: str | None = None):
        """Probabilities and diagnostics for a batch of windows.

        ``reference=True`` (one window) never executes absent towers. The
        batched path runs them on filler input and relies on the skip rules.
        """
        cls, presence, _ = self.encode(batch, presence, reference)
        static_repr = ad.relu(self.static(batch.static.to(self.fsn_init.dtype)))
        if head is not None or not self.cfg.multi_token:
            logit, weights = self._logit(cls, static_repr, presence, head or "main")
        else:
            rows = self.head_for(presence)
            logit = torch.zeros(len(batch), dtype=self.fsn_init.dtype)
            weights = torch.zeros(len(batch), 3, dtype=self.fsn_init.dtype)
            for name in sorted(set(rows)):
                sel = torch.tensor([r == name for r in rows])
                lg, w = self._logit(cls, static_repr, presence, name)
                logit = torch.where(sel, lg, logit)
                weights = torch.where(sel[:, None], w, weights)
        return {
            "prob": ad.sigmoid(logit),
            "logit": logit,
            "attention": weights,
            "presence": presence,
        }

    # persistence ------------------------------------------------------------

    def fingerprint(self, extra: dict | None = None) -> str:
        return fingerprint({"fusion": self.cfg.to_dict(), **(extra or {})})


def build_model(cfg: FusionConfig, seed: int, dtype=torch.float32) -> FusionModel:
    model = FusionModel(cfg).to(torch.float64)
    model.reset_parameters(seed)
    return model.to(dtype)


def save_model(model: FusionModel, path, meta: dict | None = None) -> str:
    """Write a checkpoint; returns the embedded fingerprint.

    ``meta`` must be JSON-serializable; its ``fingerprint_extra`` entry (seed,
    data fingerprint, ...) is folded into the fingerprint.
    """
    meta = dict(meta or {})
    extra = meta.get("fingerprint_extra", {})
    fp = model.fingerprint(extra)
    tensors = {}
    for name, p in model.named_parameters():
        tensors[name] = (p.detach().to(torch.float64).numpy(), True)
    for name, b in model.named_buffers():
        tensors[name] = (b.detach().to(torch.float64).numpy(), False)
    meta["fusion"] = model.cfg.to_dict()
    ad.save_checkpoint(path, tensors, fp, meta)
    return fp


def load_model(path, expect_fingerprint: str | None = None, dtype=torch.float32):
    """Rebuild a model from a checkpoint; returns ``(model, meta)``."""
    tensors, fp, meta = ad.load_checkpoint(path, expect_fingerprint)
    cfg = FusionConfig.from_dict(meta["fusion"])
    model = FusionModel(cfg).to(torch.float64)
    if model.fingerprint(meta.get("fingerprint_extra", {})) != fp:
        raise ad.CheckpointError(f"{path}: stored config does not reproduce the fingerprint")
    state = dict(model.named_parameters())
    state.update(dict(model.named_buffers()))
    if set(state) != set(tensors):
        raise ad.CheckpointError(f"{path}: parameter set mismatch")
    with torch.no_grad():
        for name, t in state.items():
            arr, _ = tensors[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise ad.CheckpointError(f"{path}: shape mismatch for {name}")
            t.copy_(torch.from_numpy(arr))
    return model.to(dtype), meta
