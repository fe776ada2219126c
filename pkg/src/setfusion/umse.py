"""Unified multi-modal set embedding.

Each observation becomes value + time + feature-type embedding. The time
embedder and the feature-type table are single instances shared by every
modality. Image and text values first pass through frozen, seed-derived
featurizers standing in for pretrained encoders (same output shapes: 49
tokens per image, ``text_len`` tokens per text), then a trainable
projection. No positional encoding is added anywhere, so token order carries
no information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .cohort import (
    IMAGE_FT,
    N_FEATURE_TYPES,
    TEXT_FT,
    NormalizationStats,
    PatientRecord,
    Window,
)

IMAGE_TOKENS = 49
MODALITIES = ("ts", "image", "text")


class Dense(nn.Module):
    """Affine map with the weight stored (in, out)."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_in, n_out))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class ImageFeaturizer(nn.Module):
    """Frozen 7x7 patch projection: (H, W) grid -> (49, d_enc)."""

    def __init__(self, image_size: int, d_enc: int, seed: int):
        super().__init__()
        if image_size % 7:
            raise ValueError("image_size must be a multiple of 7")
        self.image_size = image_size
        self.patch = image_size // 7
        p2 = self.patch * self.patch
        rng = np.random.default_rng([seed, 101])
        self.register_buffer("proj", torch.from_numpy(rng.normal(size=(p2, d_enc)) / np.sqrt(p2)))
        self.register_buffer("bias", torch.zeros(d_enc, dtype=torch.float64))

    @torch.no_grad()
    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        if pixels.shape[-2:] != (self.image_size, self.image_size):
            raise ad.ShapeError(
                f"image featurizer: expected {self.image_size}x{self.image_size} grid, got {tuple(pixels.shape[-2:])}"
            )
        lead = pixels.shape[:-2]
        p = self.patch
        x = pixels.to(self.proj.dtype).reshape(*lead, 7, p, 7, p)
        x = x.movedim(-3, -2).reshape(*lead, IMAGE_TOKENS, p * p)
        return x @ self.proj + self.bias


class TextTable(nn.Module):
    """Frozen token table; row 0 is the padding token."""

    def __init__(self, vocab_size: int, d_enc: int, seed: int):
        super().__init__()
        rng = np.random.default_rng([seed, 202])
        self.vocab_size = vocab_size
        self.register_buffer("table", torch.from_numpy(rng.normal(size=(vocab_size, d_enc))))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return ad.embedding(self.table, ids)


class UMSE(nn.Module):
    def __init__(
        self,
        d: int,
        d_enc: int,
        image_size: int,
        vocab_size: int,
        text_len: int,
        featurizer_seed: int,
        n_feature_types: int = N_FEATURE_TYPES,
        time_mode: str = "relative",
        disabled: tuple = (),
    ):
        super().__init__()
        if time_mode not in ("relative", "absolute"):
            raise ValueError(f"time_mode must be relative or absolute, not {time_mode!r}")
        self.d = d
        self.text_len = text_len
        self.time_mode = time_mode
        self.disabled = tuple(disabled)
        self.value_ts = Dense(1, d)
        self.time = Dense(1, d)
        self.feature_type = nn.Parameter(torch.zeros(n_feature_types, d))
        self.image_featurizer = ImageFeaturizer(image_size, d_enc, featurizer_seed)
        self.image_proj = Dense(d_enc, d)
        self.text_table = TextTable(vocab_size, d_enc, featurizer_seed)
        self.text_proj = Dense(d_enc, d)

    # single embedders -------------------------------------------------------

    def embed_time(self, t_occurrence, t_current, mode: str | None = None):
        mode = mode or self.time_mode
        # differences are taken in float64 before casting to the model dtype
        x = torch.as_tensor(t_occurrence, dtype=torch.float64)
        if mode == "relative":
            x = x - torch.as_tensor(t_current, dtype=torch.float64)
        return ad.tanh(self.time(x.to(self.time.weight.dtype).unsqueeze(-1)))

    def embed_feature_type(self, ids):
        return ad.embedding(self.feature_type, torch.as_tensor(ids, dtype=torch.long))

    def embed_value_ts(self, v):
        v = torch.as_tensor(v, dtype=self.value_ts.weight.dtype)
        return ad.tanh(self.value_ts(v.unsqueeze(-1)))

    def embed_value_image(self, pixels):
        feats = self.image_featurizer(torch.as_tensor(pixels))
        return self.image_proj(feats.to(self.image_proj.weight.dtype))

    def embed_value_text(self, tokens):
        """Token ids -> (text_len, d) rows plus a validity mask (False on padding)."""
        ids, mask = pad_tokens(tokens, self.text_len, self.text_table.vocab_size)
        ids = torch.from_numpy(ids)
        emb = self.text_proj(self.text_table(ids).to(self.text_proj.weight.dtype))
        return emb, torch.from_numpy(mask)

    # batch composition ------------------------------------------------------

    def _context(self, modality, times, ids, t_current):
        """Shared time + feature-type contribution, or zeros for ablated modalities."""
        if modality in self.disabled:
            return 0.0
        return self.embed_time(times, t_current.unsqueeze(-1)) + self.embed_feature_type(ids)

    def compose(self, batch: "Batch") -> dict:
        """Per-modality (tokens [N, n, d], valid-mask [N, n]) from a collated batch."""
        dt = self.value_ts.weight.dtype
        out = {}
        ts = self.embed_value_ts(batch.ts_value.to(dt))
        out["ts"] = (ts + self._context("ts", batch.ts_time, batch.ts_ft, batch.t_current), batch.ts_mask)
        if batch.img_feat is not None:
            img = self.image_proj(batch.img_feat.to(dt))
            ids = torch.full(batch.img_time.shape, IMAGE_FT, dtype=torch.long)
            out["image"] = (img + self._context("image", batch.img_time, ids, batch.t_current), batch.img_mask)
        if batch.txt_tok is not None:
            txt = self.text_proj(self.text_table(batch.txt_tok).to(dt))
            ids = torch.full(batch.txt_time.shape, TEXT_FT, dtype=torch.long)
            out["text"] = (txt + self._context("text", batch.txt_time, ids, batch.t_current), batch.txt_mask)
        return out


def pad_tokens(tokens, text_len: int, vocab_size: int):
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ad.ShapeError(f"text token id outside [0, {vocab_size})")
    kept = tokens[:text_len]
    ids = np.zeros(text_len, dtype=np.int64)
    ids[: len(kept)] = kept
    mask = np.zeros(text_len, dtype=bool)
    mask[: len(kept)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# window tensorization


@dataclass
class WindowInputs:
    ts_value: np.ndarray
    ts_time: np.ndarray
    ts_ft: np.ndarray
    img_feat: np.ndarray  # (k, 49, d_enc)
    img_time: np.ndarray  # (k,)
    txt_tok: np.ndarray  # (k, text_len)
    txt_mask: np.ndarray
    txt_time: np.ndarray
    t_current: float
    static: np.ndarray
    has_img: bool
    has_txt: bool
    label: dict


@dataclass
class Batch:
    ts_value: torch.Tensor
    ts_time: torch.Tensor
    ts_ft: torch.Tensor
    ts_mask: torch.Tensor
    img_feat: torch.Tensor | None
    img_time: torch.Tensor | None
    img_mask: torch.Tensor | None
    txt_tok: torch.Tensor | None
    txt_time: torch.Tensor | None
    txt_mask: torch.Tensor | None
    t_current: torch.Tensor
    static: torch.Tensor
    presence: torch.Tensor  # [N, 2] bool: (image, text)
    label: torch.Tensor

    def __len__(self):
        return int(self.t_current.shape[0])

    def with_presence(self, presence: torch.Tensor) -> "Batch":
        return Batch(**{**self.__dict__, "presence": presence})

    def shifted(self, delta: float) -> "Batch":
        """All times and t_current moved by ``delta`` hours."""
        d = dict(self.__dict__)
        for k in ("ts_time", "img_time", "txt_time", "t_current"):
            if d[k] is not None:
                d[k] = d[k] + delta
        return Batch(**d)

    def select(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(**{k: (None if v is None else v[idx]) for k, v in self.__dict__.items()})


class WindowSource:
    """Turns windows into model inputs for one (normalized) split.

    Image featurization is frozen, so features are computed once per image and
    cached.
    """

    def __init__(
        self,
        records,
        stats: NormalizationStats,
        featurizer: ImageFeaturizer,
        text_len: int,
        vocab_size: int,
        k_images: int = 1,
        k_texts: int = 1,
    ):
        self.records = {r.id: r for r in records}
        self.stats = stats
        self.text_len = text_len
        self.vocab_size = vocab_size
        self.k_images = k_images
        self.k_texts = k_texts
        self.d_enc = featurizer.proj.shape[1]
        self._img = {}
        for r in records:
            if r.images:
                px = torch.from_numpy(np.stack(r.images))
                self._img[r.id] = featurizer(px).numpy()

    def inputs(self, window: Window) -> WindowInputs:
        r: PatientRecord = self.records[window.patient_id]
        lo = np.searchsorted(r.ts_time, window.horizon_start, side="left")
        hi = np.searchsorted(r.ts_time, window.t_current, side="right")
        if window.presence.has_image:
            n = np.searchsorted(r.image_times, window.t_current, side="right")
            sel = np.arange(max(0, n - self.k_images), n)
            img_feat, img_time = self._img[r.id][sel], r.image_times[sel]
        else:
            img_feat, img_time = np.zeros((0, IMAGE_TOKENS, self.d_enc)), np.zeros(0)
        if window.presence.has_text:
            n = np.searchsorted(r.text_times, window.t_current, side="right")
            sel = range(max(0, n - self.k_texts), n)
            padded = [pad_tokens(r.texts[i], self.text_len, self.vocab_size) for i in sel]
            txt_tok = np.stack([p[0] for p in padded])
            txt_mask = np.stack([p[1] for p in padded])
            txt_mask[:, 0] |= ~txt_mask.any(axis=1)  # an empty text keeps one attendable row
            txt_time = r.text_times[list(sel)]
        else:
            txt_tok = np.zeros((0, self.text_len), dtype=np.int64)
            txt_mask = np.zeros((0, self.text_len), dtype=bool)
            txt_time = np.zeros(0)
        s = self.stats
        return WindowInputs(
            ts_value=r.ts_value[lo:hi],
            ts_time=r.ts_time[lo:hi],
            ts_ft=r.ts_feature[lo:hi],
            img_feat=img_feat,
            img_time=img_time,
            txt_tok=txt_tok,
            txt_mask=txt_mask,
            txt_time=txt_time,
            t_current=window.t_current,
            static=np.array([(r.static.age - s.age_min) / (s.age_max - s.age_min), float(r.static.gender)]),
            has_img=window.presence.has_image,
            has_txt=window.presence.has_text,
            label=window.label,
        )

    def batch(self, windows, task: str, dtype=torch.float32) -> Batch:
        return collate([self.inputs(w) for w in windows], task, dtype)


def collate(items: list[WindowInputs], task: str, dtype=torch.float32, with_image: bool = True, with_text: bool = True) -> Batch:
    """Pad a list of window inputs into one batch.

    Rows of an absent modality stay zero with a single valid row, which the
    model overwrites with filler content.
    """
    n = len(items)

    def pad(arrs, width, fill=0.0, dt=np.float64):
        out = np.full((n, width) + arrs[0].shape[1:], fill, dtype=dt)
        for i, a in enumerate(arrs):
            out[i, : len(a)] = a
        return out

    def valid(lengths, width):
        m = np.zeros((n, width), dtype=bool)
        for i, k in enumerate(lengths):
            m[i, : max(k, 1)] = True
        return m

    ts_len = [len(it.ts_value) for it in items]
    w = max(max(ts_len), 1)
    ts_value = pad([it.ts_value for it in items], w)
    ts_time = pad([it.ts_time for it in items], w)
    ts_ft = pad([it.ts_ft for it in items], w, 0, np.int64)
    ts_mask = np.zeros((n, w), dtype=bool)
    for i, k in enumerate(ts_len):
        ts_mask[i, :k] = True

    t_cur = np.array([it.t_current for it in items])
    img_feat = img_time = img_mask = None
    if with_image:
        feats = [it.img_feat.reshape(-1, it.img_feat.shape[-1]) for it in items]
        times = [np.repeat(it.img_time, IMAGE_TOKENS) for it in items]
        rows = [len(f) for f in feats]
        wi = max(max(rows), 1)
        img_feat = torch.from_numpy(pad(feats, wi)).to(dtype)
        img_time = torch.from_numpy(pad(times, wi))
        img_mask = torch.from_numpy(valid(rows, wi))
    txt_tok = txt_time = txt_mask = None
    if with_text:
        toks = [it.txt_tok.reshape(-1) for it in items]
        masks = [it.txt_mask.reshape(-1) for it in items]
        times = [np.repeat(it.txt_time, it.txt_tok.shape[1]) for it in items]
        rows = [len(t) for t in toks]
        wt = max(max(rows), 1)
        txt_tok = torch.from_numpy(pad(toks, wt, 0, np.int64))
        txt_time = torch.from_numpy(pad(times, wt))
        m = pad(masks, wt, False, bool)
        for i, k in enumerate(rows):
            if k == 0:
                m[i, 0] = True
        txt_mask = torch.from_numpy(m)

    return Batch(
        ts_value=torch.from_numpy(ts_value).to(dtype),
        ts_time=torch.from_numpy(ts_time),
        ts_ft=torch.from_numpy(ts_ft),
        ts_mask=torch.from_numpy(ts_mask),
        img_feat=img_feat,
        img_time=img_time,
        img_mask=img_mask,
        txt_tok=txt_tok,
        txt_time=txt_time,
        txt_mask=txt_mask,
        t_current=torch.from_numpy(t_cur),
        static=torch.from_numpy(np.stack([it.static for it in items])).to(dtype),
        presence=torch.tensor([[it.has_img, it.has_txt] for it in items], dtype=torch.bool).reshape(n, 2),
        label=torch.tensor([float(it.label[task]) for it in items], dtype=dtype),
    )
