"""Differentiable dense-array primitives on top of torch autograd.

Every model module in the package builds its forward pass from the
functions defined here. Shapes are validated eagerly and outputs are checked
for NaN/Inf (fail fast), so a numeric fault is reported at the primitive that
produced it rather than several layers later.

Softmax and layer normalization carry hand-written backward rules; the rest
delegate to torch. ``finite_difference_check`` is an independent central
difference oracle used to verify all of them.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F


class NumericFault(FloatingPointError):
    """A primitive produced (or a loss/gradient contained) NaN or Inf."""


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


_FINITE_CHECKS = True


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily toggle per-primitive NaN/Inf checks."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _finite(out: torch.Tensor, kind: str) -> torch.Tensor:
    # a sum is finite whenever every element is (bar overflow, which the
    # exact check below sorts out), and is much cheaper than an elementwise test
    if _FINITE_CHECKS and not bool(torch.isfinite(out.detach().sum())) and not bool(torch.isfinite(out).all()):
        raise NumericFault(f"{kind}: non-finite output")
    return out


def _shape_fail(kind, msg, *tensors):
    dims = ", ".join(str(tuple(t.shape)) for t in tensors)
    raise ShapeError(f"{kind}: {msg} (got {dims})")


# ---------------------------------------------------------------------------
# explicit backward rules


class _MaskedSoftmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mask):
        if mask is not None:
            x = x.masked_fill(~mask, float("-inf"))
        # max-shifted exponentials, computed by the fused kernel
        y = torch.softmax(x, dim=-1)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved_tensors
        gx = y * (g - (g * y).sum(dim=-1, keepdim=True))
        return gx, None


class _LayerNorm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, gain, shift, eps):
        mu = x.mean(dim=-1, keepdim=True)
        xc = x - mu
        var = (xc * xc).mean(dim=-1, keepdim=True)
        # eps is a floor, not an offset: rows with var > eps normalize exactly
        live = var > eps
        inv = 1.0 / torch.sqrt(torch.where(live, var, torch.full_like(var, eps)))
        xhat = xc * inv
        ctx.save_for_backward(xhat, inv, gain, live)
        return xhat * gain + shift

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gain, live = ctx.saved_tensors
        lead = tuple(range(g.dim() - 1))
        d_gain = (g * xhat).sum(dim=lead)
        d_shift = g.sum(dim=lead)
        dxhat = g * gain
        # floored rows have a constant scale, so the variance path drops out
        var_term = torch.where(live, xhat * (dxhat * xhat).mean(dim=-1, keepdim=True), torch.zeros_like(xhat))
        dx = inv * (dxhat - dxhat.mean(dim=-1, keepdim=True) - var_term)
        return dx, d_gain, d_shift, None


# ---------------------------------------------------------------------------
# primitives

LAYER_NORM_EPS = 1e-12


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        _shape_fail("matmul", "inner dimensions differ", a, b)
    return _finite(torch.matmul(a, b), "matmul")


def add(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _shape_fail("add", "shapes do not broadcast", a, b)
    return _finite(a + b, "add")


def mul(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _shape_fail("mul", "shapes do not broadcast", a, b)
    return _finite(a * b, "mul")


def linear(x, weight, bias=None):
    """x @ weight + bias, with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        _shape_fail("linear", f"last dim must equal {weight.shape[0]}", x, weight)
    out = torch.matmul(x, weight)
    if bias is not None:
        out = out + bias
    return _finite(out, "linear")


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != axis % ref.dim()
        ):
            _shape_fail("concat", f"non-concat dims differ (axis={axis})", *tensors)
    return torch.cat(tensors, dim=axis)


def slice_axis(x, start: int, stop: int, axis: int = 0):
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        _shape_fail("slice", f"range [{start}, {stop}) outside axis of length {n}", x)
    return x.narrow(axis, start, stop - start)


def relu(x):
    return _finite(torch.relu(x), "relu")


def tanh(x):
    return _finite(torch.tanh(x), "tanh")


def sigmoid(x):
    return _finite(torch.sigmoid(x), "sigmoid")


def gelu(x):
    return _finite(F.gelu(x), "gelu")


def softmax(x, mask=None):
    """Softmax over the last axis; entries where ``mask`` is False get weight 0.

    Every row must keep at least one unmasked entry.
    """
    if mask is not None:
        try:
            mask = torch.broadcast_to(mask, x.shape)
        except RuntimeError:
            _shape_fail("softmax", "mask does not broadcast", x, mask)
    return _finite(_MaskedSoftmax.apply(x, mask), "softmax")


def layer_norm(x, gain, shift, eps: float = LAYER_NORM_EPS):
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        _shape_fail("layer_norm", f"gain/shift must be ({d},)", x, gain, shift)
    return _finite(_LayerNorm.apply(x, gain, shift, eps), "layer_norm")


def embedding(table, ids):
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(
            f"embedding: id outside [0, {table.shape[0]}) (min={int(ids.min())}, max={int(ids.max())})"
        )
    return table[ids]


def mean(x, axis: int = -1, keepdim: bool = False):
    return _finite(x.mean(dim=axis, keepdim=keepdim), "mean")


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "linear": linear,
    "concat": concat,
    "slice": slice_axis,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "embedding": embedding,
    "mean": mean,
}


def apply_primitive(kind: str, inputs: list, attrs: Mapping | None = None):
    """Dispatch a primitive by name: ``apply_primitive("softmax", [x], {"mask": m})``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    attrs = dict(attrs or {})
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradients


def reset_gradients(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.requires_grad:
            p.grad = torch.zeros_like(p)


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad``.

    Gradients add up across calls until :func:`reset_gradients`.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise RuntimeError("backward called without a recorded graph")
    if not bool(torch.isfinite(loss)):
        raise NumericFault(f"loss is non-finite ({float(loss)})")
    loss.reshape(()).backward()
    if params is not None:
        for p in params:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise NumericFault("non-finite gradient")


@dataclass
class FDEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FDReport:
    tol_rel: float
    entries: list[FDEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.rel_err <= self.tol_rel for e in self.entries)

    def failures(self) -> list[FDEntry]:
        return [e for e in self.entries if e.rel_err > self.tol_rel]


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    sample_count: int = 50,
    h: float = 1e-6,
    tol_rel: float = 1e-6,
    seed: int = 0,
) -> FDReport:
    """Compare autograd gradients with central differences at random coordinates.

    ``loss_fn`` must rebuild the loss from the current parameter values on
    every call (no caching). Coordinates are drawn uniformly over the flattened
    concatenation of ``params``; error is
    ``|a - c| / max(|a|, |c|, 1e-12)``.
    """
    names = [n for n, p in params.items() if p.requires_grad]
    if not names:
        raise ValueError("no trainable parameters to probe")
    for n in names:
        if params[n].dtype != torch.float64:
            raise TypeError(f"finite differences need float64 ({n} is {params[n].dtype})")

    for n in names:
        params[n].grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {
        n: (params[n].grad.detach().clone() if params[n].grad is not None else torch.zeros_like(params[n]))
        for n in names
    }

    sizes = np.array([params[n].numel() for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat_ids = rng.integers(0, offsets[-1], size=sample_count)

    report = FDReport(tol_rel=tol_rel)
    with torch.no_grad():
        for flat in flat_ids:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name = names[k]
            p = params[name]
            local = int(flat - offsets[k])
            view = p.view(-1)
            orig = float(view[local])
            view[local] = orig + h
            up = loss_fn()
            view[local] = orig - h
            down = loss_fn()
            view[local] = orig
            if not (math.isfinite(float(up)) and math.isfinite(float(down))):
                raise NumericFault(f"non-finite loss while probing {name}")
            num = (float(up) - float(down)) / (2.0 * h)
            ana = float(analytic[name].view(-1)[local])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            idx = tuple(int(i) for i in np.unravel_index(local, tuple(p.shape))) if p.dim() else ()
            report.entries.append(FDEntry(name, idx, ana, num, rel))
    for n in names:
        params[n].grad = None
    return report


# ---------------------------------------------------------------------------
# initialization

INIT_KINDS = ("matrix", "zeros", "ones")


def _param_seed(seed: int, name: str) -> list[int]:
    return [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, zlib.crc32(name.encode())]


def seeded_init(catalog: Mapping[str, tuple[tuple[int, ...], str]], seed: int) -> dict[str, np.ndarray]:
    """Deterministic float64 initial values for a parameter catalog.

    ``catalog`` maps parameter id to ``(shape, kind)``. Each id gets its own
    stream derived from ``(seed, id)``, so adding a parameter never shifts the
    values of the others.

    * ``matrix``: uniform in +-sqrt(6 / (fan_in + fan_out)), where fan_in and
      fan_out are the first and last dimensions (a 1-D vector uses (1, n)).
    * ``zeros`` / ``ones``: constants (biases and shifts / layer-norm gains).
    """
    out = {}
    for name in sorted(catalog):
        shape, kind = catalog[name]
        shape = tuple(int(s) for s in shape)
        if kind == "zeros":
            out[name] = np.zeros(shape)
        elif kind == "ones":
            out[name] = np.ones(shape)
        elif kind == "matrix":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) >= 2 else (1, shape[0])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            rng = np.random.default_rng(_param_seed(seed, name))
            out[name] = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init kind {kind!r} for {name}")
    return out


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (all integers little-endian):
#   8 bytes   magic b"SFCKPT01"
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header:
#               {"fingerprint": str, "meta": {...},
#                "tensors": [{"id", "shape", "trainable", "offset", "count"}],
#                "payload_bytes": int, "payload_sha256": str}
#   payload   float64 little-endian values, tensors back to back in header order

MAGIC = b"SFCKPT01"


def save_checkpoint(path, tensors: Mapping[str, tuple[np.ndarray, bool]], fingerprint: str, meta: Mapping | None = None) -> None:
    payload = io.BytesIO()
    entries = []
    offset = 0
    for name in tensors:
        arr, trainable = tensors[name]
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        payload.write(arr.tobytes())
        entries.append(
            {"id": name, "shape": list(arr.shape), "trainable": bool(trainable), "offset": offset, "count": int(arr.size)}
        )
        offset += arr.size
    body = payload.getvalue()
    header = {
        "fingerprint": fingerprint,
        "meta": dict(meta or {}),
        "tensors": entries,
        "payload_bytes": len(body),
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + body)


def load_checkpoint(path, expect_fingerprint: str | None = None):
    """Return ``(tensors, fingerprint, meta)``; ``tensors`` maps id -> (array, trainable)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    body = raw[16 + hlen :]
    if len(body) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, expected {header['payload_bytes']}")
    if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if expect_fingerprint is not None and header["fingerprint"] != expect_fingerprint:
        raise CheckpointError(
            f"{path}: fingerprint {header['fingerprint'][:12]} does not match requested {expect_fingerprint[:12]}"
        )
    values = np.frombuffer(body, dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        arr = values[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        tensors[e["id"]] = (arr, e["trainable"])
    return tensors, header["fingerprint"], header["meta"]
