import math

import numpy as np
import pytest
import torch

from setfusion import autodiff as ad

F64 = torch.float64


def t(x, grad=False):
    return torch.tensor(x, dtype=F64, requires_grad=grad)


# --- primitives --------------------------------------------------------------


def test_softmax_symmetric_pair():
    assert ad.softmax(t([0.0, 0.0])).tolist() == [0.5, 0.5]


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(t([5.0, 5.0, 5.0]), t([1.0, 1.0, 1.0]), t([0.0, 0.0, 0.0]))
    assert out.tolist() == [0.0, 0.0, 0.0]


def test_matmul_identity():
    a = torch.randn(3, 4, dtype=F64)
    assert torch.equal(ad.matmul(torch.eye(3, dtype=F64), a), a)


def test_relu_values():
    assert ad.relu(t([-1.5, 0.0, 2.25])).tolist() == [0.0, 0.0, 2.25]


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("softmax", [t([[1.0, 2.0, 3.0]])], {"mask": torch.tensor([[True, True, False]])})
    assert out[0, 2] == 0.0
    assert math.isclose(float(out.sum()), 1.0, abs_tol=1e-15)
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.apply_primitive("conv", [t([1.0])])


@pytest.mark.parametrize(
    "kind,inputs",
    [
        ("matmul", [torch.zeros(2, 3), torch.zeros(4, 2)]),
        ("add", [torch.zeros(2, 3), torch.zeros(4)]),
        ("linear", [torch.zeros(2, 3), torch.zeros(5, 2)]),
        ("concat", [torch.zeros(2, 3), torch.zeros(2, 4)]),
    ],
)
def test_shape_errors_name_the_primitive(kind, inputs):
    with pytest.raises(ad.ShapeError, match=kind):
        ad.apply_primitive(kind, inputs)


def test_layer_norm_shape_error():
    with pytest.raises(ad.ShapeError, match="layer_norm"):
        ad.layer_norm(torch.zeros(2, 3), torch.ones(4), torch.zeros(4))


def test_non_finite_output_is_numeric_fault():
    with pytest.raises(ad.NumericFault, match="matmul"):
        ad.matmul(t([[1e308, 1e308]]), t([[10.0], [10.0]]))


def test_embedding_out_of_range():
    with pytest.raises(ad.ShapeError):
        ad.embedding(torch.zeros(4, 2), torch.tensor([4]))


def test_masked_softmax_ignores_masked_entries():
    x = torch.randn(3, 5, dtype=F64)
    mask = torch.tensor([[1, 1, 0, 1, 0]] * 3, dtype=torch.bool)
    y = ad.softmax(x, mask)
    assert (y[:, ~mask[0]] == 0).all()
    y2 = ad.softmax(torch.where(mask, x, torch.full_like(x, 123.0)), mask)
    assert torch.equal(y, y2)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = torch.from_numpy(rng.normal(scale=10, size=(4, int(rng.integers(1, 30)))))
        assert (ad.softmax(x).sum(-1) - 1).abs().max() <= 1e-12


def test_layer_norm_moments():
    rng = np.random.default_rng(1)
    d = 24
    ones, zeros = torch.ones(d, dtype=F64), torch.zeros(d, dtype=F64)
    for _ in range(50):
        x = torch.from_numpy(rng.normal(loc=rng.normal() * 50, scale=rng.uniform(0.01, 30), size=(6, d)))
        y = ad.layer_norm(x, ones, zeros)
        assert y.mean(-1).abs().max() < 1e-10
        assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-8


# --- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    p = t([0.3, -1.0, 2.0], grad=True)
    ad.backward(p.sum())
    assert p.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_square():
    p = t([1.0, 2.0], grad=True)
    ad.backward((p * p).sum())
    assert p.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_then_resets():
    p = t([0.5, -0.25, 3.0], grad=True)
    loss = lambda: (ad.tanh(p) * p).sum()  # noqa: E731
    ad.backward(loss())
    once = p.grad.clone()
    ad.backward(loss())
    assert torch.equal(p.grad, 2 * once)
    ad.reset_gradients([p])
    assert torch.equal(p.grad, torch.zeros(3, dtype=F64))


def test_backward_rejects_non_scalar_and_missing_graph():
    p = t([1.0, 2.0], grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(p * 2)
    with pytest.raises(RuntimeError, match="graph"):
        ad.backward(t(3.0))


def test_mlp_gradient_matches_central_differences():
    # oracle: central differences h=1e-5 in float64
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, generator=g, dtype=F64)
    w1 = torch.randn(4, 5, generator=g, dtype=F64, requires_grad=True)
    b1 = torch.randn(5, generator=g, dtype=F64, requires_grad=True)
    w2 = torch.randn(5, 1, generator=g, dtype=F64, requires_grad=True)
    params = {"w1": w1, "b1": b1, "w2": w2}

    def loss():
        return ad.linear(ad.tanh(ad.linear(x, w1, b1)), w2).sum()

    rep = ad.finite_difference_check(loss, params, sample_count=30, h=1e-5, tol_rel=1e-6)
    assert rep.passed, rep.failures()


@pytest.mark.parametrize("h", [1e-6, 1e-5, 1e-4])
def test_fd_check_quadratic(h):
    a = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=F64)
    p = t([0.7, -1.3], grad=True)
    rep = ad.finite_difference_check(lambda: p @ a @ p + p.sum(), {"p": p}, sample_count=10, h=h, tol_rel=1e-8)
    assert rep.passed, rep.max_rel_err


def test_fd_check_catches_broken_softmax_rule(monkeypatch):
    def broken(ctx, g):
        (y,) = ctx.saved_tensors
        return y * g, None

    monkeypatch.setattr(ad._MaskedSoftmax, "backward", staticmethod(broken))
    p = torch.randn(6, dtype=F64, requires_grad=True)
    w = torch.randn(6, dtype=F64)
    rep = ad.finite_difference_check(lambda: (ad.softmax(p) * w).sum(), {"p": p}, sample_count=20, h=1e-6, tol_rel=1e-6)
    assert not rep.passed


def test_fd_check_requires_float64():
    p = torch.ones(2, requires_grad=True)
    with pytest.raises(TypeError):
        ad.finite_difference_check(lambda: p.sum(), {"p": p})


def test_fd_check_non_finite_probe():
    p = t([1e-7], grad=True)
    # the loss is finite at p but the p - h probe takes log of a negative number
    with pytest.raises(ad.NumericFault):
        ad.finite_difference_check(lambda: torch.log(p).sum(), {"p": p}, sample_count=1, h=1e-6)


def _random_case(rng, kind):
    """A random float64 input set for one primitive plus a scalarizing weight."""
    def arr(*shape):
        return torch.from_numpy(rng.normal(size=shape)).requires_grad_(True)

    n, m, k = (int(v) for v in rng.integers(1, 6, size=3))
    if kind == "matmul":
        return [arr(n, m), arr(m, k)], {}
    if kind in ("add", "mul"):
        return [arr(n, m), arr(m)], {}
    if kind == "linear":
        return [arr(n, m), arr(m, k), arr(k)], {}
    if kind == "concat":
        return [arr(n, m), arr(k, m)], {"axis": 0}
    if kind == "slice":
        return [arr(n + 2, m)], {"start": 1, "stop": n + 1, "axis": 0}
    if kind == "softmax":
        mask = torch.from_numpy(rng.random((n, m + 1)) < 0.7)
        mask[:, 0] = True
        return [arr(n, m + 1)], {"mask": mask}
    if kind == "layer_norm":
        # rows of two normalize to +-1 whatever the input, giving zero gradients
        return [arr(n, m + 2), arr(m + 2), arr(m + 2)], {}
    if kind == "embedding":
        return [arr(n + 1, m)], {"ids": torch.from_numpy(rng.integers(0, n + 1, size=k))}
    if kind == "mean":
        return [arr(n, m)], {"axis": int(rng.integers(0, 2))}
    return [arr(n, m)], {}


@pytest.mark.parametrize(
    "kind",
    ["matmul", "add", "mul", "linear", "concat", "slice", "relu", "tanh", "sigmoid", "gelu", "softmax", "layer_norm", "embedding", "mean"],
)
def test_primitive_gradients_randomized(kind):
    rng = np.random.default_rng(abs(hash(kind)) % 2**32)
    for _ in range(8):
        inputs, attrs = _random_case(rng, kind)
        if kind == "embedding":
            ids = attrs.pop("ids")
            fn = lambda: ad.embedding(inputs[0], ids)  # noqa: E731
        else:
            fn = lambda: ad.apply_primitive(kind, inputs, attrs)  # noqa: E731
        w = torch.from_numpy(rng.normal(size=fn().shape))
        if kind == "relu":
            # keep probes away from the kink at 0
            with torch.no_grad():
                inputs[0].add_(torch.sign(inputs[0]) * 0.1)
        params = {f"x{i}": x for i, x in enumerate(inputs) if x.dtype == F64}
        rep = ad.finite_difference_check(lambda: (fn() * w).sum(), params, sample_count=12, h=1e-6, tol_rel=1e-6,
                                         seed=int(rng.integers(1000)))
        assert rep.passed, (kind, rep.failures())


def test_replay_is_bitwise_identical():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(5, 8, generator=g, dtype=F64)
    gain, shift = torch.ones(8, dtype=F64), torch.zeros(8, dtype=F64)
    a = ad.softmax(ad.layer_norm(x, gain, shift) @ x.T)
    b = ad.softmax(ad.layer_norm(x, gain, shift) @ x.T)
    assert torch.equal(a, b)


# --- init and checkpoints ----------------------------------------------------


CATALOG = {"w": ((4, 4), "matrix"), "b": ((4,), "zeros"), "g": ((4,), "ones"), "v": ((3, 7), "matrix")}


def test_seeded_init_deterministic():
    a, b = ad.seeded_init(CATALOG, 7), ad.seeded_init(CATALOG, 7)
    for k in CATALOG:
        assert a[k].tobytes() == b[k].tobytes()
    c = ad.seeded_init(CATALOG, 8)
    assert not np.array_equal(a["w"], c["w"])


def test_seeded_init_scheme():
    p = ad.seeded_init(CATALOG, 7)
    assert (p["b"] == 0).all() and (p["g"] == 1).all()
    assert np.abs(p["w"]).max() <= math.sqrt(0.75)  # sqrt(6 / (4 + 4))
    assert np.abs(p["v"]).max() <= math.sqrt(6 / 10)


def test_seeded_init_independent_of_catalog_members():
    a = ad.seeded_init(CATALOG, 7)
    b = ad.seeded_init({"w": CATALOG["w"]}, 7)
    assert np.array_equal(a["w"], b["w"])


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": (rng.normal(size=(2, 3)), True), "b": (rng.normal(size=(4,)), False)}
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, tensors, "fp123", {"note": "hi"})
    out, fp, meta = ad.load_checkpoint(path, "fp123")
    assert fp == "fp123" and meta == {"note": "hi"}
    for k, (arr, tr) in tensors.items():
        assert out[k][0].tobytes() == arr.tobytes() and out[k][1] == tr


def test_checkpoint_truncated_and_mismatch(tmp_path):
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, {"a": (np.ones(10), True)}, "fp")
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-5])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "head.ckpt").write_bytes(raw[:12])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "head.ckpt")
    with pytest.raises(ad.CheckpointError, match="fingerprint"):
        ad.load_checkpoint(path, "other")
