import math

import numpy as np
import pytest
import torch

from setfusion.autodiff import CheckpointError
from setfusion.model import (
    ConfigError,
    FusionConfig,
    build_model,
    ctaa_weights,
    load_model,
    maa_logit,
    save_model,
    skip_average,
)

from conftest import make_model, tiny_fusion

T = torch.tensor
f64 = torch.float64


def _pres(img, txt):
    return {"ts": T([True]), "image": T([img]), "text": T([txt])}


# --- fusion arithmetic ---------------------------------------------------------


@pytest.mark.parametrize("img,txt,expected", [(True, True, 3.0), (True, False, 2.0), (False, True, 3.0), (False, False, 1.0)])
def test_skip_average_examples(img, txt, expected):
    z = {m: torch.full((1, 2, 3), v, dtype=f64) for m, v in (("ts", 1.0), ("image", 3.0), ("text", 5.0))}
    out = skip_average(z, _pres(img, txt))
    assert torch.equal(out, torch.full((1, 2, 3), expected, dtype=f64))


def test_skip_average_ignores_nonfinite_absent():
    z = {"ts": torch.ones(1, 1, 1, dtype=f64), "image": torch.full((1, 1, 1), float("nan"), dtype=f64)}
    assert skip_average(z, _pres(False, False)).item() == 1.0


def test_aa_and_tsa_examples():
    logits = {"ts": T([1.0], dtype=f64), "image": T([3.0], dtype=f64), "text": T([5.0], dtype=f64)}
    assert maa_logit(logits, _pres(True, True), "aa")[0].item() == 3.0
    assert maa_logit(logits, _pres(False, True), "aa")[0].item() == 3.0
    assert maa_logit(logits, _pres(False, False), "aa")[0].item() == 1.0
    logit, w = maa_logit(logits, _pres(True, True), "tsa")
    assert logit.item() == 1.0 and w.tolist() == [[1.0, 0.0, 0.0]]


def test_ctaa_weight_example():
    w = ctaa_weights([0.0, math.log(2.0), 0.0], tau=1.0)
    assert w.tolist() == pytest.approx([0.25, 0.5, 0.25], abs=1e-15)
    w2 = ctaa_weights([0.0, math.log(2.0), 0.0], tau=1.0, present=(True, True, False))
    assert w2.tolist() == pytest.approx([1 / 3, 2 / 3, 0.0], abs=1e-15)


def test_ctaa_at_zero_is_aa_exactly():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = {m: T(rng.normal(size=4)) for m in ("ts", "image", "text")}
        pres = {"ts": torch.ones(4, dtype=torch.bool), "image": T(rng.random(4) < 0.5), "text": T(rng.random(4) < 0.5)}
        aa = maa_logit(logits, pres, "aa")
        ct = maa_logit(logits, pres, "ctaa", torch.zeros(3, dtype=f64), tau=0.2)
        assert torch.equal(aa[0], ct[0]) and torch.equal(aa[1], ct[1])


def test_ctaa_temperature_sharpens():
    w = [0.3, -0.1, 0.05]
    rows = [ctaa_weights(w, tau) for tau in (1.0, 0.5, 0.2, 0.1)]
    peaks = [r.max().item() for r in rows]
    assert peaks == sorted(peaks)
    assert all(int(r.argmax()) == 0 for r in rows)
    assert all(abs(r.sum().item() - 1.0) <= 1e-12 and (r >= 0).all() for r in rows)
    assert ctaa_weights(w, 1e6).tolist() == pytest.approx([1 / 3] * 3, abs=1e-6)


def test_ctaa_absent_weight_zero():
    logits = {m: T([1.0], dtype=f64) for m in ("ts", "image", "text")}
    _, w = maa_logit(logits, _pres(False, True), "ctaa", T([0.0, 50.0, 0.0], dtype=f64), tau=0.2)
    assert w[0, 1].item() == 0.0 and w.sum().item() == pytest.approx(1.0, abs=1e-15)


# --- configuration ------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(maa="mean"), dict(fusion_layer=3), dict(fusion_layer=0), dict(d=30, heads=4), dict(tau=0.0), dict(filler="noise"), dict(modalities=("image",))],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        tiny_fusion(**kw).validate()


def test_config_roundtrip():
    cfg = tiny_fusion(maa="ctaa", umse_disabled=("text",))
    assert FusionConfig.from_dict(cfg.to_dict()) == cfg


def test_cls_placement():
    tsa, aa = make_model("tsa"), make_model("aa")
    assert tsa.towers["ts"].cls is not None and tsa.towers["image"].cls is None
    assert all(t.cls is not None for t in aa.towers.values())


def test_multi_token_heads():
    m = make_model("tsa", multi_token=True)
    assert sorted(m.heads) == ["ts", "ts_image", "ts_image_text", "ts_text"]
    pres = {"ts": T([True] * 4), "image": T([False, True, False, True]), "text": T([False, False, True, True])}
    assert m.head_for(pres) == ["ts", "ts+image", "ts+text", "ts+image+text"]
    assert sorted(make_model("tsa", multi_token=True, modalities=("ts", "image")).heads) == ["ts", "ts_image"]


# --- forward semantics --------------------------------------------------------


def _batch(small_data, windows):
    return small_data.sources["train"].batch(windows, "vasopressor", f64)


def _mixed(mixed_windows, n=2):
    out = []
    for key in sorted(mixed_windows):
        out += mixed_windows[key][:n]
    return out


@pytest.mark.parametrize("maa", ["tsa", "aa", "ctaa"])
def test_batched_matches_reference(maa, small_data, mixed_windows):
    model = make_model(maa, seed=2)
    if maa == "ctaa":
        with torch.no_grad():
            model.ctaa_logits.copy_(T([0.2, -0.3, 0.1]))
    ws = _mixed(mixed_windows)
    batched = model(_batch(small_data, ws))["logit"]
    for i, w in enumerate(ws):
        ref = model(_batch(small_data, [w]), reference=True)["logit"]
        assert abs(ref.item() - batched[i].item()) <= 1e-12


def test_filler_invariance(small_data, mixed_windows):
    ws = _mixed(mixed_windows)
    batch = _batch(small_data, ws)
    outs = [make_model("aa", seed=1, filler=f)(batch)["logit"] for f in ("zeros", "ones", "random")]
    assert torch.equal(outs[0], outs[1]) and torch.equal(outs[0], outs[2])


def test_absent_towers_get_no_gradient(small_data, mixed_windows):
    model = make_model("ctaa", seed=0)
    w = mixed_windows[(False, False)][0]
    out = model(_batch(small_data, [w, w]))
    out["logit"].sum().backward()
    for m in ("image", "text"):
        for name, p in model.towers[m].named_parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert model.ctaa_logits.grad is None or torch.count_nonzero(model.ctaa_logits.grad[1:]) == 0
    assert torch.count_nonzero(model.towers["ts"].layers[0].attn.q.weight.grad) > 0


def test_tsa_ignores_image_text_heads_in_logit(small_data, mixed_windows):
    model = make_model("tsa", seed=0)
    w = mixed_windows[(True, True)][0]
    out = model(_batch(small_data, [w]))
    assert out["attention"].tolist() == [[1.0, 0.0, 0.0]]


def test_token_permutation_invariance(small_data, mixed_windows):
    model = make_model("aa", seed=3)
    ws = _mixed(mixed_windows, 1)
    batch = _batch(small_data, ws)
    base = model(batch)["logit"]
    g = torch.Generator().manual_seed(0)
    d = dict(batch.__dict__)
    perm = torch.stack([torch.randperm(batch.ts_value.shape[1], generator=g) for _ in range(len(ws))])
    for k in ("ts_value", "ts_time", "ts_ft", "ts_mask"):
        d[k] = torch.gather(batch.__dict__[k], 1, perm)
    if batch.img_feat is not None:
        p = torch.stack([torch.randperm(batch.img_feat.shape[1], generator=g) for _ in range(len(ws))])
        d["img_feat"] = torch.gather(batch.img_feat, 1, p[..., None].expand_as(batch.img_feat))
        d["img_time"] = torch.gather(batch.img_time, 1, p)
        d["img_mask"] = torch.gather(batch.img_mask, 1, p)
    permuted = type(batch)(**d)
    assert torch.allclose(model(permuted)["logit"], base, rtol=0, atol=1e-12)


def test_reference_needs_single_window(small_data, mixed_windows):
    ws = _mixed(mixed_windows, 1)
    with pytest.raises(ValueError):
        make_model()(_batch(small_data, ws), reference=True)


def test_ts_only_model_ignores_other_modalities(small_data, mixed_windows):
    model = make_model("aa", modalities=("ts",))
    w = mixed_windows[(True, True)][0]
    a = model(_batch(small_data, [w]))["logit"]
    b = model(_batch(small_data, [w.masked(image=True, text=True)]))["logit"]
    assert torch.equal(a, b)


def test_seeded_build_is_deterministic():
    a, b = build_model(tiny_fusion(), 5, f64), build_model(tiny_fusion(), 5, f64)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = build_model(tiny_fusion(), 6, f64)
    assert not torch.equal(a.fsn_init, c.fsn_init)


# --- persistence --------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, small_data, mixed_windows):
    model = make_model("ctaa", seed=4)
    fp = save_model(model, tmp_path / "m.ckpt", {"fingerprint_extra": {"seed": 4}, "note": "x"})
    back, meta = load_model(tmp_path / "m.ckpt", expect_fingerprint=fp, dtype=f64)
    batch = _batch(small_data, _mixed(mixed_windows))
    assert torch.equal(back.eval()(batch)["logit"], model(batch)["logit"])
    assert meta["note"] == "x"


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(make_model(), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_model(path)


def test_checkpoint_fingerprint_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(make_model(), path, {"fingerprint_extra": {"seed": 0}})
    with pytest.raises(CheckpointError):
        load_model(path, expect_fingerprint="0" * 64)
