import dataclasses
import json

import numpy as np
import pytest

from setfusion.cohort import (
    MAX_WINDOW_HOURS,
    MIN_WINDOW_HOURS,
    N_TS,
    TASKS,
    TS_FEATURES,
    CohortError,
    NormalizationStats,
    apply_normalization,
    balanced_batches,
    characterize_sampling,
    extract_inference_windows,
    extract_training_window,
    fit_normalization,
    is_asynchronous,
    label_window,
    load_cohort,
    make_window,
    write_cohort,
)
from setfusion.synth import SynthConfig, generation_report, synth_generate

from conftest import simple_record

HR = TS_FEATURES[0]


# --- labels ------------------------------------------------------------------


@pytest.mark.parametrize("t_c,onset,label", [(24, 30, 1), (24, 36, 1), (24, 36.5, 0), (24, None, 0), (24, 24, 0), (4, 15, 1)])
def test_label_window(t_c, onset, label):
    assert label_window(t_c, onset) == label


def test_label_translation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(500):
        t, o = rng.uniform(0, 100, 2)
        # quantized offsets keep the sums exact
        d = float(rng.integers(-4000, 4000)) / 64
        assert label_window(t, o) == label_window(t + d, o + d)


# --- loading -----------------------------------------------------------------


def test_load_excludes_sparse_vitals(tmp_path):
    ok = simple_record(id="ok", ts_time=np.arange(6) + 0.5, ts_feature=np.arange(6), ts_value=np.ones(6))
    few = simple_record(id="few", ts_time=np.arange(4) + 0.5, ts_feature=np.arange(4), ts_value=np.ones(4))
    path = tmp_path / "c.jsonl"
    write_cohort(path, [ok, few])
    loaded = load_cohort(path)
    assert [r.id for r in loaded] == ["ok"] and loaded.excluded == ["few"]


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    loaded = load_cohort(path)
    assert len(loaded) == 0 and loaded.excluded == []


def test_load_rejects_onset_after_stay(tmp_path):
    rec = simple_record(id="bad")
    d = json.loads(rec.to_json())
    d["onsets"]["mortality"] = 11.0
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(CohortError, match="bad.*mortality onset"):
        load_cohort(path)


def test_load_reports_malformed_line(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(simple_record().to_json() + "\n{not json\n")
    with pytest.raises(CohortError, match=":2:"):
        load_cohort(path)


def test_serialization_roundtrip_sorts(tmp_path):
    rec = simple_record(
        ts_time=[2.0, 0.5, 1.0, 9.5, 3.0], ts_feature=[2, 0, 1, 3, 4], ts_value=[70.0, 80.0, 16.0, 120.0, 36.6],
        image_times=[4.0], images=[np.eye(7)], text_times=[5.0, 1.0], texts=[np.array([3, 4]), np.array([1])],
    )
    assert list(rec.ts_time) == [0.5, 1.0, 2.0, 3.0, 9.5]
    assert list(rec.text_times) == [1.0, 5.0] and list(rec.texts[0]) == [1]
    path = tmp_path / "c.jsonl"
    write_cohort(path, [rec])
    back = load_cohort(path).records[0]
    assert back.to_json() == rec.to_json()


# --- characterization ---------------------------------------------------------


def test_irregularity_rules():
    reg = simple_record(ts_time=[0, 1, 2, 3], ts_feature=[0, 0, 0, 0], ts_value=[1, 1, 1, 1])
    irr = simple_record(ts_time=[0, 1, 3], ts_feature=[0, 0, 0], ts_value=[1, 1, 1])
    short = simple_record(ts_time=[0, 1], ts_feature=[0, 0], ts_value=[1, 1])
    assert characterize_sampling(reg)[HR]["irregular"] is False
    assert characterize_sampling(irr)[HR]["irregular"] is True
    flags = characterize_sampling(short)[HR]
    assert flags["irregular"] is False and flags["undefined"] is True


def test_asynchrony():
    rec = simple_record(ts_time=[1.0, 2.0, 2.0], ts_feature=[0, 0, 1], ts_value=[80, 81, 15])
    assert characterize_sampling(rec)[HR]["asynchronous"] is True
    assert is_asynchronous(rec)


# --- normalization ------------------------------------------------------------


def test_normalization_examples():
    stats = NormalizationStats(feature_min=np.full(N_TS, 60.0), feature_max=np.full(N_TS, 180.0), age_min=18, age_max=90)
    rec = simple_record(ts_time=[1, 2, 3], ts_feature=[0, 0, 0], ts_value=[120.0, 190.0, 60.0])
    out = apply_normalization(rec, stats)
    assert out.ts_value[0] == 0.5
    assert out.ts_value[1] == pytest.approx(13 / 12, abs=1e-15)
    assert out.ts_value[2] == 0.0


def test_normalization_roundtrip_maps_extremes(small_splits):
    train = small_splits["train"]
    stats = fit_normalization(train)
    normed = [apply_normalization(r, stats) for r in train]
    v = np.concatenate([r.ts_value for r in normed])
    f = np.concatenate([r.ts_feature for r in normed])
    for k in range(N_TS):
        assert v[f == k].min() == 0.0 and v[f == k].max() == 1.0


def test_normalization_leaves_images_and_text(small_splits):
    stats = fit_normalization(small_splits["train"])
    rec = next(r for r in small_splits["train"] if r.has_image and r.has_text)
    out = apply_normalization(rec, stats)
    assert out.images[0] is rec.images[0] or np.array_equal(out.images[0], rec.images[0])
    assert np.array_equal(out.texts[0], rec.texts[0])


def test_degenerate_feature_rejected():
    rec = simple_record(ts_time=[1, 2], ts_feature=[0, 0], ts_value=[5.0, 5.0])
    with pytest.raises(CohortError):
        fit_normalization([rec])


# --- windows -----------------------------------------------------------------


def test_training_window_example():
    rec = simple_record()
    w = make_window(rec, 10.0)
    assert w.horizon_start == 0.0 and w.label["mortality"] == 0


def test_training_window_rejects_post_onset_and_stale():
    rec = simple_record(onsets={"mortality": 20.0, "vasopressor": None, "intubation": None}, stay_end=30.0,
                        ts_time=[0.5, 1.0, 2.0, 21.0, 29.5], ts_feature=[0, 1, 2, 3, 4], ts_value=[1, 2, 3, 4, 5])
    rng = np.random.default_rng(0)
    for _ in range(200):
        w = extract_training_window(rec, rng, "mortality")
        if w is not None:
            assert w.t_current < 20.0
            assert ((rec.ts_time >= w.t_current - 1) & (rec.ts_time <= w.t_current)).any()


def test_training_window_gives_up():
    rec = simple_record(ts_time=[0.5], ts_feature=[0], ts_value=[1.0])
    assert extract_training_window(rec, np.random.default_rng(0)) is None


def test_every_window_obeys_rules(small_splits):
    rng = np.random.default_rng(1)
    for rec in small_splits["train"]:
        ws = extract_inference_windows(rec, 0, "vasopressor")
        w2 = extract_training_window(rec, rng, "vasopressor")
        for w in ws + ([w2] if w2 else []):
            assert MIN_WINDOW_HOURS <= w.t_current - w.horizon_start <= MAX_WINDOW_HOURS
            assert w.t_current <= rec.stay_end
            assert ((rec.ts_time >= w.t_current - 1) & (rec.ts_time <= w.t_current)).any()
            assert w.presence.has_timeseries


def test_inference_windows():
    rec = simple_record(stay_end=40.0, ts_time=np.arange(0.5, 40, 0.5), ts_feature=np.zeros(79, int), ts_value=np.ones(79))
    ws = extract_inference_windows(rec, 5, "mortality")
    assert len(ws) == 5 and all(w.label["mortality"] == 0 for w in ws)
    assert ws == extract_inference_windows(rec, 5, "mortality")
    rec2 = simple_record(stay_end=40.0, onsets={"mortality": 15.0, "vasopressor": None, "intubation": None},
                         ts_time=np.arange(0.5, 40, 0.5), ts_feature=np.zeros(79, int), ts_value=np.ones(79))
    ws2 = extract_inference_windows(rec2, 5, "mortality")
    pos = [w for w in ws2 if w.label["mortality"]]
    assert 0 < len(pos) <= 5
    assert all(w.t_current < 15.0 <= w.t_current + 12 for w in pos)
    assert all(w.t_current < 15.0 for w in ws2)


def test_balanced_batches():
    rec = simple_record()
    base = make_window(rec, 10.0)
    p = [dataclasses.replace(base, label={**base.label, "mortality": 1}, t_current=3.0 + i) for i in range(2)]
    n = [dataclasses.replace(base, t_current=4.0 + i / 64) for i in range(1000)]
    rng = np.random.default_rng(0)
    batches = list(balanced_batches(p + n, 8, rng))
    assert len(batches) == int(np.ceil(1002 / 8))
    for b in batches:
        assert sum(w.label["mortality"] for w in b) == 4
    odd = next(balanced_batches(p + n, 7, np.random.default_rng(0)))
    assert sum(w.label["mortality"] for w in odd) == 4 and len(odd) == 7
    with pytest.raises(CohortError):
        next(balanced_batches(n, 8, rng))
    with pytest.raises(ValueError):
        next(balanced_batches(p + n, 1, rng))


# --- generator ---------------------------------------------------------------


def test_synth_deterministic(tmp_path):
    cfg = SynthConfig(n_patients=40, seed=11)
    a, b = synth_generate(cfg), synth_generate(cfg)
    for name in ("train", "val", "test"):
        write_cohort(tmp_path / f"a_{name}", a[name])
        write_cohort(tmp_path / f"b_{name}", b[name])
        assert (tmp_path / f"a_{name}").read_bytes() == (tmp_path / f"b_{name}").read_bytes()


def test_splits_disjoint(small_splits):
    ids = [set(r.id for r in small_splits[k]) for k in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_synth_missing_rates_and_sampling():
    # 10,000 patients: binomial 3-sigma band for p=0.76 is about 0.013
    splits = synth_generate(SynthConfig(n_patients=10000, seed=0))
    recs = [r for v in splits.values() for r in v]
    img = np.mean([not r.has_image for r in recs])
    txt = np.mean([not r.has_text for r in recs])
    assert abs(img - 0.76) <= 0.02 and abs(txt - 0.49) <= 0.02
    sample = recs[:500]
    irregular = np.mean([any(v["irregular"] for v in characterize_sampling(r).values()) for r in sample])
    asynchronous = np.mean([is_asynchronous(r) for r in sample])
    assert irregular >= 0.99 and asynchronous >= 0.99
    rep = {row["split"]: row for row in generation_report(splits)}
    for task, target in SynthConfig().prevalence.items():
        total = np.mean([r.onsets[task] is not None for r in recs])
        assert abs(total - target) < 0.03, task
    assert set(rep) == {"train", "val", "test"}


def test_synth_config_validation():
    with pytest.raises(CohortError):
        synth_generate(SynthConfig(image_missing=1.5))
    with pytest.raises(CohortError):
        synth_generate(SynthConfig(n_patients=0))


def test_records_validate(small_splits):
    for recs in small_splits.values():
        for r in recs:
            r.validate()
            assert set(r.onsets) == set(TASKS)
