import json
import logging

import numpy as np
import pytest

from avanim.curation import (
    CurationRecord,
    FilterThresholds,
    apply_filters,
    balance_categories,
    derive_thresholds,
    detect_scenes,
    frame_diffs,
    load_thresholds,
    merge_accepted,
    run_curation,
    score_clip,
    window_clips,
)
from avanim.embedder import new_embedder
from avanim.media import VideoClip
from avanim.rng import numpy_rng
from avanim.syncnet import new_syncnet
from avanim.synth import CATEGORIES, make_pair, synth_corpus


def _rec(clip_id, **kw):
    base = dict(clip_id=clip_id, source_id="s", category="red_330",
                start_s=0.0, end_s=3.0, pixel_diff=0.5, sem_diff=0.5,
                max_amp=0.5, ia_score=50.0, it_score=50.0, p_sync=0.5,
                n_sync_candidates=7)
    base.update(kw)
    return CurationRecord(**base)


# --- scene detection and windowing ---


def test_frame_diffs():
    frames = np.zeros((3, 8, 8, 3))
    frames[1] = 0.5
    d = frame_diffs(VideoClip(frames, 6.0))
    np.testing.assert_allclose(d, [0.5, 0.5])
    assert frame_diffs(VideoClip(frames[:1], 6.0)).size == 0


def test_detect_scenes_single():
    frames = np.full((12, 8, 8, 3), 0.3)
    assert detect_scenes(VideoClip(frames, 6.0)) == [(0.0, 2.0)]


def test_detect_scenes_one_swap():
    # content swap at frame 30 of 60 -> two 5 s scenes
    frames = np.zeros((60, 8, 8, 3))
    frames[30:] = 0.9
    assert detect_scenes(VideoClip(frames, 6.0)) == [(0.0, 5.0), (5.0, 10.0)]


def test_detect_scenes_two_swaps():
    frames = np.zeros((18, 8, 8, 3))
    frames[6:12] = 0.9
    frames[12:] = 0.2
    scenes = detect_scenes(VideoClip(frames, 6.0))
    assert scenes == [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]


def test_window_clips_counts():
    assert len(window_clips((0.0, 10.0))) == 15
    assert window_clips((0.0, 3.0)) == [(0.0, 3.0)]
    assert window_clips((0.0, 2.9)) == []
    assert window_clips((1.0, 5.5)) == [(1.0, 4.0), (1.5, 4.5), (2.0, 5.0), (2.5, 5.5)]


# --- scoring ---


def test_score_clip_static_and_silent_zero():
    emb = new_embedder(list(CATEGORIES), 0)
    net = new_syncnet(0)
    static, _ = make_pair(numpy_rng(0, "cur"), "red_330", distractor_kind="static",
                          duration_s=4.0)
    r = score_clip(static.window(0.0, 3.0), emb, net, source=static, start_s=0.0)
    assert r.pixel_diff == 0.0
    assert abs(r.sem_diff) < 1e-6  # identical frames -> cosine 1 up to rounding
    assert r.max_amp > 0.0

    silent, _ = make_pair(numpy_rng(0, "cur2"), "red_330", distractor_kind="silent",
                          duration_s=4.0)
    r2 = score_clip(silent.window(0.0, 3.0), emb, net, source=silent, start_s=0.0)
    assert r2.max_amp == 0.0
    assert r2.pixel_diff > 0.0


def test_score_clip_sync_candidates():
    emb = new_embedder(list(CATEGORIES), 1)
    net = new_syncnet(1)
    pair, _ = make_pair(numpy_rng(1, "cur"), "green_440", duration_s=6.0)
    r = score_clip(pair.window(0.5, 3.0), emb, net, source=pair, start_s=0.5)
    # shifts fitting inside 6 s from start 0.5: +0.5..+1.5 and -0.5 -> 4, +aligned
    assert r.n_sync_candidates == 5
    assert 0.0 < r.p_sync < 1.0
    assert r.clip_id == f"{pair.source_id}@0.5"
    assert r.end_s == 3.5


def test_score_clip_vacuous_sync_logged(caplog):
    emb = new_embedder(list(CATEGORIES), 2)
    net = new_syncnet(2)
    pair, _ = make_pair(numpy_rng(2, "cur"), "blue_550", duration_s=4.0)
    window = pair.window(0.5, 3.0)
    with caplog.at_level(logging.WARNING, logger="avanim.curation"):
        r = score_clip(window, emb, net, source=None, start_s=0.5)
    assert r.p_sync is None and r.n_sync_candidates == 0
    assert "vacuously" in caplog.text


def test_record_json_roundtrip():
    r = _rec("a@0.0", flags={"amp_min": True}, accepted=True)
    back = CurationRecord.from_record(json.loads(r.to_json()))
    assert back == r


# --- thresholds and filters ---


def test_thresholds_validation():
    with pytest.raises(ValueError, match="mode"):
        FilterThresholds(mode="quantile")
    with pytest.raises(ValueError, match="pixel_diff_min"):
        FilterThresholds(pixel_diff_min=96.0, pixel_diff_max=95.0)
    with pytest.raises(ValueError, match="outside"):
        FilterThresholds(amp_min=120.0)
    FilterThresholds(amp_min=120.0, mode="absolute")  # absolute values unconstrained


def test_load_thresholds(tmp_path):
    cfg = tmp_path / "filters.ini"
    cfg.write_text("[filters]\nmode = absolute\namp_min = 0.002\nia_min = -10\n")
    t = load_thresholds(cfg)
    assert t.mode == "absolute" and t.amp_min == 0.002 and t.ia_min == -10.0
    assert t.pixel_diff_min == 10.0  # unspecified fields keep defaults
    with pytest.raises(FileNotFoundError):
        load_thresholds(tmp_path / "missing.ini")


def test_percentile_filter_exact_counts():
    # 100 records with distinct pixel_diff values: p10 min cut rejects
    # exactly 10, p95 max cut rejects exactly 5
    records = [_rec(f"c{i:03d}", pixel_diff=float(i)) for i in range(100)]
    out = apply_filters(records, FilterThresholds())
    pd_min_fails = [r for r in out if not r.flags["pixel_diff_min"]]
    pd_max_fails = [r for r in out if not r.flags["pixel_diff_max"]]
    assert len(pd_min_fails) == 10
    assert {r.clip_id for r in pd_min_fails} == {f"c{i:03d}" for i in range(10)}
    assert len(pd_max_fails) == 5
    assert {r.clip_id for r in pd_max_fails} == {f"c{i:03d}" for i in range(95, 100)}


def test_percentile_ties_broken_by_clip_id():
    records = [_rec(f"c{i}", max_amp=1.0) for i in range(10)]
    out = apply_filters(records, FilterThresholds())
    fails = sorted(r.clip_id for r in out if not r.flags["amp_min"])
    assert fails == ["c0"]  # all scores tie; lowest clip_id takes the cut


def test_absolute_filters():
    t = FilterThresholds(pixel_diff_min=0.1, pixel_diff_max=0.9, sem_diff_min=0.0,
                         sem_diff_max=1.0, amp_min=0.01, ia_min=0.0, it_min=0.0,
                         p_sync_min=0.2, mode="absolute")
    good = _rec("good")
    silent = _rec("silent", max_amp=0.0)
    offsync = _rec("off", p_sync=0.05)
    out = apply_filters([good, silent, offsync], t)
    assert out[0].accepted
    assert not out[1].accepted and not out[1].flags["amp_min"]
    assert not out[2].accepted and not out[2].flags["p_sync_min"]
    assert out[1].flags["p_sync_min"]  # independent columns


def test_missing_p_sync_passes_vacuously():
    t = FilterThresholds(pixel_diff_min=0.0, pixel_diff_max=10.0, sem_diff_min=0.0,
                         sem_diff_max=10.0, amp_min=0.0, ia_min=-100.0, it_min=-100.0,
                         p_sync_min=0.9, mode="absolute")
    out = apply_filters([_rec("v", p_sync=None)], t)
    assert out[0].flags["p_sync_min"] and out[0].accepted


def test_filters_independent_of_record_order():
    records = [_rec(f"c{i:02d}", pixel_diff=float(i), max_amp=float(i) / 50.0)
               for i in range(50)]
    a = apply_filters(records, FilterThresholds())
    b = apply_filters(records[::-1], FilterThresholds())
    by_id_a = {r.clip_id: r.flags for r in a}
    by_id_b = {r.clip_id: r.flags for r in b}
    assert by_id_a == by_id_b


def test_derive_thresholds():
    cal = [_rec(f"c{i}", pixel_diff=0.2 + 0.1 * i, sem_diff=0.1 + 0.05 * i,
                max_amp=0.6, ia_score=20.0 + i, it_score=10.0 + i,
                p_sync=0.3 + 0.1 * i) for i in range(3)]
    t = derive_thresholds(cal)
    assert t.mode == "absolute"
    assert t.pixel_diff_min == pytest.approx(0.1)
    assert t.pixel_diff_max == pytest.approx(0.8 + 1e-6)
    assert t.amp_min == pytest.approx(0.3)
    assert t.ia_min == pytest.approx(15.0)
    assert t.it_min == pytest.approx(5.0)
    # floored at 0.4: half of 0.3 sits below the uniform-softmax leak level
    assert t.p_sync_min == pytest.approx(0.4)
    cal_hi = [_rec(f"h{i}", p_sync=0.9 + 0.02 * i) for i in range(3)]
    assert derive_thresholds(cal_hi).p_sync_min == pytest.approx(0.45)
    with pytest.raises(ValueError, match="no p_sync"):
        derive_thresholds([_rec("x", p_sync=None)])


def test_derive_thresholds_amp_floor():
    cal = [_rec("c", max_amp=1e-6)]
    assert derive_thresholds(cal).amp_min == 1e-3


# --- merging and balancing ---


def test_merge_accepted():
    recs = [
        _rec("a@0.0", start_s=0.0, end_s=3.0, accepted=True),
        _rec("a@0.5", start_s=0.5, end_s=3.5, accepted=True),
        _rec("a@1.0", start_s=1.0, end_s=4.0, accepted=False),
        _rec("a@5.0", start_s=5.0, end_s=8.0, accepted=True),
        _rec("a@8.0", start_s=8.0, end_s=11.0, accepted=True),  # adjacent: coalesce
    ]
    assert merge_accepted(recs) == [(0.0, 3.5), (5.0, 11.0)]
    assert merge_accepted([recs[2]]) == []
    assert merge_accepted([]) == []


def test_merge_rejects_multiple_sources():
    with pytest.raises(ValueError, match="multiple sources"):
        merge_accepted([_rec("a", source_id="s1"), _rec("b", source_id="s2")])


def test_balance_categories(caplog):
    ex = [{"category": "a"}] * 100 + [{"category": "b"}] * 99
    with caplog.at_level(logging.WARNING, logger="avanim.curation"):
        kept = balance_categories(ex, min_count=100)
    assert len(kept) == 100 and all(e["category"] == "a" for e in kept)
    assert "'b'" in caplog.text
    assert balance_categories([], min_count=1) == []


# --- pipeline ---


@pytest.fixture(scope="module")
def small_models():
    return new_embedder(list(CATEGORIES), 11), new_syncnet(11)


def test_run_curation_writes_records_and_summary(tmp_path, small_models):
    emb, net = small_models
    manifest = synth_corpus(4, 21, tmp_path / "corpus", distractor_frac=0.5,
                            dur_min=4.0, dur_max=6.0)
    out = tmp_path / "curation.jsonl"
    summary = run_curation(manifest, out, FilterThresholds(), emb, net, min_count=1)
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines[-1]["summary"] is True
    assert len(lines) - 1 == summary["n_windows"] > 0
    rec = CurationRecord.from_record(lines[0])
    assert len(rec.flags) == 8
    assert summary["n_accepted_windows"] <= summary["n_windows"]
    assert set(summary["rejections"]) == {
        "pixel_diff_min", "pixel_diff_max", "sem_diff_min", "sem_diff_max",
        "amp_min", "ia_min", "it_min", "p_sync_min"}
    assert set(summary["merged"]) == {f"clip{i:04d}" for i in range(4)}


def test_run_curation_deterministic(tmp_path, small_models):
    emb, net = small_models
    manifest = synth_corpus(2, 22, tmp_path / "corpus", dur_min=4.0, dur_max=5.0)
    s1 = run_curation(manifest, tmp_path / "a.jsonl", FilterThresholds(), emb, net,
                      min_count=1)
    s2 = run_curation(manifest, tmp_path / "b.jsonl", FilterThresholds(), emb, net,
                      min_count=1)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert s1 == s2
