"""Automatic corpus curation: scene cuts, windowing, filters, merging.

Pipeline: split each source video at hard scene cuts, slide 3 s windows at
0.5 s stride, score every window (motion, semantic change, peak amplitude,
image-audio / image-text alignment, sync probability), flag each score
against thresholds, union the accepted windows back into per-source
segments, and drop under-represented categories.

Sync probability compares the window's audio against the aligned video and
every temporally shifted variant of the video that still fits inside the
source clip (softmax over phi at temperature 1). Windows whose source is
too short for any shifted variant pass the sync filter vacuously and are
logged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .embedder import AlignmentEmbedder
from .media import ClipPair, VideoClip, load_pair, read_manifest
from .metrics import ia_score, it_score
from .synth import text_prompt
from .syncnet import SyncClassifier, fitting_shifts, p_sync

log = logging.getLogger(__name__)

WIN_S = 3.0
STRIDE_S = 0.5
SHIFT_GRID_S = (0.5, 1.0, 1.5, -0.5, -1.0, -1.5)

# (flag name, record field, side); min-side fails below, max-side above
FILTERS = (
    ("pixel_diff_min", "pixel_diff", "min"),
    ("pixel_diff_max", "pixel_diff", "max"),
    ("sem_diff_min", "sem_diff", "min"),
    ("sem_diff_max", "sem_diff", "max"),
    ("amp_min", "max_amp", "min"),
    ("ia_min", "ia_score", "min"),
    ("it_min", "it_score", "min"),
    ("p_sync_min", "p_sync", "min"),
)


@dataclass
class CurationRecord:
    """One scored 3 s window; the audit trail of the pipeline."""

    clip_id: str
    source_id: str
    category: str
    start_s: float
    end_s: float
    pixel_diff: float
    sem_diff: float
    max_amp: float
    ia_score: float
    it_score: float
    p_sync: float | None  # None when no shifted variant fits the source
    n_sync_candidates: int
    flags: dict = field(default_factory=dict)
    accepted: bool = False

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "CurationRecord":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in rec.items() if k in names})


@dataclass
class FilterThresholds:
    """Cutoffs per filter. In percentile mode each value is a percentile:
    min filters reject the bottom p% of the batch, max filters the top
    (100 - p)%; in absolute mode values are compared directly."""

    pixel_diff_min: float = 10.0
    pixel_diff_max: float = 95.0
    sem_diff_min: float = 10.0
    sem_diff_max: float = 95.0
    amp_min: float = 10.0
    ia_min: float = 10.0
    it_min: float = 10.0
    p_sync_min: float = 10.0
    mode: str = "percentile"

    def __post_init__(self):
        if self.mode not in ("absolute", "percentile"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if self.pixel_diff_min >= self.pixel_diff_max:
            raise ValueError("pixel_diff_min must be < pixel_diff_max")
        if self.sem_diff_min >= self.sem_diff_max:
            raise ValueError("sem_diff_min must be < sem_diff_max")
        if self.mode == "percentile":
            for f in fields(self):
                if f.name == "mode":
                    continue
                v = getattr(self, f.name)
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"percentile {f.name}={v} outside [0, 100]")


def load_thresholds(path) -> FilterThresholds:
    """Read a [filters] section from an INI file."""
    import configparser

    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise FileNotFoundError(f"thresholds file not found: {path}")
    sec = cp["filters"] if cp.has_section("filters") else cp["DEFAULT"]
    kwargs = {}
    for f in fields(FilterThresholds):
        if f.name in sec:
            kwargs[f.name] = sec[f.name] if f.name == "mode" else float(sec[f.name])
    return FilterThresholds(**kwargs)


# ---------------------------------------------------------------------------
# scene splitting and windowing


def frame_diffs(video: VideoClip) -> np.ndarray:
    """Mean absolute pixel difference between consecutive frames."""
    f = video.frames
    if f.shape[0] < 2:
        return np.zeros(0)
    return np.abs(np.diff(f, axis=0)).mean(axis=(1, 2, 3))


def detect_scenes(video: VideoClip, cut_threshold: float = 0.2) -> list:
    """Partition [0, duration) at frames whose difference exceeds the cut."""
    if video.n_frames == 0:
        raise ValueError("empty video")
    cuts = [int(i) + 1 for i in np.nonzero(frame_diffs(video) > cut_threshold)[0]]
    bounds = [0] + cuts + [video.n_frames]
    return [(a / video.fps, b / video.fps) for a, b in zip(bounds[:-1], bounds[1:])]


def window_clips(segment, win_s: float = WIN_S, stride_s: float = STRIDE_S) -> list:
    """3 s windows at 0.5 s stride inside [start_s, end_s)."""
    start_s, end_s = segment
    out = []
    k = 0
    while start_s + k * stride_s + win_s <= end_s + 1e-9:
        s = start_s + k * stride_s
        out.append((s, s + win_s))
        k += 1
    return out


# ---------------------------------------------------------------------------
# scoring


def _sem_diffs(frames: np.ndarray, embedder: AlignmentEmbedder) -> np.ndarray:
    import torch

    from .tensors import frame_input

    with torch.no_grad():
        z = embedder.embed_image(torch.stack([frame_input(f) for f in frames]))
    cos = (z[:-1] * z[1:]).sum(-1).numpy().astype(np.float64)
    return 1.0 - cos


def score_clip(pair: ClipPair, embedder: AlignmentEmbedder, syncnet: SyncClassifier,
               source: ClipPair | None = None, start_s: float = 0.0,
               shift_grid_s=SHIFT_GRID_S) -> CurationRecord:
    """Score one window. `source` supplies the shifted sync candidates;
    without it (or when nothing fits) p_sync is missing."""
    win_s = pair.video.duration_s
    diffs = frame_diffs(pair.video)
    pixel_diff = float(diffs.mean()) if diffs.size else 0.0
    sem = _sem_diffs(pair.video.frames, embedder)
    sem_diff = float(sem.mean()) if sem.size else 0.0
    max_amp = float(np.abs(pair.audio.samples).max()) if pair.audio.samples.size else 0.0
    ia = ia_score(pair.audio, pair.video, embedder)
    it = it_score(text_prompt(pair.category), pair.video, embedder)

    p = None
    n_cands = 0
    if source is not None:
        shifts = fitting_shifts(start_s, win_s, source.video.duration_s, shift_grid_s)
        if shifts:
            cands = [pair.video] + [
                source.video.slice_seconds(start_s + s, start_s + s + win_s)
                for s in shifts
            ]
            probs = p_sync(pair.audio, cands, syncnet, tau=1.0)
            p = float(probs[0])
            n_cands = len(cands)
    if p is None:
        log.warning("window %s@%.1f: no shifted variant fits; sync filter passes vacuously",
                    pair.source_id, start_s)
    return CurationRecord(
        clip_id=f"{pair.source_id}@{start_s:.1f}",
        source_id=pair.source_id,
        category=pair.category,
        start_s=float(start_s),
        end_s=float(start_s + win_s),
        pixel_diff=pixel_diff,
        sem_diff=sem_diff,
        max_amp=max_amp,
        ia_score=ia,
        it_score=it,
        p_sync=p,
        n_sync_candidates=n_cands,
    )


# ---------------------------------------------------------------------------
# filtering


def _percentile_failures(records, field_name: str, side: str, pct: float) -> set:
    """clip_ids of the records landing in the rejected tail (exact rank
    counts: k = round(p/100 * n) for min filters, round((100-p)/100 * n)
    for max; ties broken by clip_id)."""
    scored = [(getattr(r, field_name), r.clip_id) for r in records
              if getattr(r, field_name) is not None]
    n = len(scored)
    if n == 0:
        return set()
    scored.sort()
    if side == "min":
        k = int(round(pct / 100.0 * n))
        tail = scored[:k]
    else:
        k = int(round((100.0 - pct) / 100.0 * n))
        tail = scored[n - k:] if k > 0 else []
    return {cid for _, cid in tail}


def apply_filters(records, thresholds: FilterThresholds) -> list:
    """Set per-filter pass/fail flags and the accepted bit on every record.

    Flags are independent: each filter sees only its own score column, so
    evaluation order never matters. Missing scores pass vacuously.
    """
    if thresholds.mode == "percentile":
        fail_sets = {
            flag: _percentile_failures(records, field_name, side, getattr(thresholds, flag))
            for flag, field_name, side in FILTERS
        }
    out = []
    for r in records:
        flags = {}
        for flag, field_name, side in FILTERS:
            v = getattr(r, field_name)
            if v is None:
                flags[flag] = True
            elif thresholds.mode == "percentile":
                flags[flag] = r.clip_id not in fail_sets[flag]
            elif side == "min":
                flags[flag] = v >= getattr(thresholds, flag)
            else:
                flags[flag] = v <= getattr(thresholds, flag)
        out.append(replace(r, flags=flags, accepted=all(flags.values())))
    return out


def derive_thresholds(calibration_records, amp_floor: float = 1e-3) -> FilterThresholds:
    """Absolute thresholds from a synchronized calibration population:
    halve the observed minima (floor them for amplitude), widen the maxima,
    and drop the alignment floors 5 points below the observed minima.

    p_sync is additionally floored above 1/3: a misaligned window whose
    shift candidates are *all* equally off scores the uniform softmax level,
    and the smallest candidate set (two fitting shifts) puts that at 1/3."""
    def col(name):
        vals = [getattr(r, name) for r in calibration_records if getattr(r, name) is not None]
        if not vals:
            raise ValueError(f"calibration population has no {name} scores")
        return min(vals), max(vals)

    pd_lo, pd_hi = col("pixel_diff")
    sd_lo, sd_hi = col("sem_diff")
    amp_lo, _ = col("max_amp")
    ia_lo, _ = col("ia_score")
    it_lo, _ = col("it_score")
    ps_lo, _ = col("p_sync")
    return FilterThresholds(
        pixel_diff_min=0.5 * pd_lo,
        pixel_diff_max=2.0 * pd_hi + 1e-6,
        sem_diff_min=0.5 * sd_lo,
        sem_diff_max=2.0 * sd_hi + 1e-6,
        amp_min=max(0.5 * amp_lo, amp_floor),
        ia_min=ia_lo - 5.0,
        it_min=it_lo - 5.0,
        p_sync_min=max(0.5 * ps_lo, 0.4),
        mode="absolute",
    )


# ---------------------------------------------------------------------------
# merging and balancing


def merge_accepted(records) -> list:
    """Union of one source's accepted [start, end) windows; sorted, disjoint,
    adjacent intervals coalesced."""
    sources = {r.source_id for r in records}
    if len(sources) > 1:
        raise ValueError(f"records span multiple sources: {sorted(sources)}")
    ivals = sorted((r.start_s, r.end_s) for r in records if r.accepted)
    merged = []
    for s, e in ivals:
        if merged and s <= merged[-1][1] + 1e-9:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def balance_categories(examples, min_count: int = 100) -> list:
    """Drop every example of a category with fewer than min_count examples."""
    counts = {}
    for ex in examples:
        counts[ex["category"]] = counts.get(ex["category"], 0) + 1
    dropped = sorted(c for c, n in counts.items() if n < min_count)
    if dropped:
        log.warning("balance: dropping %s (fewer than %d examples)", dropped, min_count)
    return [ex for ex in examples if counts[ex["category"]] >= min_count]


# ---------------------------------------------------------------------------
# pipeline


def run_curation(manifest_path, out_path, thresholds: FilterThresholds,
                 embedder: AlignmentEmbedder, syncnet: SyncClassifier,
                 cut_threshold: float = 0.2, win_s: float = WIN_S,
                 stride_s: float = STRIDE_S, min_count: int = 100,
                 shift_grid_s=SHIFT_GRID_S) -> dict:
    """Score, filter, merge, and balance a corpus manifest.

    Writes one CurationRecord per window to out_path (JSONL) plus a trailing
    summary record with per-filter rejection counts, merged segments, and
    the surviving examples. Returns the summary as a dict.
    """
    entries = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    records = []
    per_source = {}
    for entry in entries:
        pair = load_pair(entry, root)
        segs = detect_scenes(pair.video, cut_threshold)
        recs = []
        for seg in segs:
            for w0, _ in window_clips(seg, win_s, stride_s):
                window = pair.window(w0, win_s)
                recs.append(score_clip(window, embedder, syncnet,
                                        source=pair, start_s=w0,
                                        shift_grid_s=shift_grid_s))
        per_source[entry.id] = (entry, recs)
        records.extend(recs)

    records = apply_filters(records, thresholds)
    flagged = {r.clip_id: r for r in records}

    examples = []
    merged_by_source = {}
    for sid, (entry, recs) in per_source.items():
        merged = merge_accepted([flagged[r.clip_id] for r in recs])
        merged_by_source[sid] = merged
        for s, e in merged:
            examples.append({"source_id": sid, "category": entry.category,
                             "start_s": s, "end_s": e})
    kept = balance_categories(examples, min_count)

    reject_counts = {flag: 0 for flag, _, _ in FILTERS}
    for r in records:
        for flag, ok in r.flags.items():
            if not ok:
                reject_counts[flag] += 1
    summary = {
        "summary": True,
        "n_windows": len(records),
        "n_accepted_windows": sum(r.accepted for r in records),
        "rejections": reject_counts,
        "merged": merged_by_source,
        "n_examples": len(kept),
        "examples": kept,
        "rejected_sources": sorted(s for s, m in merged_by_source.items() if not m),
        "categories_kept": sorted({ex["category"] for ex in kept}),
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    return summary
