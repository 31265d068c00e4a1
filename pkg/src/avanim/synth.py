"""Procedural synthetic audio-video corpus.

Each synchronized clip shows a colored disk on a plain background that
flashes (brightness and radius pulse over 3 frames) at K in [2, 6] onset
times; the audio is a band-limited tone burst at exactly those onsets.
Categories pair a disk color with a tone frequency, so semantic alignment
(color <-> pitch) and temporal alignment (flash <-> burst) are both
learnable and verifiable against the recorded onset list.

Distractor clips are static (frozen video), silent (zero audio), or
"shifted" (audio re-rendered at onsets displaced by >= 0.5 s), flagged in
the manifest for curation tests.

Onsets are >= 0.5 s apart and no onset-free span (including clip edges)
exceeds 2.9 s, so every 3 s curation window of a synchronized clip
contains at least one audio-visual event.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .media import (
    SAMPLE_RATE,
    AudioClip,
    ClipPair,
    ManifestEntry,
    VideoClip,
    save_pair,
    write_manifest,
)
from .rng import numpy_rng

FPS = 6.0
SIZE = 32

# category -> (disk RGB, tone frequency Hz)
CATEGORIES = {
    "red_330": ((0.92, 0.18, 0.12), 330.0),
    "green_440": ((0.15, 0.82, 0.20), 440.0),
    "blue_550": ((0.16, 0.32, 0.94), 550.0),
    "yellow_660": ((0.93, 0.86, 0.14), 660.0),
    "magenta_880": ((0.88, 0.15, 0.83), 880.0),
}

FLASH_PROFILE = (1.0, 0.55, 0.2)  # flash decay over 3 frames from an onset
BASE_RADIUS, FLASH_RADIUS = 5.0, 9.0
BASE_BRIGHT, FLASH_BRIGHT = 0.55, 1.0
BURST_DUR_S = 0.4
MIN_SEP_S = 0.5  # minimum distance between onsets
MAX_GAP_S = 2.9  # maximum onset-free span, clip edges included


def text_prompt(category: str) -> str:
    """Natural-language prompt for a category, used for text conditioning."""
    color, freq = category.split("_")
    return f"{color} disk flashing with {freq} hz tone"


# ---------------------------------------------------------------------------
# rendering


def render_disk_frame(size, color, radius, brightness, center, bg) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
    mask = np.clip(radius + 0.5 - dist, 0.0, 1.0)  # 1 px antialiased edge
    frame = np.empty((size, size, 3))
    for c in range(3):
        frame[..., c] = bg + mask * (brightness * color[c] - bg)
    return np.clip(frame, 0.0, 1.0)


def flash_signal(n_frames: int, onset_frames) -> np.ndarray:
    """Per-frame flash intensity in [0, 1] from the onset list."""
    flash = np.zeros(n_frames)
    for k in onset_frames:
        for j, w in enumerate(FLASH_PROFILE):
            if 0 <= k + j < n_frames:
                flash[k + j] = max(flash[k + j], w)
    return flash


def render_video(n_frames, onset_frames, color, center, bg, size=SIZE) -> np.ndarray:
    flash = flash_signal(n_frames, onset_frames)
    frames = [
        render_disk_frame(
            size,
            color,
            BASE_RADIUS + f * (FLASH_RADIUS - BASE_RADIUS),
            BASE_BRIGHT + f * (FLASH_BRIGHT - BASE_BRIGHT),
            center,
            bg,
        )
        for f in flash
    ]
    return np.stack(frames)


def tone_burst(freq: float, dur_s: float = BURST_DUR_S, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Short two-harmonic tone with fast attack and exponential decay."""
    t = np.arange(int(round(dur_s * sr))) / sr
    env = np.minimum(t / 0.005, 1.0) * np.exp(-t / 0.06)
    wave = np.sin(2 * np.pi * freq * t) + 0.4 * np.sin(4 * np.pi * freq * t)
    return 0.65 * env * wave


def render_audio(duration_s, onset_times, freq, sr: int = SAMPLE_RATE) -> np.ndarray:
    x = np.zeros(int(round(duration_s * sr)))
    burst = tone_burst(freq, sr=sr)
    for o in onset_times:
        i = int(round(o * sr))
        n = min(burst.size, x.size - i)
        if n > 0:
            x[i : i + n] += burst[:n]
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# onset layout


def sample_onset_frames(rng: np.random.Generator, n_frames: int, k: int) -> list:
    """k onset frame indices: >=3 frames apart, no gap (edges included) >17 frames."""
    min_sep = int(round(MIN_SEP_S * FPS))
    max_gap = int(MAX_GAP_S * FPS)
    hi = n_frames - min_sep  # leave room for the flash/burst tail
    for _ in range(20000):
        idx = np.sort(rng.choice(hi + 1, size=k, replace=False))
        if idx[0] > max_gap or (n_frames - idx[-1]) > max_gap:
            continue
        if k > 1:
            d = np.diff(idx)
            if d.min() < min_sep or d.max() > max_gap:
                continue
        return [int(i) for i in idx]
    return [int(i) for i in np.round(np.linspace(0, hi, k)).astype(int)]


def sample_layout(rng: np.random.Generator, dur_min=4.0, dur_max=10.0):
    """Pick a duration on the 0.5 s grid plus a feasible onset layout."""
    grid = np.arange(dur_min, dur_max + 1e-9, 0.5)
    dur = float(rng.choice(grid))
    n_frames = int(round(dur * FPS))
    k_min = max(2, int(np.ceil(n_frames / (MAX_GAP_S * FPS) - 1.0)))
    k = int(rng.integers(k_min, 7))
    onset_frames = sample_onset_frames(rng, n_frames, k)
    return dur, onset_frames


def _circular_min_dist(times_a, times_b, period: float) -> float:
    best = period
    for a in times_a:
        for b in times_b:
            d = abs(a - b) % period
            best = min(best, min(d, period - d))
    return best


def shifted_onsets(rng, onsets, duration_s, shift_choices_s=(1.0, 1.5)) -> tuple:
    """Displace all onsets by one shift (mod duration), avoiding accidental
    re-alignment: keeps every shifted onset >= 0.4 s from every original one."""
    cands = []
    for s in shift_choices_s:
        cands.extend([s, -s])
    order = list(rng.permutation(len(cands)))
    best, best_d = None, -1.0
    for j in order:
        s = cands[j]
        moved = sorted((o + s) % duration_s for o in onsets)
        d = _circular_min_dist(moved, onsets, duration_s)
        if d >= 0.4:
            return moved, float(s)
        if d > best_d:
            best, best_d = (moved, float(s)), d
    return best


# ---------------------------------------------------------------------------
# clip + corpus assembly


def make_pair(
    rng: np.random.Generator,
    category: str,
    distractor_kind: str | None = None,
    duration_s: float | None = None,
    dur_min: float = 4.0,
    dur_max: float = 10.0,
    shift_choices_s=(1.0, 1.5),
    size: int = SIZE,
) -> tuple:
    """Build one ClipPair; returns (pair, shift_s) with shift_s None unless shifted."""
    color, freq = CATEGORIES[category]
    if duration_s is None:
        duration_s, onset_frames = sample_layout(rng, dur_min, dur_max)
    else:
        n_frames = int(round(duration_s * FPS))
        k_min = max(2, int(np.ceil(n_frames / (MAX_GAP_S * FPS) - 1.0)))
        k = int(rng.integers(k_min, 7))
        onset_frames = sample_onset_frames(rng, n_frames, k)
    n_frames = int(round(duration_s * FPS))
    onsets = [i / FPS for i in onset_frames]
    center = (size - 1) / 2.0 + rng.uniform(-3.0, 3.0, size=2)
    bg = float(rng.uniform(0.03, 0.10))

    frames = render_video(n_frames, onset_frames, color, center, bg, size=size)
    audio_onsets, shift_s = onsets, None
    if distractor_kind == "shifted":
        audio_onsets, shift_s = shifted_onsets(rng, onsets, duration_s, shift_choices_s)
    samples = render_audio(duration_s, audio_onsets, freq)
    if distractor_kind == "static":
        frames = np.repeat(frames[:1], n_frames, axis=0)
    elif distractor_kind == "silent":
        samples = np.zeros_like(samples)

    pair = ClipPair(
        audio=AudioClip(samples),
        video=VideoClip(frames, FPS),
        category=category,
        onset_times_s=onsets,
        distractor_kind=distractor_kind,
    )
    return pair, shift_s


def synth_corpus(
    n: int,
    seed: int,
    out,
    distractor_frac: float = 0.0,
    dur_min: float = 4.0,
    dur_max: float = 10.0,
    shift_choices_s=(1.0, 1.5),
    categories=None,
) -> Path:
    """Write n clips + manifest.jsonl under `out`; returns the manifest path.

    Categories are assigned round-robin; round(distractor_frac * n) clips are
    replaced by distractors cycling static/silent/shifted.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out)
    cats = list(categories or CATEGORIES)
    n_dis = int(round(distractor_frac * n))
    dis_idx = {}
    if n_dis:
        chosen = numpy_rng(seed, "distractors").choice(n, size=n_dis, replace=False)
        for j, i in enumerate(sorted(int(v) for v in chosen)):
            dis_idx[i] = ("static", "silent", "shifted")[j % 3]

    entries = []
    for i in range(n):
        clip_id = f"clip{i:04d}"
        rng = numpy_rng(seed, clip_id)
        kind = dis_idx.get(i)
        pair, shift_s = make_pair(
            rng,
            cats[i % len(cats)],
            distractor_kind=kind,
            dur_min=dur_min,
            dur_max=dur_max,
            shift_choices_s=shift_choices_s,
        )
        frames_dir = f"clips/{clip_id}"
        wav = f"clips/{clip_id}.wav"
        save_pair(pair, out / frames_dir, out / wav)
        entries.append(
            ManifestEntry(
                id=clip_id,
                frames_dir=frames_dir,
                wav=wav,
                fps=FPS,
                duration_s=pair.duration_s,
                category=pair.category,
                onsets=pair.onset_times_s,
                distractor_kind=kind,
                shift_s=shift_s,
            )
        )
    manifest = out / "manifest.jsonl"
    write_manifest(entries, manifest)
    return manifest
