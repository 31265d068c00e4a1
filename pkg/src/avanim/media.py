"""Core audio/video data model, file I/O, and mel-spectrogram computation.

Conventions fixed here and relied on everywhere else:
  - frames are float arrays [N, H, W, 3] with values in [0, 1], stored on
    disk as 1-indexed ``frame_%05d.png`` sequences (8-bit RGB),
  - audio is float [-1, 1] mono at 16 kHz, stored as PCM16 WAV,
  - mel spectrograms use a 25 ms Hann window, 10 ms hop, 128 bins over
    0..8 kHz, natural-log energies clamped at 1e-10, centered framing
    (zero padding), so a clip of S samples yields floor(S/hop)+1 columns.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

SAMPLE_RATE = 16000
N_MELS = 128
MEL_WIN = 400  # 25 ms
MEL_HOP = 160  # 10 ms
MEL_NFFT = 1024
MEL_FLOOR = 1e-10

FRAME_PATTERN = "frame_%05d.png"
_FRAME_RE = re.compile(r"frame_(\d{5})\.png$")


class MediaFormatError(ValueError):
    """Raised for malformed on-disk media (gapped frames, wrong WAV format)."""


@dataclass
class VideoClip:
    """A video as frames [N, H, W, 3] in [0, 1] at a fixed frame rate."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be [N, H, W, 3], got {self.frames.shape}")
        if self.frames.shape[1] < 8 or self.frames.shape[2] < 8:
            raise ValueError("frame size must be at least 8x8")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.fps

    def slice_seconds(self, start_s: float, end_s: float) -> "VideoClip":
        i = int(round(start_s * self.fps))
        j = int(round(end_s * self.fps))
        if i < 0 or j > self.n_frames or j <= i:
            raise ValueError(f"slice [{start_s}, {end_s}) outside clip")
        return VideoClip(self.frames[i:j], self.fps)


@dataclass
class AudioClip:
    """Mono audio samples in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("audio must be mono (1-D samples)")
        if self.samples.size and np.abs(self.samples).max() > 1.0 + 1e-12:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def slice_seconds(self, start_s: float, end_s: float) -> "AudioClip":
        i = int(round(start_s * self.sample_rate))
        j = int(round(end_s * self.sample_rate))
        if i < 0 or j > self.samples.size or j <= i:
            raise ValueError(f"slice [{start_s}, {end_s}) outside clip")
        return AudioClip(self.samples[i:j], self.sample_rate)


@dataclass
class MelSpectrogram:
    """Log-mel energies [n_mels, T_mel]; hop_s seconds per column."""

    bins: np.ndarray
    hop_s: float = MEL_HOP / SAMPLE_RATE


@dataclass
class ClipPair:
    """A synchronized (audio, video) pair with provenance.

    onset_times_s carries ground-truth event times for synthetic clips and
    is None for real data.
    """

    audio: AudioClip
    video: VideoClip
    category: str = ""
    source_id: str = ""
    onset_times_s: list | None = None
    distractor_kind: str | None = None

    @property
    def duration_s(self) -> float:
        return self.video.duration_s

    def window(self, start_s: float, dur_s: float) -> "ClipPair":
        """Extract a synchronized sub-window (frame-grid aligned start)."""
        return ClipPair(
            audio=self.audio.slice_seconds(start_s, start_s + dur_s),
            video=self.video.slice_seconds(start_s, start_s + dur_s),
            category=self.category,
            source_id=self.source_id,
        )


# ---------------------------------------------------------------------------
# frame / wav I/O


def save_frames(frames: np.ndarray, frames_dir) -> None:
    """Write frames as 1-indexed frame_%05d.png (8-bit RGB)."""
    frames_dir = Path(frames_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames, start=1):
        arr = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(frames_dir / (FRAME_PATTERN % i))


def load_frames(frames_dir) -> np.ndarray:
    """Load a contiguous 1-indexed PNG sequence; gaps are format errors."""
    frames_dir = Path(frames_dir)
    indices = {}
    for name in os.listdir(frames_dir):
        m = _FRAME_RE.match(name)
        if m:
            indices[int(m.group(1))] = name
    if not indices:
        raise MediaFormatError(f"no frame_*.png files in {frames_dir}")
    n = max(indices)
    for i in range(1, n + 1):
        if i not in indices:
            raise MediaFormatError(f"gap at index {i} in frame sequence {frames_dir}")
    frames = []
    for i in range(1, n + 1):
        with Image.open(frames_dir / indices[i]) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
    return np.stack(frames)


def save_wav(audio: AudioClip, wav_path) -> None:
    """Write PCM16 mono WAV (round-to-nearest quantization)."""
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(wav_path), audio.sample_rate, pcm)


def load_wav(wav_path) -> AudioClip:
    rate, data = wavfile.read(str(wav_path))
    if data.ndim != 1:
        raise MediaFormatError(f"{wav_path}: stereo WAV not supported (mono required)")
    if rate != SAMPLE_RATE:
        raise MediaFormatError(
            f"{wav_path}: sample rate {rate} != {SAMPLE_RATE} (no resampling is performed)"
        )
    if data.dtype != np.int16:
        raise MediaFormatError(f"{wav_path}: expected PCM16, got {data.dtype}")
    return AudioClip(data.astype(np.float64) / 32767.0, rate)


def save_pair(pair: ClipPair, frames_dir, wav_path) -> None:
    save_frames(pair.video.frames, frames_dir)
    save_wav(pair.audio, wav_path)


def load_clip(frames_dir, wav_path, fps: float, category: str = "", source_id: str = "") -> ClipPair:
    """Load a (frames, wav) pair, truncating the longer modality to the shorter."""
    frames = load_frames(frames_dir)
    audio = load_wav(wav_path)
    video_dur = frames.shape[0] / fps
    dur = min(video_dur, audio.duration_s)
    n = int(round(dur * fps))
    s = int(round(dur * SAMPLE_RATE))
    return ClipPair(
        audio=AudioClip(audio.samples[:s]),
        video=VideoClip(frames[:n], fps),
        category=category,
        source_id=source_id or str(frames_dir),
    )


# ---------------------------------------------------------------------------
# manifests (JSONL, one clip record per line)


@dataclass
class ManifestEntry:
    id: str
    frames_dir: str
    wav: str
    fps: float
    duration_s: float
    category: str
    onsets: list | None = None
    distractor_kind: str | None = None
    shift_s: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {
            "id": self.id,
            "frames_dir": self.frames_dir,
            "wav": self.wav,
            "fps": self.fps,
            "duration_s": self.duration_s,
            "category": self.category,
        }
        if self.onsets is not None:
            rec["onsets"] = self.onsets
        if self.distractor_kind is not None:
            rec["distractor_kind"] = self.distractor_kind
        if self.shift_s is not None:
            rec["shift_s"] = self.shift_s
        rec.update(self.extra)
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "ManifestEntry":
        known = {"id", "frames_dir", "wav", "fps", "duration_s", "category",
                 "onsets", "distractor_kind", "shift_s"}
        return cls(
            id=rec["id"],
            frames_dir=rec["frames_dir"],
            wav=rec.get("wav", ""),
            fps=float(rec["fps"]),
            duration_s=float(rec["duration_s"]),
            category=rec.get("category", ""),
            onsets=rec.get("onsets"),
            distractor_kind=rec.get("distractor_kind"),
            shift_s=rec.get("shift_s"),
            extra={k: v for k, v in rec.items() if k not in known},
        )


def write_manifest(entries, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for e in entries:
            f.write(e.to_json() + "\n")


def read_manifest(path) -> list:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(ManifestEntry.from_record(json.loads(line)))
    return entries


def load_pair(entry: ManifestEntry, root) -> ClipPair:
    """Load the ClipPair behind a manifest entry (paths relative to root)."""
    root = Path(root)
    pair = load_clip(root / entry.frames_dir, root / entry.wav, entry.fps,
                     category=entry.category, source_id=entry.id)
    pair.onset_times_s = entry.onsets
    pair.distractor_kind = entry.distractor_kind
    return pair


def load_pairs(manifest_path, include_distractors: bool = True) -> list:
    """Load every clip in a manifest (paths resolved against its directory)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    pairs = []
    for entry in read_manifest(manifest_path):
        if not include_distractors and entry.distractor_kind is not None:
            continue
        pairs.append(load_pair(entry, root))
    return pairs


# ---------------------------------------------------------------------------
# mel spectrogram


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = MEL_NFFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filterbank [n_mels, n_fft//2 + 1] over 0..sr/2."""
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, fft_freqs.size))
    for i in range(n_mels):
        lo, ctr, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (fft_freqs - lo) / (ctr - lo)
        falling = (hi - fft_freqs) / (hi - ctr)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_frequencies(n_mels: int = N_MELS, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Center frequency (Hz) of each mel bin."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_mels + 2))
    return edges[1:-1]


_FILTERBANK_CACHE: dict = {}


def mel_spectrogram(audio: AudioClip) -> MelSpectrogram:
    """128-bin log-mel spectrogram; deterministic for fixed input.

    Columns are centered at t = i * hop (zero padding at the edges), giving
    floor(S / hop) + 1 columns for S samples.
    """
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"sample rate must be {SAMPLE_RATE}")
    x = audio.samples
    if x.size == 0:
        raise ValueError("empty audio")
    key = (N_MELS, MEL_NFFT, audio.sample_rate)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank(*key)
    fb = _FILTERBANK_CACHE[key]

    n_cols = x.size // MEL_HOP + 1
    pad = MEL_WIN // 2
    right = max(0, (n_cols - 1) * MEL_HOP + MEL_WIN - (x.size + pad))
    xp = np.pad(x, (pad, right))
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(MEL_WIN) / MEL_WIN)
    idx = np.arange(n_cols)[:, None] * MEL_HOP + np.arange(MEL_WIN)[None, :]
    frames = xp[idx] * window
    power = np.abs(np.fft.rfft(frames, n=MEL_NFFT, axis=1)) ** 2
    mel = power @ fb.T
    bins = np.log(np.maximum(mel, MEL_FLOOR)).T
    return MelSpectrogram(bins=bins, hop_s=MEL_HOP / SAMPLE_RATE)
