"""Numpy <-> torch conversion helpers shared by every learned module.

Fixes the input conventions once: audio is peak-normalized before the mel
transform (so all scores are amplitude-invariant by construction), log-mel
bins are affinely squashed to roughly [-1, 1], and frames map [0,1] ->
[-1,1] channel-first.
"""

from __future__ import annotations

import numpy as np
import torch

from .media import AudioClip, mel_spectrogram

MEL_SHIFT = 11.5  # centers the log-mel range (~[-23, 0]) near [-1, 1]


def normalize_peak(samples: np.ndarray) -> np.ndarray:
    m = np.abs(samples).max() if samples.size else 0.0
    return samples / m if m > 0 else samples


def normalize_mel(bins: np.ndarray) -> np.ndarray:
    return (bins + MEL_SHIFT) / MEL_SHIFT


def mel_input(audio: AudioClip) -> torch.Tensor:
    """Peak-normalized log-mel as [1, 128, T] float32."""
    x = normalize_peak(audio.samples)
    mel = mel_spectrogram(AudioClip(x, audio.sample_rate)).bins
    return torch.from_numpy(normalize_mel(mel).astype(np.float32))[None]


def frames_input(frames: np.ndarray) -> torch.Tensor:
    """Frames [N, H, W, 3] in [0,1] -> [3, N, H, W] float32 in [-1, 1]."""
    t = torch.from_numpy((frames * 2.0 - 1.0).astype(np.float32))
    return t.permute(3, 0, 1, 2).contiguous()


def frame_input(frame: np.ndarray) -> torch.Tensor:
    """One frame [H, W, 3] in [0,1] -> [3, H, W] float32 in [-1, 1]."""
    t = torch.from_numpy((frame * 2.0 - 1.0).astype(np.float32))
    return t.permute(2, 0, 1).contiguous()
