"""Synchronization and alignment metrics.

  RelSync  = 100 * exp(phi_gen) / (exp(phi_ref) + exp(phi_gen))
  P_Align  = mean over generated frames i >= 2 of
             exp(IA_i) / (exp(IA_i) + exp(IA_first)),  IA = raw cosine
  AlignSync = P_Align * RelSync
  IA / IT  = 100 * mean frame<->audio / frame<->text cosine
  FID / FVD = Frechet distance over pluggable feature sets

RelSync/AlignSync/IA/IT are reported on the x100 scale; the exponentials
always see raw phi / raw cosines. `evaluate` pairs a prediction manifest
with a reference manifest by id; references longer than 2 s expand into 3
uniformly spaced 2 s windows with ids "<id>#0..2".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.special import expit

from .embedder import AlignmentEmbedder
from .media import AudioClip, VideoClip, load_frames, load_pair, read_manifest
from .syncnet import SyncClassifier, sync_score, video_features
from .synth import text_prompt
from .tensors import frame_input, mel_input

WIN_S = 2.0


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


# ---------------------------------------------------------------------------
# core scores


def rel_sync(audio: AudioClip, generated: VideoClip, reference: VideoClip,
             syncnet: SyncClassifier) -> float:
    """Relative sync of generated vs. reference video, x100 scale."""
    if abs(generated.duration_s - reference.duration_s) > 0.5 / reference.fps:
        raise ValueError("generated/reference duration mismatch")
    phi_gen = sync_score(audio, generated, syncnet)
    phi_ref = sync_score(audio, reference, syncnet)
    return 100.0 * float(expit(phi_gen - phi_ref))


@torch.no_grad()
def _frame_audio_cosines(audio: AudioClip, frames: np.ndarray,
                         embedder: AlignmentEmbedder) -> np.ndarray:
    embedder.eval()
    za = embedder.embed_audio(mel_input(audio)[None])[0]
    zi = embedder.embed_image(torch.stack([frame_input(f) for f in frames]))
    return (zi @ za).numpy().astype(np.float64)


def p_align(audio: AudioClip, generated: VideoClip, first_frame: np.ndarray,
            embedder: AlignmentEmbedder) -> float:
    """Frame-level alignment probability vs. the input frame (Eq.-style pairwise)."""
    b = generated.n_frames
    if b < 2:
        raise ValueError("generated video needs at least 2 frames")
    ia = _frame_audio_cosines(audio, generated.frames, embedder)
    ia_first = _frame_audio_cosines(audio, first_frame[None], embedder)[0]
    return _mean(float(expit(ia_i - ia_first)) for ia_i in ia[1:])


def align_sync(audio: AudioClip, generated: VideoClip, reference: VideoClip,
               first_frame: np.ndarray, syncnet: SyncClassifier,
               embedder: AlignmentEmbedder) -> float:
    return p_align(audio, generated, first_frame, embedder) * rel_sync(
        audio, generated, reference, syncnet
    )


def ia_score(audio: AudioClip, video: VideoClip, embedder: AlignmentEmbedder) -> float:
    """100 * mean frame<->audio cosine similarity."""
    return 100.0 * _mean(_frame_audio_cosines(audio, video.frames, embedder))


@torch.no_grad()
def it_score(text: str, video: VideoClip, embedder: AlignmentEmbedder) -> float:
    """100 * mean frame<->text cosine similarity."""
    embedder.eval()
    zt = embedder.embed_text([text])[0]
    zi = embedder.embed_image(torch.stack([frame_input(f) for f in video.frames]))
    return 100.0 * _mean((zi @ zt).numpy().astype(np.float64))


# ---------------------------------------------------------------------------
# Frechet distance


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _fit_gaussian(feats: np.ndarray, eps: float):
    n, d = feats.shape
    mu = feats.mean(axis=0)
    if n == 1:
        cov = np.zeros((d, d))
    else:
        cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    if n < d + 1:
        cov = cov + eps * np.eye(d)
    return mu, cov


def frechet_distance(feats_a, feats_b, eps: float = 1e-6) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)); features are [n, d]."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("feature set is empty")
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    mu_a, cov_a = _fit_gaussian(a, eps)
    mu_b, cov_b = _fit_gaussian(b, eps)
    s_a = _sqrtm_psd(cov_a)
    inner = s_a @ cov_b @ s_a
    w = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    tr_sqrt = np.sqrt(w).sum()
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(fd, 0.0)  # roundoff can leave a tiny negative on identical sets


# ---------------------------------------------------------------------------
# evaluation over manifests


@dataclass
class MetricReport:
    rel_sync: float
    align_sync: float
    p_align: float
    ia: float
    it: float
    fid: float
    fvd: float
    b: int

    def as_dict(self) -> dict:
        return {
            "rel_sync": self.rel_sync,
            "align_sync": self.align_sync,
            "p_align": self.p_align,
            "ia": self.ia,
            "it": self.it,
            "fid": self.fid,
            "fvd": self.fvd,
            "b": self.b,
        }


def reference_windows(entry) -> list:
    """(window_id, start_s) pairs: one exact 2 s window, or 3 uniform ones."""
    if abs(entry.duration_s - WIN_S) <= 0.5 / entry.fps:
        return [(entry.id, 0.0)]
    if entry.duration_s < WIN_S:
        raise ValueError(f"reference {entry.id} shorter than {WIN_S} s")
    starts = []
    for j in range(3):
        raw = j * (entry.duration_s - WIN_S) / 2.0
        starts.append((f"{entry.id}#{j}", round(raw * entry.fps) / entry.fps))
    return starts


def _load_video(entry, root) -> VideoClip:
    return VideoClip(load_frames(Path(root) / entry.frames_dir), entry.fps)


def evaluate(pred_manifest, ref_manifest, syncnet: SyncClassifier,
             embedder: AlignmentEmbedder) -> dict:
    """Metric table {overall: ..., per_category: {...}} as MetricReports."""
    pred_manifest, ref_manifest = Path(pred_manifest), Path(ref_manifest)
    pred_entries = read_manifest(pred_manifest)
    ref_entries = read_manifest(ref_manifest)
    if not pred_entries:
        raise ValueError("empty prediction manifest")
    pred_by_id = {e.id: e for e in pred_entries}
    expected = {}
    for entry in ref_entries:
        for window_id, start_s in reference_windows(entry):
            expected[window_id] = (entry, start_s)
    missing = sorted(set(expected) - set(pred_by_id))
    extra = sorted(set(pred_by_id) - set(expected))
    if missing or extra:
        raise ValueError(f"unmatched ids: missing={missing} extra={extra}")

    per_example = {}  # ref id -> list of per-window metric dicts
    feats = {"fid_gen": [], "fid_ref": [], "fvd_gen": [], "fvd_ref": []}
    cat_of = {}
    ref_cache = {}
    b_frames = None
    for window_id, (entry, start_s) in sorted(expected.items()):
        if entry.id not in ref_cache:
            ref_cache[entry.id] = load_pair(entry, ref_manifest.parent)
        window = ref_cache[entry.id].window(start_s, WIN_S)
        gen = _load_video(pred_by_id[window_id], pred_manifest.parent)
        if gen.n_frames != window.video.n_frames:
            raise ValueError(f"{window_id}: prediction has {gen.n_frames} frames, "
                             f"reference window has {window.video.n_frames}")
        b_frames = gen.n_frames
        audio = window.audio
        rel = rel_sync(audio, gen, window.video, syncnet)
        pa = p_align(audio, gen, gen.frames[0], embedder)
        row = {
            "rel_sync": rel,
            "p_align": pa,
            "align_sync": pa * rel,
            "ia": ia_score(audio, gen, embedder),
            "it": it_score(text_prompt(entry.category), gen, embedder),
        }
        per_example.setdefault(entry.id, []).append(row)
        cat_of[entry.id] = entry.category

        with torch.no_grad():
            embedder.eval()
            zi_gen = embedder.embed_image(
                torch.stack([frame_input(f) for f in gen.frames])).numpy()
            zi_ref = embedder.embed_image(
                torch.stack([frame_input(f) for f in window.video.frames])).numpy()
        feats["fid_gen"].append((entry.category, zi_gen))
        feats["fid_ref"].append((entry.category, zi_ref))
        feats["fvd_gen"].append((entry.category, video_features(gen, syncnet)[None]))
        feats["fvd_ref"].append((entry.category, video_features(window.video, syncnet)[None]))

    # average windows per example first, then examples
    example_rows = {
        rid: {k: _mean(r[k] for r in rows) for k in rows[0]}
        for rid, rows in per_example.items()
    }

    def _report(ids, cat=None) -> MetricReport:
        rows = [example_rows[r] for r in ids]
        def stack(key):
            sel = [f for c, f in feats[key] if cat is None or c == cat]
            return np.concatenate(sel, axis=0)
        return MetricReport(
            rel_sync=_mean(r["rel_sync"] for r in rows),
            align_sync=_mean(r["align_sync"] for r in rows),
            p_align=_mean(r["p_align"] for r in rows),
            ia=_mean(r["ia"] for r in rows),
            it=_mean(r["it"] for r in rows),
            fid=frechet_distance(stack("fid_gen"), stack("fid_ref")),
            fvd=frechet_distance(stack("fvd_gen"), stack("fvd_ref")),
            b=b_frames,
        )

    categories = sorted(set(cat_of.values()))
    return {
        "overall": _report(sorted(example_rows)),
        "per_category": {
            c: _report(sorted(r for r in example_rows if cat_of[r] == c), cat=c)
            for c in categories
        },
    }
