"""Contrastive audio-video synchronization classifier.

Twin towers — a 2-D conv stack over the log-mel spectrogram and a 3-D conv
stack over the frames — each produce an embedding; the sync score is

    phi = exp(log_gain) * cosine(z_audio, z_video)

an unbounded scalar, higher = more synchronized. Training maximizes the
softmax probability of the aligned pair against temporally shifted videos
from the same clip (circular shifts on the 0.5 s grid), with temperature
tau; scoring elsewhere always uses raw phi (tau = 1).

Audio is peak-normalized before the mel transform, so phi is exactly
invariant to amplitude scaling. Towers consume exactly 2.0 s; longer
inputs are averaged over 2.0 s subwindows at 0.5 s stride.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .media import AudioClip, VideoClip, read_manifest, load_pair
from .rng import child_seed, numpy_rng
from .tensors import frames_input, mel_input

WIN_S = 2.0
SUB_STRIDE_S = 0.5

N_FRAMES = 12  # 2 s at 6 fps
N_MEL_COLS = 201  # 2 s at 10 ms hop


def subwindow_starts(duration_s: float, win_s: float = WIN_S, stride_s: float = SUB_STRIDE_S) -> list:
    """Start times of win_s subwindows at stride_s, final one flush with the end."""
    if duration_s < win_s - 1e-9:
        raise ValueError(f"clip of {duration_s:.2f} s is shorter than {win_s} s")
    starts = []
    s = 0.0
    while s + win_s <= duration_s + 1e-9:
        starts.append(round(s, 6))
        s += stride_s
    if starts[-1] + win_s < duration_s - 1e-9:
        starts.append(round(duration_s - win_s, 6))
    return starts


# ---------------------------------------------------------------------------
# model


def _gn(ch):
    return nn.GroupNorm(min(8, ch), ch)


class AudioTower(nn.Module):
    def __init__(self, d_emb: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, 8, 5, stride=(2, 4), padding=2), _gn(8), nn.SiLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), _gn(16), nn.SiLU(),
            nn.Conv2d(16, 24, 3, stride=2, padding=1), _gn(24), nn.SiLU(),
        )
        # [24, 16, 13] for a 2 s mel -> mean over freq -> flatten
        self.out = nn.Linear(24 * 13, d_emb)

    def forward(self, mel):  # [B, 1, 128, 201]
        h = self.conv(mel)
        h = h.mean(dim=2)  # pool frequency, keep time
        return self.out(h.flatten(1))


class VideoTower(nn.Module):
    def __init__(self, d_emb: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv3d(3, 8, 3, stride=(1, 2, 2), padding=1), _gn(8), nn.SiLU(),
            nn.Conv3d(8, 16, 3, stride=(1, 2, 2), padding=1), _gn(16), nn.SiLU(),
            nn.Conv3d(16, 24, (3, 1, 1), stride=1, padding=(1, 0, 0)), _gn(24), nn.SiLU(),
        )
        # [24, 12, 8, 8] -> spatial mean -> flatten; per-frame slots keep timing
        self.out = nn.Linear(24 * N_FRAMES, d_emb)

    def forward(self, frames):  # [B, 3, 12, 32, 32]
        h = self.conv(frames)
        h = h.mean(dim=(3, 4))
        return self.out(h.flatten(1))


class SyncClassifier(nn.Module):
    def __init__(self, d_emb: int = 64):
        super().__init__()
        self.d_emb = d_emb
        self.audio_tower = AudioTower(d_emb)
        self.video_tower = VideoTower(d_emb)
        # gain starts tiny so initial phi ~ 0 and the training softmax is
        # near-uniform; it grows during training to sharpen the contrast
        self.log_gain = nn.Parameter(torch.tensor(math.log(0.07)))

    def embed_audio(self, mel):
        return F.normalize(self.audio_tower(mel), dim=-1, eps=1e-8)

    def embed_video(self, frames):
        return F.normalize(self.video_tower(frames), dim=-1, eps=1e-8)

    def phi_pairs(self, mel, frames):
        """Row-wise phi for matched batches [B, ...] -> [B]."""
        za = self.embed_audio(mel)
        zv = self.embed_video(frames)
        return torch.exp(self.log_gain) * (za * zv).sum(-1)

    def phi_matrix(self, mel, frames):
        """[A, ...] x [V, ...] -> [A, V] scores."""
        za = self.embed_audio(mel)
        zv = self.embed_video(frames)
        return torch.exp(self.log_gain) * (za @ zv.T)


def new_syncnet(seed: int = 0, d_emb: int = 64) -> SyncClassifier:
    torch.manual_seed(child_seed(seed, "syncnet-init"))
    return SyncClassifier(d_emb=d_emb)


# ---------------------------------------------------------------------------
# scoring API


def _check_durations(audio: AudioClip, video: VideoClip):
    if abs(audio.duration_s - video.duration_s) > 0.5 / video.fps:
        raise ValueError(
            f"duration mismatch: audio {audio.duration_s:.3f} s vs video {video.duration_s:.3f} s"
        )


@torch.no_grad()
def sync_score(audio: AudioClip, video: VideoClip, model: SyncClassifier) -> float:
    """Unbounded av-sync score phi; mean over 2 s subwindows if input is longer."""
    _check_durations(audio, video)
    model.eval()
    mels, clips = [], []
    for s in subwindow_starts(video.duration_s):
        mels.append(mel_input(audio.slice_seconds(s, s + WIN_S)))
        clips.append(frames_input(video.slice_seconds(s, s + WIN_S).frames))
    phi = model.phi_pairs(torch.stack(mels), torch.stack(clips))
    return float(phi.mean())


@torch.no_grad()
def video_features(video: VideoClip, model: SyncClassifier) -> np.ndarray:
    """Video-tower features (pre-normalization), subwindow-averaged; for FVD."""
    model.eval()
    feats = []
    for s in subwindow_starts(video.duration_s):
        f = frames_input(video.slice_seconds(s, s + WIN_S).frames)
        feats.append(model.video_tower(f[None])[0])
    return torch.stack(feats).mean(0).numpy().astype(np.float64)


def softmax_probs(phis, tau: float) -> np.ndarray:
    """Stable softmax of phi/tau; pure function shared by every P_Sync path."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = np.asarray(phis, dtype=np.float64) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def p_sync(anchor_audio: AudioClip, candidate_videos: list, model: SyncClassifier, tau: float = 1.0) -> np.ndarray:
    """Eq.-style sync probability over candidate videos (entry 0 = aligned)."""
    if not candidate_videos:
        raise ValueError("candidate list is empty")
    phis = [sync_score(anchor_audio, v, model) for v in candidate_videos]
    return softmax_probs(phis, tau)


# ---------------------------------------------------------------------------
# training


@dataclass
class SyncTrainConfig:
    # tau = 1 trains on raw phi logits, forcing separation at a scale the
    # downstream sigmoid-of-phi-difference metrics can actually see; small
    # temperatures let training converge with phi gaps of ~0.2 that compress
    # every relative sync score toward 50
    tau: float = 1.0
    shift_grid_s: tuple = (0.5, 1.0, 1.5, -0.5, -1.0, -1.5)
    batch_size: int = 6
    lr: float = 2e-3
    steps: int = 1500
    seed: int = 0
    d_emb: int = 64

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if any(s == 0 for s in self.shift_grid_s):
            raise ValueError("shift grid must not contain 0")


class _Corpus:
    """In-memory float32 view of the synchronized clips in a manifest."""

    def __init__(self, manifest_path, win_s: float = WIN_S):
        manifest_path = Path(manifest_path)
        root = manifest_path.parent
        self.clips = []
        for entry in read_manifest(manifest_path):
            if entry.distractor_kind is not None:
                continue
            if entry.duration_s < win_s:
                continue
            pair = load_pair(entry, root)
            self.clips.append(pair)
        if not self.clips:
            raise ValueError("no valid training pairs in manifest")


def _rolled_crop(frames: np.ndarray, start_f: int, n: int, shift_f: int) -> np.ndarray:
    idx = (np.arange(start_f, start_f + n) + shift_f) % frames.shape[0]
    return frames[idx]


def _sync_batch(corpus: _Corpus, cfg: SyncTrainConfig, rng: np.random.Generator):
    """One training batch: mels [B,...], candidate frame stacks [B,(1+S),...]."""
    fps = corpus.clips[0].video.fps
    n = int(round(WIN_S * fps))
    mels, cands = [], []
    for _ in range(cfg.batch_size):
        pair = corpus.clips[int(rng.integers(len(corpus.clips)))]
        n_total = pair.video.n_frames
        grid = np.arange(0.0, pair.duration_s - WIN_S + 1e-9, SUB_STRIDE_S)
        start_s = float(grid[int(rng.integers(grid.size))])
        start_f = int(round(start_s * fps))
        mels.append(mel_input(pair.audio.slice_seconds(start_s, start_s + WIN_S)))
        stack = [frames_input(_rolled_crop(pair.video.frames, start_f, n, 0))]
        for s in cfg.shift_grid_s:
            shift_f = int(round(s * fps)) % n_total
            stack.append(frames_input(_rolled_crop(pair.video.frames, start_f, n, shift_f)))
        cands.append(torch.stack(stack))
    return torch.stack(mels), torch.stack(cands)


def contrastive_loss(model: SyncClassifier, mels, cands, tau: float):
    """-log P_Sync of the aligned candidate (index 0), softmax over phi/tau."""
    b, k = cands.shape[0], cands.shape[1]
    za = model.embed_audio(mels)  # [B, d]
    zv = model.embed_video(cands.flatten(0, 1)).view(b, k, -1)
    phi = torch.exp(model.log_gain) * torch.einsum("bd,bkd->bk", za, zv)
    return F.cross_entropy(phi / tau, torch.zeros(b, dtype=torch.long))


def train_sync(manifest_path, cfg: SyncTrainConfig, out=None):
    """Train the sync classifier; returns (model, loss_curve). Saves if out given."""
    torch.set_num_threads(1)
    corpus = _Corpus(manifest_path)
    model = new_syncnet(cfg.seed, cfg.d_emb)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    curve = []
    for step in range(cfg.steps):
        rng = numpy_rng(cfg.seed, f"sync-step{step}")
        mels, cands = _sync_batch(corpus, cfg, rng)
        loss = contrastive_loss(model, mels, cands, cfg.tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    if out is not None:
        save_syncnet(out, model, cfg, curve)
    return model, curve


def save_syncnet(path, model: SyncClassifier, cfg: SyncTrainConfig, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "syncnet",
            "config": asdict(cfg),
            "state_dict": model.state_dict(),
            "loss_curve": curve,
        },
        path,
    )


def load_syncnet(path) -> SyncClassifier:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "syncnet":
        raise ValueError(f"{path} is not a sync classifier checkpoint")
    model = SyncClassifier(d_emb=ckpt["config"]["d_emb"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# evaluation


def fitting_shifts(start_s: float, win_s: float, duration_s: float, grid) -> list:
    """Shifts from the grid whose shifted window stays inside [0, duration]."""
    out = []
    for s in grid:
        if start_s + s >= -1e-9 and start_s + s + win_s <= duration_s + 1e-9:
            out.append(s)
    return out


@torch.no_grad()
def sync_accuracy(pairs, model: SyncClassifier, shift_grid_s=(0.5, 1.0, 1.5, -0.5, -1.0, -1.5),
                  crop_stride_s: float = 1.0) -> float:
    """Pairwise aligned-vs-shifted accuracy over non-circular crops."""
    model.eval()
    wins, total = 0, 0
    for pair in pairs:
        starts = np.arange(0.0, pair.duration_s - WIN_S + 1e-9, crop_stride_s)
        for start_s in starts:
            start_s = float(start_s)
            a = pair.audio.slice_seconds(start_s, start_s + WIN_S)
            phi_aligned = sync_score(a, pair.video.slice_seconds(start_s, start_s + WIN_S), model)
            for s in fitting_shifts(start_s, WIN_S, pair.duration_s, shift_grid_s):
                v = pair.video.slice_seconds(start_s + s, start_s + s + WIN_S)
                phi_shift = sync_score(a, v, model)
                wins += int(phi_aligned > phi_shift)
                total += 1
    if total == 0:
        raise ValueError("no evaluation crops available")
    return wins / total
