"""Shared image/audio/text alignment embedding space.

A small trainable stand-in for the CLIP/ImageBind spaces: an image encoder,
an audio encoder that yields one global token plus a time x frequency grid
of patch tokens, and a bag-of-words text encoder. Contrastive embeddings
are unit-normalized; cosine similarities between them back the IA/IT
alignment scores, the semantic curation filter, and FID features. The audio
patch tokens double as the conditioning sequence for the diffusion model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .media import AudioClip, read_manifest, load_pair
from .rng import child_seed, numpy_rng
from .synth import text_prompt
from .tensors import frame_input, mel_input, normalize_mel

D_EMB = 48
FREQ_PATCH = 32  # mel bins per patch -> F_p = 128/32 = 4
TIME_PATCH = 17  # mel columns per patch window
TIME_STRIDE = 16  # 2 s audio (201 cols) -> T_a = 12 patch timestamps
F_P = 128 // FREQ_PATCH


def _gn(ch):
    return nn.GroupNorm(min(8, ch), ch)


def _sinusoidal(positions: torch.Tensor, d: int) -> torch.Tensor:
    """Standard sin/cos positional features, [len(positions), d]."""
    half = d // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = positions.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class AudioTokens:
    """Encoded audio: one global token plus a [T_a, F_p, d] patch grid."""

    global_token: torch.Tensor
    patches: torch.Tensor
    null_flag: bool = False

    @property
    def t_a(self) -> int:
        return self.patches.shape[0]


class ImageEncoder(nn.Module):
    def __init__(self, d: int = D_EMB):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), _gn(16), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), _gn(32), nn.SiLU(),
            nn.Conv2d(32, 48, 3, stride=2, padding=1), _gn(48), nn.SiLU(),
        )
        self.out = nn.Linear(48, d)

    def forward(self, x):  # [B, 3, H, W]
        h = self.conv(x).mean(dim=(2, 3))
        return self.out(h)


class AudioEncoder(nn.Module):
    """Mel [B, 1, 128, T] -> patch tokens [B, T_a, F_p, d] + pooled global."""

    def __init__(self, d: int = D_EMB):
        super().__init__()
        self.patch = nn.Conv2d(1, d, (FREQ_PATCH, TIME_PATCH), stride=(FREQ_PATCH, TIME_STRIDE))
        self.freq_pos = nn.Parameter(torch.zeros(F_P, d))
        self.norm = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))
        self.global_out = nn.Linear(d, d)

    def forward(self, mel):
        h = self.patch(mel)  # [B, d, F_p, T_a]
        h = h.permute(0, 3, 2, 1)  # [B, T_a, F_p, d]
        t_a = h.shape[1]
        pos_t = _sinusoidal(torch.arange(t_a), h.shape[-1])
        h = h + pos_t[None, :, None, :] + self.freq_pos[None, None]
        h = h + self.mlp(self.norm(h))
        g = self.global_out(h.mean(dim=(1, 2)))
        return h, g


class TextEncoder(nn.Module):
    """Bag-of-words over the corpus prompt vocabulary."""

    def __init__(self, vocab: list, d: int = D_EMB):
        super().__init__()
        self.vocab = {w: i for i, w in enumerate(vocab)}
        self.table = nn.Embedding(len(vocab), d)
        self.out = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))

    def token_ids(self, text: str) -> list:
        ids = [self.vocab[w] for w in text.lower().split() if w in self.vocab]
        if not ids:
            raise ValueError(f"no known words in prompt: {text!r}")
        return ids

    def forward(self, texts: list):  # list[str] -> [B, d]
        embs = []
        for t in texts:
            ids = torch.tensor(self.token_ids(t), dtype=torch.long)
            embs.append(self.table(ids).mean(0))
        return self.out(torch.stack(embs))


class AlignmentEmbedder(nn.Module):
    """Image/audio/text maps into one d-dimensional shared space."""

    def __init__(self, categories: list, d: int = D_EMB):
        super().__init__()
        self.d = d
        self.categories = list(categories)
        vocab = sorted({w for c in self.categories for w in text_prompt(c).split()})
        self.image_enc = ImageEncoder(d)
        self.audio_enc = AudioEncoder(d)
        self.text_enc = TextEncoder(vocab, d)
        self.log_tau = nn.Parameter(torch.tensor(math.log(0.07)), requires_grad=False)

    # --- contrastive (unit-norm) embeddings ---

    def embed_image(self, frames):  # [B, 3, H, W] -> [B, d]
        return F.normalize(self.image_enc(frames), dim=-1, eps=1e-8)

    def embed_audio(self, mel):  # [B, 1, 128, T] -> [B, d]
        _, g = self.audio_enc(mel)
        return F.normalize(g, dim=-1, eps=1e-8)

    def embed_text(self, texts):  # list[str] -> [B, d]
        return F.normalize(self.text_enc(texts), dim=-1, eps=1e-8)

    # --- conditioning tokens ---

    @torch.no_grad()
    def audio_tokens(self, audio: AudioClip) -> AudioTokens:
        """Patch grid + unit-norm global token for one clip."""
        self.eval()
        patches, g = self.audio_enc(mel_input(audio)[None])
        g = F.normalize(g, dim=-1, eps=1e-8)
        return AudioTokens(global_token=g[0], patches=patches[0])

    @torch.no_grad()
    def null_audio_tokens(self, t_mel: int = 201) -> AudioTokens:
        """a_null: tokens from encoding an all-zero mel spectrogram."""
        self.eval()
        zero_mel = torch.from_numpy(
            normalize_mel(np.zeros((128, t_mel))).astype(np.float32)
        )[None, None]
        patches, g = self.audio_enc(zero_mel)
        g = F.normalize(g, dim=-1, eps=1e-8)
        return AudioTokens(global_token=g[0], patches=patches[0], null_flag=True)

    @torch.no_grad()
    def text_tokens(self, category: str | None) -> torch.Tensor:
        """Length-1 conditioning sequence for a category; zeros for null."""
        self.eval()
        if category is None:
            return torch.zeros(1, self.d)
        return self.embed_text([text_prompt(category)])


def new_embedder(categories, seed: int = 0, d: int = D_EMB) -> AlignmentEmbedder:
    torch.manual_seed(child_seed(seed, "embedder-init"))
    return AlignmentEmbedder(categories, d)


# ---------------------------------------------------------------------------
# training


@dataclass
class EmbedderTrainConfig:
    batch_size: int = 5
    lr: float = 2e-3
    steps: int = 400
    seed: int = 0
    tau: float = 0.07
    d_emb: int = D_EMB


def _info_nce(za, zb, tau):
    logits = za @ zb.T / tau
    target = torch.arange(za.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def train_embedder(manifest_path, cfg: EmbedderTrainConfig, out=None):
    """Contrastive frame<->audio (and <->category text) training.

    Returns (model, loss_curve); saves a checkpoint if `out` is given.
    Single-category corpora train with the image-audio objective only.
    """
    torch.set_num_threads(1)
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    pairs = []
    for entry in read_manifest(manifest_path):
        if entry.distractor_kind is None and entry.duration_s >= 2.0:
            pairs.append(load_pair(entry, root))
    if not pairs:
        raise ValueError("no valid training pairs in manifest")
    categories = sorted({p.category for p in pairs})
    use_text = len(categories) >= 2
    if not use_text:
        import warnings

        warnings.warn("single-category corpus: text contrast degenerate, using image-audio only")

    by_cat = {c: [p for p in pairs if p.category == c] for c in categories}
    model = new_embedder(categories, cfg.seed, cfg.d_emb)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    curve = []
    for step in range(cfg.steps):
        rng = numpy_rng(cfg.seed, f"emb-step{step}")
        # one clip per category when possible -> clean in-batch negatives
        cats = list(categories)
        if len(cats) > cfg.batch_size:
            cats = [cats[i] for i in rng.choice(len(cats), cfg.batch_size, replace=False)]
        chosen = [by_cat[c][int(rng.integers(len(by_cat[c])))] for c in cats]
        mels, frames, texts = [], [], []
        for pair in chosen:
            grid = np.arange(0.0, pair.duration_s - 2.0 + 1e-9, 0.5)
            s = float(grid[int(rng.integers(grid.size))])
            crop = pair.window(s, 2.0)
            mels.append(mel_input(crop.audio))
            f = int(rng.integers(crop.video.n_frames))
            frames.append(frame_input(crop.video.frames[f]))
            texts.append(text_prompt(pair.category))
        zi = model.embed_image(torch.stack(frames))
        za = model.embed_audio(torch.stack(mels))
        loss = _info_nce(zi, za, cfg.tau)
        if use_text:
            zt = model.embed_text(texts)
            loss = loss + _info_nce(zi, zt, cfg.tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    if out is not None:
        save_embedder(out, model, cfg, curve)
    return model, curve


def save_embedder(path, model: AlignmentEmbedder, cfg: EmbedderTrainConfig, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "embedder",
            "config": asdict(cfg),
            "categories": model.categories,
            "state_dict": model.state_dict(),
            "loss_curve": curve,
        },
        path,
    )


def load_embedder(path) -> AlignmentEmbedder:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "embedder":
        raise ValueError(f"{path} is not an alignment embedder checkpoint")
    model = AlignmentEmbedder(ckpt["categories"], ckpt["config"]["d_emb"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
