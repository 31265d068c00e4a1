"""Denoising UNet for audio-synchronized animation.

A small per-frame image UNet (the "backbone") is pretrained as a
single-image denoiser with text cross-attention, then frozen. The video
model wraps it with trainable first-frame lookups and conditioning:

  - first-frame temporal convs at the input/output convs and every ResBlock
    output: a 1x1-conv mix of frames (1, t-1, t), initialized to identity;
  - first-frame spatial attention: the frozen attention weights with
    keys/values rewired to frame 1;
  - audio cross-attention per frame over its own audio-token segment,
    output projection zero-initialized;
  - bidirectional temporal attention per spatial site with sinusoidal frame
    positions through a learnable projection, output zero-initialized.

Per block the layer order is: spatial conv -> FF temporal conv -> FF
spatial attention -> text cross-attention -> audio cross-attention ->
temporal attention. At initialization the video model therefore computes
exactly the frozen backbone, frame by frame (for time-constant inputs, and
at frame 1 unconditionally).

Latents are identity RGB at 32x32: "encoding" maps pixels [0,1] to
[-1,1] channel-first and back.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embedder import AudioTokens


def _gn(ch):
    return nn.GroupNorm(min(8, ch), ch)


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    # default dtype, not hardwired float32, so the model runs under float64 too
    dtype = torch.get_default_dtype()
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    ang = positions.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


# ---------------------------------------------------------------------------
# latent codec (identity RGB)


def latent_from_frames(frames: np.ndarray) -> torch.Tensor:
    """[N, H, W, 3] in [0,1] -> [N, 3, H, W] in [-1, 1]."""
    t = torch.from_numpy((frames * 2.0 - 1.0).astype(np.float32))
    return t.permute(0, 3, 1, 2).contiguous()


def frames_from_latent(z: torch.Tensor) -> np.ndarray:
    """[N, 3, H, W] -> [N, H, W, 3] clipped to [0, 1]."""
    x = (z.detach().clamp(-1.0, 1.0) + 1.0) / 2.0
    return x.permute(0, 2, 3, 1).numpy().astype(np.float64)


@dataclass
class LatentVideo:
    """rT-frame latent tensor; clean_mask marks un-noised frames (frame 1)."""

    z: torch.Tensor  # [rT, C, H, W]
    fps: float
    clean_mask: torch.Tensor  # [rT] bool

    def __post_init__(self):
        if self.z.ndim != 4:
            raise ValueError("latent video must be [rT, C, H, W]")
        if self.clean_mask.shape[0] != self.z.shape[0]:
            raise ValueError("clean_mask length must equal rT")


# ---------------------------------------------------------------------------
# segmented audio conditioning


@dataclass
class SegmentedAudioCond:
    """Per-frame token lists: segment patch tokens with the global appended."""

    frames: list  # length rT; frames[t] = [n_t, d] tensor
    null_flag: bool = False

    @property
    def rT(self) -> int:
        return len(self.frames)


def segment_audio_tokens(tokens: AudioTokens, rT: int) -> SegmentedAudioCond:
    """Split patch timestamps into rT segments; global token joins each."""
    if rT < 1:
        raise ValueError("rT must be >= 1")
    t_a = tokens.patches.shape[0]
    if t_a < 1:
        raise ValueError("audio tokens must have T_a >= 1")
    d = tokens.patches.shape[-1]
    frames = []
    for t in range(1, rT + 1):
        lo = (t - 1) * t_a // rT
        hi = t * t_a // rT
        seg = tokens.patches[lo:hi].reshape(-1, d)
        frames.append(torch.cat([seg, tokens.global_token[None]], dim=0))
    return SegmentedAudioCond(frames=frames, null_flag=tokens.null_flag)


def collate_segments(conds: list) -> list:
    """Batch B SegmentedAudioConds -> per-frame stacks [B, n_t, d]."""
    rT = conds[0].rT
    if any(c.rT != rT for c in conds):
        raise ValueError("segment count mismatch in batch")
    out = []
    for t in range(rT):
        n = conds[0].frames[t].shape[0]
        if any(c.frames[t].shape[0] != n for c in conds):
            raise ValueError("uneven segment sizes in batch")
        out.append(torch.stack([c.frames[t] for c in conds]))
    return out


# ---------------------------------------------------------------------------
# layers


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, t_dim):
        super().__init__()
        self.norm1 = _gn(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, out_ch)
        self.norm2 = _gn(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialSelfAttention(nn.Module):
    """Per-frame attention over spatial sites; kv may be rewired to frame 1."""

    def __init__(self, ch, heads=2):
        super().__init__()
        self.heads = heads
        self.norm = _gn(ch)
        self.q = nn.Conv2d(ch, ch, 1)
        self.k = nn.Conv2d(ch, ch, 1)
        self.v = nn.Conv2d(ch, ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def _split(self, x):  # [B, C, H, W] -> [B, h, HW, C/h]
        b, c, h, w = x.shape
        return x.reshape(b, self.heads, c // self.heads, h * w).transpose(2, 3)

    def forward(self, x, kv=None):
        src = x if kv is None else kv
        b, c, h, w = x.shape
        q = self._split(self.q(self.norm(x)))
        k = self._split(self.k(self.norm(src)))
        v = self._split(self.v(self.norm(src)))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        out = (attn @ v).transpose(2, 3).reshape(b, c, h, w)
        return x + self.proj(out)


class CrossAttention(nn.Module):
    """Queries from frame features, keys/values from conditioning tokens."""

    def __init__(self, ch, d_cond, heads=2, zero_out=False):
        super().__init__()
        self.heads = heads
        self.norm = _gn(ch)
        self.q = nn.Conv2d(ch, ch, 1)
        self.k = nn.Linear(d_cond, ch)
        self.v = nn.Linear(d_cond, ch)
        self.proj = nn.Conv2d(ch, ch, 1)
        if zero_out:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, x, tokens):  # x [B, C, H, W], tokens [B, n, d]
        b, c, h, w = x.shape
        dh = c // self.heads
        q = self.q(self.norm(x)).reshape(b, self.heads, dh, h * w).transpose(2, 3)
        k = self.k(tokens).reshape(b, -1, self.heads, dh).transpose(1, 2)
        v = self.v(tokens).reshape(b, -1, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(2, 3).reshape(b, c, h, w)
        return x + self.proj(out)


class FFTemporalConv(nn.Module):
    """Mixes frames (1, t-1, t) with three 1x1 convs; identity at init.

    t=1 clamps the taps to (1, 1, 1). Initialized so w_cur is the identity
    and the other taps are zero, making the module an exact no-op.
    """

    def __init__(self, ch):
        super().__init__()
        self.w_first = nn.Conv2d(ch, ch, 1, bias=False)
        self.w_prev = nn.Conv2d(ch, ch, 1, bias=False)
        self.w_cur = nn.Conv2d(ch, ch, 1, bias=False)
        nn.init.zeros_(self.w_first.weight)
        nn.init.zeros_(self.w_prev.weight)
        with torch.no_grad():
            self.w_cur.weight.copy_(torch.eye(ch).reshape(ch, ch, 1, 1))

    def forward(self, x):  # [B, rT, C, H, W]
        b, rt = x.shape[:2]
        first = x[:, :1].expand_as(x)
        prev = torch.cat([x[:, :1], x[:, :-1]], dim=1)
        flat = lambda y: y.reshape(b * rt, *y.shape[2:])
        out = self.w_first(flat(first)) + self.w_prev(flat(prev)) + self.w_cur(flat(x))
        return out.reshape(x.shape)


class TemporalAttention(nn.Module):
    """Bidirectional attention across frames at each spatial site."""

    def __init__(self, ch, heads=2):
        super().__init__()
        self.heads = heads
        self.norm = _gn(ch)
        self.pos_proj = nn.Linear(ch, ch)  # learnable lift of sinusoidal positions
        self.q = nn.Linear(ch, ch)
        self.k = nn.Linear(ch, ch)
        self.v = nn.Linear(ch, ch)
        self.proj = nn.Linear(ch, ch)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, positions=None):  # [B, rT, C, H, W]
        b, rt, c, h, w = x.shape
        if positions is None:
            positions = torch.arange(rt)
        pos = self.pos_proj(sinusoidal_embedding(positions, c))  # [rT, C]
        hn = self.norm(x.reshape(b * rt, c, h, w)).reshape(b, rt, c, h, w)
        tok = hn.permute(0, 3, 4, 1, 2).reshape(b * h * w, rt, c)
        tok = tok + pos[None]
        dh = c // self.heads
        q = self.q(tok).reshape(-1, rt, self.heads, dh).transpose(1, 2)
        k = self.k(tok).reshape(-1, rt, self.heads, dh).transpose(1, 2)
        v = self.v(tok).reshape(-1, rt, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b * h * w, rt, c)
        out = self.proj(out).reshape(b, h, w, rt, c).permute(0, 3, 4, 1, 2)
        return x + out


# ---------------------------------------------------------------------------
# backbone


@dataclass
class ModelConfig:
    size: int = 32
    base_ch: int = 16
    rT: int = 12
    d_cond: int = 48
    heads: int = 2
    use_audio: bool = True


class ImageBackbone(nn.Module):
    """Per-frame epsilon-prediction UNet with text cross-attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_ch
        t_dim = 2 * c
        self.time_mlp = nn.Sequential(nn.Linear(c, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.in_conv = nn.Conv2d(3, c, 3, padding=1)
        self.down1_res = ResBlock(c, c, t_dim)
        self.down1_pool = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.down2_res = ResBlock(c, 2 * c, t_dim)
        self.down2_attn = SpatialSelfAttention(2 * c, cfg.heads)
        self.down2_pool = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(2 * c, 2 * c, t_dim)
        self.mid_attn = SpatialSelfAttention(2 * c, cfg.heads)
        self.mid_text = CrossAttention(2 * c, cfg.d_cond, cfg.heads, zero_out=True)
        self.mid_res2 = ResBlock(2 * c, 2 * c, t_dim)
        self.up2_conv = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up2_res = ResBlock(4 * c, 2 * c, t_dim)
        self.up1_conv = nn.Conv2d(2 * c, c, 3, padding=1)
        self.up1_res = ResBlock(2 * c, c, t_dim)
        self.out_norm = _gn(c)
        self.out_conv = nn.Conv2d(c, 3, 3, padding=1)

    def time_features(self, k: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoidal_embedding(k, self.cfg.base_ch))

    def forward(self, x, k, text_tokens):
        """x [B, 3, H, W], k [B] diffusion steps, text_tokens [B, n, d]."""
        t = self.time_features(k)
        h0 = self.in_conv(x)
        h1 = self.down1_res(h0, t)
        h2 = self.down1_pool(h1)
        h3 = self.down2_res(h2, t)
        h4 = self.down2_attn(h3)
        h5 = self.down2_pool(h4)
        m = self.mid_res1(h5, t)
        m = self.mid_attn(m)
        m = self.mid_text(m, text_tokens)
        m = self.mid_res2(m, t)
        u2 = self.up2_conv(F.interpolate(m, scale_factor=2, mode="nearest"))
        u2 = self.up2_res(torch.cat([u2, h4], dim=1), t)
        u1 = self.up1_conv(F.interpolate(u2, scale_factor=2, mode="nearest"))
        u1 = self.up1_res(torch.cat([u1, h1], dim=1), t)
        return self.out_conv(F.silu(self.out_norm(u1)))


# ---------------------------------------------------------------------------
# video model


class VideoUNet(nn.Module):
    """Frozen backbone + trainable first-frame/temporal/audio machinery."""

    def __init__(self, backbone: ImageBackbone, cfg: ModelConfig | None = None):
        super().__init__()
        self.backbone = backbone
        self.cfg = cfg or backbone.cfg
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        c = self.cfg.base_ch
        heads = self.cfg.heads
        self.tc_in = FFTemporalConv(c)
        self.tc_d1 = FFTemporalConv(c)
        self.tc_d2 = FFTemporalConv(2 * c)
        self.tc_m1 = FFTemporalConv(2 * c)
        self.tc_m2 = FFTemporalConv(2 * c)
        self.tc_u2 = FFTemporalConv(2 * c)
        self.tc_u1 = FFTemporalConv(c)
        self.tc_out = FFTemporalConv(c)
        self.ta_mid = TemporalAttention(2 * c, heads)
        self.ta_u2 = TemporalAttention(2 * c, heads)
        self.ta_u1 = TemporalAttention(c, heads)
        if self.cfg.use_audio:
            self.aca_mid = CrossAttention(2 * c, self.cfg.d_cond, heads, zero_out=True)
            self.aca_u2 = CrossAttention(2 * c, self.cfg.d_cond, heads, zero_out=True)
            self.aca_u1 = CrossAttention(c, self.cfg.d_cond, heads, zero_out=True)

    # frame-wise application of a per-frame backbone module
    def _pf(self, module, x, *args):
        b, rt = x.shape[:2]
        out = module(x.reshape(b * rt, *x.shape[2:]), *args)
        return out.reshape(b, rt, *out.shape[1:])

    def _ff_attn(self, attn, x):
        b, rt = x.shape[:2]
        kv = x[:, :1].expand_as(x)
        out = attn(x.reshape(b * rt, *x.shape[2:]), kv=kv.reshape(b * rt, *x.shape[2:]))
        return out.reshape(b, rt, *out.shape[1:])

    def _audio(self, aca, x, segments):
        if not self.cfg.use_audio or segments is None:
            return x
        if len(segments) != x.shape[1]:
            raise ValueError(f"segment count {len(segments)} != rT {x.shape[1]}")
        return torch.stack([aca(x[:, t], segments[t]) for t in range(x.shape[1])], dim=1)

    def forward(self, z, k, audio_segments, text_tokens, positions=None):
        """z [B, rT, 3, H, W] (frame 1 clean), k [B] -> eps [B, rT, 3, H, W].

        audio_segments: per-frame token stacks from collate_segments, or None
        (ignored entirely when the model was built without audio).
        """
        b, rt = z.shape[:2]
        # expand k before the MLP so each frame sees the same arithmetic as a
        # standalone backbone call on the flattened batch
        k_f = k[:, None].expand(b, rt).reshape(b * rt)
        t_f = self.backbone.time_features(k_f)
        text_f = text_tokens[:, None].expand(b, rt, *text_tokens.shape[1:])
        text_f = text_f.reshape(b * rt, *text_tokens.shape[1:])
        bb = self.backbone

        h = self._pf(bb.in_conv, z)
        h = self.tc_in(h)
        h1 = self._pf(bb.down1_res, h, t_f)
        h1 = self.tc_d1(h1)
        h2 = self._pf(bb.down1_pool, h1)
        h3 = self._pf(bb.down2_res, h2, t_f)
        h3 = self.tc_d2(h3)
        h4 = self._ff_attn(bb.down2_attn, h3)
        h5 = self._pf(bb.down2_pool, h4)
        m = self._pf(bb.mid_res1, h5, t_f)
        m = self.tc_m1(m)
        m = self._ff_attn(bb.mid_attn, m)
        m = self._pf(bb.mid_text, m, text_f)
        m = self._audio(self.aca_mid if self.cfg.use_audio else None, m, audio_segments)
        m = self.ta_mid(m, positions)
        m = self._pf(bb.mid_res2, m, t_f)
        m = self.tc_m2(m)
        up = lambda y: F.interpolate(y, scale_factor=2, mode="nearest")
        u2 = self._pf(lambda y: bb.up2_conv(up(y)), m)
        u2 = self._pf(bb.up2_res, torch.cat([u2, h4], dim=2), t_f)
        u2 = self.tc_u2(u2)
        u2 = self._audio(self.aca_u2 if self.cfg.use_audio else None, u2, audio_segments)
        u2 = self.ta_u2(u2, positions)
        u1 = self._pf(lambda y: bb.up1_conv(up(y)), u2)
        u1 = self._pf(bb.up1_res, torch.cat([u1, h1], dim=2), t_f)
        u1 = self.tc_u1(u1)
        u1 = self._audio(self.aca_u1 if self.cfg.use_audio else None, u1, audio_segments)
        u1 = self.ta_u1(u1, positions)
        u1 = self.tc_out(u1)
        return self._pf(lambda y: bb.out_conv(F.silu(bb.out_norm(y))), u1)


def unet_forward(model: VideoUNet, latent: LatentVideo, k: int,
                 audio: SegmentedAudioCond | None, text_tokens: torch.Tensor) -> torch.Tensor:
    """Single-sample convenience wrapper; returns [rT, C, H, W] noise pred."""
    segments = collate_segments([audio]) if audio is not None else None
    k_t = torch.tensor([float(k)])
    return model(latent.z[None], k_t, segments, text_tokens[None])[0]


# ---------------------------------------------------------------------------
# parameter partition


def param_partition(model: VideoUNet) -> tuple:
    """(frozen names, trainable names): disjoint, exhaustive."""
    frozen, trainable = [], []
    for name, p in model.named_parameters():
        (frozen if name.startswith("backbone.") else trainable).append(name)
    both = set(frozen) & set(trainable)
    assert not both, f"partition overlap: {both}"
    assert len(frozen) + len(trainable) == len(list(model.named_parameters()))
    return frozen, trainable


# ---------------------------------------------------------------------------
# checkpoints


def _file_id(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def save_video_model(path, model: VideoUNet, categories, embedder_path=None,
                     train_config=None, loss_curve=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frozen, trainable = param_partition(model)
    torch.save(
        {
            "kind": "video_model",
            "config": asdict(model.cfg),
            "state_dict": model.state_dict(),
            "partition": {"frozen": frozen, "trainable": trainable},
            "categories": list(categories),
            "embedder_path": str(embedder_path) if embedder_path else None,
            "embedder_id": _file_id(embedder_path) if embedder_path else None,
            "train_config": train_config,
            "loss_curve": loss_curve,
        },
        path,
    )


def load_video_model(path) -> tuple:
    """Returns (model, checkpoint dict)."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "video_model":
        raise ValueError(f"{path} is not a video model checkpoint")
    cfg = ModelConfig(**ckpt["config"])
    model = VideoUNet(ImageBackbone(cfg), cfg)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
