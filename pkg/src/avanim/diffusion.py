"""Noise schedules, training objective, samplers, and guidance.

Epsilon-prediction DDPM with a linear beta schedule. The first frame is
never diffused: training assembles inputs with frame 1 clean and applies
the MSE only to frames 2..rT; samplers write only frames 2..rT and assert
frame-1 preservation after every reverse step.

Classifier-free audio guidance combines the null-audio and audio branches
as (1 - eta) * eps_uncond + eta * eps_cond; the unconditional branch keeps
the text condition and nulls only the audio. Training drops each element's
audio to the null embedding with probability audio_dropout_p.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .embedder import AlignmentEmbedder
from .media import AudioClip, load_pairs, load_wav, save_frames
from .model import (
    ImageBackbone,
    LatentVideo,
    ModelConfig,
    VideoUNet,
    collate_segments,
    latent_from_frames,
    frames_from_latent,
    segment_audio_tokens,
)
from .rng import child_seed, numpy_rng, torch_generator

N_MEL_COLS_2S = 201


# ---------------------------------------------------------------------------
# schedule


@dataclass
class NoiseSchedule:
    """betas[k-1] is beta_k for k = 1..K; alpha_bar(0) = 1."""

    K: int
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.K,):
            raise ValueError("betas must have length K")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        self._alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, k) -> float:
        """Cumulative product of (1 - beta) up to step k; k = 0 gives 1."""
        k = int(k)
        if not 0 <= k <= self.K:
            raise ValueError(f"step {k} outside [0, {self.K}]")
        return 1.0 if k == 0 else float(self._alpha_bars[k - 1])

    def snr(self, k) -> float:
        ab = self.alpha_bar(k)
        return ab / (1.0 - ab)


def linear_schedule(K: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(K=K, betas=np.linspace(beta_start, beta_end, K))


@dataclass
class GuidanceConfig:
    eta: float = 1.0
    audio_dropout_p: float = 0.2

    def __post_init__(self):
        if not math.isfinite(self.eta):
            raise ValueError("eta must be finite")
        if not 0.0 <= self.audio_dropout_p <= 1.0:
            raise ValueError("audio_dropout_p must be in [0, 1]")


# ---------------------------------------------------------------------------
# forward process


def forward_diffuse(z0: torch.Tensor, k, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """z^k = sqrt(alpha_bar_k) z0 + sqrt(1 - alpha_bar_k) eps, for k in 1..K.

    Applies to whatever frames are passed in; the caller keeps frame 1 out.
    k may be an int or a per-sample tensor aligned with z0's leading dim.
    """
    if noise.shape != z0.shape:
        raise ValueError("noise shape must match z0")
    if torch.is_tensor(k):
        if torch.any(k < 1) or torch.any(k > schedule.K):
            raise ValueError(f"steps outside [1, {schedule.K}]")
        ab = torch.tensor([schedule.alpha_bar(int(v)) for v in k], dtype=z0.dtype)
        ab = ab.reshape([k.shape[0]] + [1] * (z0.ndim - 1))
    else:
        if not 1 <= int(k) <= schedule.K:
            raise ValueError(f"step {k} outside [1, {schedule.K}]")
        ab = torch.tensor(schedule.alpha_bar(k), dtype=z0.dtype)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, eta: float) -> torch.Tensor:
    """(1 - eta) * eps_uncond + eta * eps_cond."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("branch shapes differ")
    return (1.0 - eta) * eps_uncond + eta * eps_cond


# ---------------------------------------------------------------------------
# conditioning cache


class _TokenCache:
    """Memoizes audio/text conditioning per (clip, crop) during training."""

    def __init__(self, embedder: AlignmentEmbedder, rT: int):
        self.embedder = embedder
        self.rT = rT
        self.audio = {}
        self.text = {}
        self.null = None

    def audio_segments(self, key, audio: AudioClip):
        if key not in self.audio:
            self.audio[key] = segment_audio_tokens(self.embedder.audio_tokens(audio), self.rT)
        return self.audio[key]

    def null_segments(self):
        if self.null is None:
            self.null = segment_audio_tokens(
                self.embedder.null_audio_tokens(N_MEL_COLS_2S), self.rT
            )
        return self.null

    def text_tokens(self, category):
        if category not in self.text:
            self.text[category] = self.embedder.text_tokens(category)
        return self.text[category]


# ---------------------------------------------------------------------------
# training objective


def training_loss(batch, model: VideoUNet, schedule: NoiseSchedule,
                  guidance: GuidanceConfig, embedder: AlignmentEmbedder,
                  rng: np.random.Generator, generator: torch.Generator) -> torch.Tensor:
    """Denoising MSE over frames 2..rT for a batch of rT-frame ClipPairs."""
    rT = model.cfg.rT
    if rT < 2:
        raise ValueError("rT must be >= 2: nothing to predict")
    cache = _TokenCache(embedder, rT)
    zs, ks, segs, texts, noises = [], [], [], [], []
    for pair in batch:
        z0 = latent_from_frames(pair.video.frames)  # [rT, 3, H, W]
        if z0.shape[0] != rT:
            raise ValueError(f"clip has {z0.shape[0]} frames, model wants {rT}")
        k = int(rng.integers(1, schedule.K + 1))
        noise = torch.randn(z0[1:].shape, generator=generator)
        zk = forward_diffuse(z0[1:], k, schedule, noise)
        zs.append(torch.cat([z0[:1], zk], dim=0))
        ks.append(float(k))
        noises.append(noise)
        if model.cfg.use_audio:
            if float(rng.random()) < guidance.audio_dropout_p:
                segs.append(cache.null_segments())
            else:
                segs.append(cache.audio_segments(id(pair), pair.audio))
        texts.append(cache.text_tokens(pair.category))
    z = torch.stack(zs)
    segments = collate_segments(segs) if model.cfg.use_audio else None
    eps_pred = model(z, torch.tensor(ks), segments, torch.stack(texts))
    return F.mse_loss(eps_pred[:, 1:], torch.stack(noises))


# ---------------------------------------------------------------------------
# sampling


def _step_grid(K: int, steps: int) -> list:
    """Descending list of step indices, evenly spaced over [1, K]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > K:
        raise ValueError(f"steps {steps} > K {K}")
    ks = np.unique(np.round(np.linspace(K, 1, steps)).astype(int))
    return list(ks[::-1])


@torch.no_grad()
def sample(z1: torch.Tensor, audio_cond, null_cond, text_tokens: torch.Tensor,
           model: VideoUNet, schedule: NoiseSchedule, sampler: str = "ddim",
           steps: int = 50, eta: float = 1.0, seed: int = 0,
           start_k: int | None = None) -> LatentVideo:
    """Generate frames 2..rT conditioned on the clean first-frame latent z1.

    audio_cond / null_cond are SegmentedAudioCond (None for audio-free
    models); eta interpolates between them. With eta = 1 the null branch is
    never evaluated, so the output equals the conditional branch bit-exactly.
    DDIM is deterministic given the seed; DDPM draws ancestral noise from
    the same seeded generator.

    start_k = None starts from pure noise at K. An integer starts from the
    first frame replicated and forward-diffused to that step, so the reverse
    pass begins on the training distribution of a noised static scene and
    only has to synthesize the motion, not rediscover the layout.
    """
    if sampler not in ("ddim", "ddpm"):
        raise ValueError(f"unknown sampler {sampler!r}")
    model.eval()
    rT = model.cfg.rT
    gen = torch_generator(seed, "sample-noise")
    z_rest = torch.randn((rT - 1,) + tuple(z1.shape), generator=gen)
    if start_k is not None:
        if not 1 <= start_k <= schedule.K:
            raise ValueError(f"start_k {start_k} outside [1, {schedule.K}]")
        base = z1[None].expand_as(z_rest)
        z_rest = forward_diffuse(base, start_k, schedule, z_rest)
    use_audio = model.cfg.use_audio and audio_cond is not None
    segments = collate_segments([audio_cond]) if use_audio else None
    need_null = use_audio and eta != 1.0
    if need_null and null_cond is None:
        raise ValueError("guidance with eta != 1 needs a null audio branch")
    null_segments = collate_segments([null_cond]) if need_null else None
    text = text_tokens[None]

    grid = _step_grid(schedule.K if start_k is None else start_k, steps)
    for i, k in enumerate(grid):
        z = torch.cat([z1[None], z_rest], dim=0)
        k_t = torch.tensor([float(k)])
        eps_c = model(z[None], k_t, segments, text)[0]
        if need_null:
            eps_u = model(z[None], k_t, null_segments, text)[0]
            eps = cfg_combine(eps_u, eps_c, eta)
        else:
            eps = eps_c
        eps = eps[1:]  # the frame-1 prediction is ignored
        ab_k = schedule.alpha_bar(k)
        k_prev = grid[i + 1] if i + 1 < len(grid) else 0
        ab_p = schedule.alpha_bar(k_prev)
        x0 = (z_rest - math.sqrt(1.0 - ab_k) * eps) / math.sqrt(ab_k)
        x0 = x0.clamp(-1.0, 1.0)  # pixel latents are bounded; keeps high-k bias from derailing the trajectory
        if sampler == "ddim":
            z_rest = math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps
        else:
            var = (1.0 - ab_p) / (1.0 - ab_k) * (1.0 - ab_k / ab_p)
            coef = math.sqrt(max(1.0 - ab_p - var, 0.0))
            z_rest = math.sqrt(ab_p) * x0 + coef * eps
            if k_prev > 0:
                z_rest = z_rest + math.sqrt(var) * torch.randn(z_rest.shape, generator=gen)
        assert torch.equal(z[0], z1), "sampler wrote to frame 1"

    out = torch.cat([z1[None], z_rest], dim=0)
    clean = torch.zeros(rT, dtype=torch.bool)
    clean[0] = True
    return LatentVideo(z=out, fps=rT / 2.0, clean_mask=clean)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class BackboneTrainConfig:
    steps: int = 4000
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0


def pretrain_backbone(manifest_path, embedder: AlignmentEmbedder,
                      schedule: NoiseSchedule, cfg: BackboneTrainConfig,
                      model_cfg: ModelConfig) -> ImageBackbone:
    """Train the per-frame denoiser that the video model later freezes."""
    torch.set_num_threads(1)
    pairs = load_pairs(manifest_path, include_distractors=False)
    if not pairs:
        raise ValueError("no clips in manifest")
    frames, cats = [], []
    for pair in pairs:
        for f in pair.video.frames:
            frames.append(f)
            cats.append(pair.category)
    bank = latent_from_frames(np.stack(frames))
    text_of = {c: embedder.text_tokens(c) for c in sorted(set(cats))}
    torch.manual_seed(child_seed(cfg.seed, "backbone-init"))
    backbone = ImageBackbone(model_cfg)
    opt = torch.optim.Adam(backbone.parameters(), lr=cfg.lr)
    gen = torch_generator(cfg.seed, "backbone-noise")
    backbone.train()
    for step in range(cfg.steps):
        rng = numpy_rng(cfg.seed, f"backbone-step{step}")
        idx = rng.integers(0, bank.shape[0], size=cfg.batch_size)
        z0 = bank[torch.from_numpy(idx)]
        k = torch.from_numpy(rng.integers(1, schedule.K + 1, size=cfg.batch_size))
        noise = torch.randn(z0.shape, generator=gen)
        zk = forward_diffuse(z0, k, schedule, noise)
        text = torch.stack([text_of[cats[i]] for i in idx])
        loss = F.mse_loss(backbone(zk, k.float(), text), noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


@dataclass
class VideoTrainConfig:
    steps: int = 2400
    batch_size: int = 4
    lr: float = 2e-3
    audio_dropout_p: float = 0.2
    seed: int = 0
    use_audio: bool = True
    base_ch: int = 16
    size: int = 32
    rT: int = 12
    K: int = 1000
    backbone_steps: int = 4000
    backbone_batch: int = 8
    backbone_lr: float = 2e-3
    onset_bias: float = 0.3  # fraction of crops steered to contain an onset


def _training_crop(pair, rng: np.random.Generator, rT: int, onset_bias: float):
    """Random rT-frame crop, biased so flashes appear in most crops."""
    fps = pair.video.fps
    max_start = pair.video.n_frames - rT
    onsets = [int(round(o * fps)) for o in (pair.onset_times_s or [])]
    if onsets and float(rng.random()) < onset_bias:
        onset = onsets[int(rng.integers(len(onsets)))]
        lo = max(0, onset - (rT - 2))
        hi = min(max_start, onset)
        if hi >= lo:
            start_f = int(rng.integers(lo, hi + 1))
        else:
            start_f = int(rng.integers(0, max_start + 1))
    else:
        start_f = int(rng.integers(0, max_start + 1))
    return pair.window(start_f / fps, rT / fps), (pair.source_id, start_f)


def train_video(manifest_path, embedder: AlignmentEmbedder, cfg: VideoTrainConfig,
                out=None, embedder_path=None):
    """Pretrain + freeze the backbone, then fit the temporal/audio layers.

    Only the trainable partition gets an optimizer; a snapshot audit asserts
    that no frozen parameter moves. Returns (model, loss_curve).
    """
    torch.set_num_threads(1)
    schedule = linear_schedule(cfg.K)
    model_cfg = ModelConfig(size=cfg.size, base_ch=cfg.base_ch, rT=cfg.rT,
                            d_cond=embedder.d, use_audio=cfg.use_audio)
    backbone_cfg = BackboneTrainConfig(steps=cfg.backbone_steps,
                                       batch_size=cfg.backbone_batch,
                                       lr=cfg.backbone_lr, seed=cfg.seed)
    backbone = pretrain_backbone(manifest_path, embedder, schedule, backbone_cfg, model_cfg)
    torch.manual_seed(child_seed(cfg.seed, "video-init"))
    model = VideoUNet(backbone, model_cfg)
    pairs = [p for p in load_pairs(manifest_path, include_distractors=False)
             if p.video.n_frames >= cfg.rT]
    if not pairs:
        raise ValueError("no clips long enough to train on")
    categories = sorted({p.category for p in pairs})

    trainable = [p for p in model.parameters() if p.requires_grad]
    frozen_snapshot = {n: p.detach().clone() for n, p in model.named_parameters()
                       if not p.requires_grad}
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    gen = torch_generator(cfg.seed, "video-noise")
    cache = _TokenCache(embedder, cfg.rT)
    model.train()
    curve = []
    for step in range(cfg.steps):
        rng = numpy_rng(cfg.seed, f"video-step{step}")
        zs, ks, segs, texts, noises = [], [], [], [], []
        for _ in range(cfg.batch_size):
            pair = pairs[int(rng.integers(len(pairs)))]
            crop, key = _training_crop(pair, rng, cfg.rT, cfg.onset_bias)
            z0 = latent_from_frames(crop.video.frames)
            k = int(rng.integers(1, schedule.K + 1))
            noise = torch.randn(z0[1:].shape, generator=gen)
            zs.append(torch.cat([z0[:1], forward_diffuse(z0[1:], k, schedule, noise)], dim=0))
            ks.append(float(k))
            noises.append(noise)
            if cfg.use_audio:
                if float(rng.random()) < cfg.audio_dropout_p:
                    segs.append(cache.null_segments())
                else:
                    segs.append(cache.audio_segments(key, crop.audio))
            texts.append(cache.text_tokens(pair.category))
        z = torch.stack(zs)
        segments = collate_segments(segs) if cfg.use_audio else None
        eps_pred = model(z, torch.tensor(ks), segments, torch.stack(texts))
        loss = F.mse_loss(eps_pred[:, 1:], torch.stack(noises))
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if step == 0 or step == cfg.steps - 1:
            for n, p in model.named_parameters():
                if not p.requires_grad:
                    assert torch.equal(p, frozen_snapshot[n]), f"frozen param {n} changed"
    model.eval()
    if out is not None:
        from .model import save_video_model

        save_video_model(out, model, categories, embedder_path=embedder_path,
                         train_config=asdict(cfg), loss_curve=curve)
    return model, curve


# ---------------------------------------------------------------------------
# animation


def _prepare_image(path, size: int) -> np.ndarray:
    """Center-crop to square, resize to the model raster, scale to [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != size:
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def animate_array(first_frame: np.ndarray, audio: AudioClip, model: VideoUNet,
                  embedder: AlignmentEmbedder, category: str | None = None,
                  eta: float = 1.0, sampler: str = "ddim", steps: int = 50,
                  seed: int = 0, schedule: NoiseSchedule | None = None,
                  start_k: int | None = 600) -> np.ndarray:
    """Animate one frame + the first 2 s of audio into rT frames.

    The first output frame is the input frame, bit for bit. By default the
    reverse pass starts from the noised first frame at step 600 rather than
    pure noise: the scene is given, only the motion is unknown.
    """
    if audio.duration_s < 2.0 - 1e-9:
        raise ValueError("audio shorter than 2 s")
    audio2 = audio.slice_seconds(0.0, 2.0)
    rT = model.cfg.rT
    z1 = latent_from_frames(first_frame[None])[0]
    audio_cond = null_cond = None
    if model.cfg.use_audio:
        audio_cond = segment_audio_tokens(embedder.audio_tokens(audio2), rT)
        null_cond = segment_audio_tokens(embedder.null_audio_tokens(N_MEL_COLS_2S), rT)
    text = embedder.text_tokens(category)
    latent = sample(z1, audio_cond, null_cond, text, model,
                    schedule or linear_schedule(), sampler=sampler,
                    steps=steps, eta=eta, seed=seed, start_k=start_k)
    out = frames_from_latent(latent.z)
    out[0] = first_frame
    return out


def animate(image_path, wav_path, model: VideoUNet, embedder: AlignmentEmbedder,
            out_dir, frames: int = 12, eta: float = 1.0, sampler: str = "ddim",
            steps: int = 50, seed: int = 0, category: str | None = None,
            start_k: int | None = 600) -> Path:
    """Animate an image file with a WAV file; writes a PNG frame sequence."""
    if frames != model.cfg.rT:
        raise ValueError(f"model generates {model.cfg.rT} frames, not {frames}")
    first = _prepare_image(image_path, model.cfg.size)
    audio = load_wav(wav_path)
    out = animate_array(first, audio, model, embedder, category=category,
                        eta=eta, sampler=sampler, steps=steps, seed=seed,
                        start_k=start_k)
    save_frames(out, out_dir)
    return Path(out_dir)
