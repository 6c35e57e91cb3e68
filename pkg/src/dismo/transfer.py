"""Motion transfer surfaces.

Two independent pieces live here:

1. Autoregressive rollout: motion embeddings extracted once from a driving
   clip steer the trained frame generator step by step, starting from an
   arbitrary target frame.

2. Backbone-free alignment plumbing for conditioning a temporally
   downsampled video backbone: selecting motion/latent frame indices from a
   strided video, pairing motion embeddings into latent-aligned tokens, the
   token-wise mapping network, and the temporal routing mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from dismo.datagen import VideoClip
from dismo.errors import ConfigurationError
from dismo.models.layers import RMSNorm
from dismo.models.motion import MotionSequence
from dismo.training import CheckpointBundle


# ---------------------------------------------------------------------------
# Autoregressive rollout
# ---------------------------------------------------------------------------

@dataclass
class TransferRequest:
    """Inputs of one autoregressive transfer."""

    driving_frames: np.ndarray      # (T, H, W, C) floats in [0, 1]
    target_frame: np.ndarray        # (H, W, C) floats in [0, 1]
    delta: int = 1
    ode_steps: int = 25
    seed: int = 0
    driving_clip_id: str = ""


def autoregressive_transfer(req: TransferRequest, bundle: CheckpointBundle) -> VideoClip:
    """Roll the frame generator along the driving clip's motion embeddings.

    The embeddings are extracted once from the driving clip; step k predicts
    the next frame from the previously generated frame and embedding k. One
    embedding is usable per source timestep t with t + delta <= T, so the
    output has (T - delta) + 1 frames.
    """
    extractor, generator = bundle.build_models()
    cfg = generator.config
    if req.target_frame.shape != (cfg.frame_size, cfg.frame_size, cfg.channels):
        raise ConfigurationError(
            f"transfer.target_frame: shape {req.target_frame.shape} does not match "
            f"model resolution {(cfg.frame_size, cfg.frame_size, cfg.channels)}")
    if not 1 <= req.delta <= cfg.delta_max:
        raise ConfigurationError(
            f"transfer.delta: must be in [1, {cfg.delta_max}], got {req.delta}")
    if not bundle.loss_history:
        warnings.warn("transfer: checkpoint has an empty loss history (untrained bundle)")

    motion = extractor.extract(req.driving_frames, clip_id=req.driving_clip_id)
    t_total = len(motion)
    usable = t_total - req.delta
    if usable < 1:
        raise ConfigurationError(
            f"transfer: driving clip too short, {t_total} frames with delta {req.delta}")

    rng = torch.Generator().manual_seed(req.seed)
    frames = [np.asarray(req.target_frame, dtype=np.float32)]
    current = torch.from_numpy(frames[0]).permute(2, 0, 1)
    consumed: list[int] = []
    for k in range(usable):
        consumed.append(k)
        m_k = torch.from_numpy(motion.embeddings[k]).float()
        nxt = generator.sample(current, m_k, req.delta, req.ode_steps, rng)
        current = nxt
        frames.append(nxt.permute(1, 2, 0).numpy())
    # embeddings must be consumed in driving-clip order
    assert consumed == list(range(usable))

    out = np.stack(frames)
    return VideoClip(out, fps=6.0, labels={"source_clip": req.driving_clip_id},
                     clip_id=f"transfer_{req.driving_clip_id}_seed{req.seed}")


# ---------------------------------------------------------------------------
# Temporal alignment with a stride-8 latent backbone
# ---------------------------------------------------------------------------

def select_motion_frames(video_len: int, stride: int) -> list[int]:
    """Eight stride-spaced frame indices covering a 1 + 7*stride video."""
    if stride < 1:
        raise ConfigurationError(f"align.stride: must be >= 1, got {stride}")
    if video_len != 1 + 7 * stride:
        raise ConfigurationError(
            f"align.video_len: expected 1 + 7*stride = {1 + 7 * stride}, got {video_len}")
    return [i * stride for i in range(8)]


def select_latent_frames(video_len: int, latent_stride: int) -> list[int]:
    """Four latent-aligned frame indices [0, s, 2s, 3s]."""
    if latent_stride < 1:
        raise ConfigurationError(f"align.latent_stride: must be >= 1, got {latent_stride}")
    if video_len < 3 * latent_stride + 1:
        raise ConfigurationError(
            f"align.video_len: need >= {3 * latent_stride + 1} frames for latent stride "
            f"{latent_stride}, got {video_len}")
    return [i * latent_stride for i in range(4)]


@dataclass
class AlignedMotionSequence:
    """Four latent-aligned motion tokens.

    Token 0 is the singular source embedding (width d); tokens 1-3 are
    concatenated consecutive-embedding pairs (width 2d). The final
    motion embedding of the eight is unused: the latents cover the clip
    only up to frame 3*latent_stride, so the pairing stays time-causal.
    """

    tokens: list[np.ndarray]
    source_indices: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def motion_dim(self) -> int:
        return self.tokens[0].shape[0]


def align_motion_to_latents(motion: MotionSequence | np.ndarray) -> AlignedMotionSequence:
    """Pair eight motion embeddings into four latent-aligned tokens."""
    emb = motion.embeddings if isinstance(motion, MotionSequence) else np.asarray(motion)
    if emb.ndim != 2 or emb.shape[0] != 8:
        raise ConfigurationError(
            f"align.motion: expected exactly 8 embeddings, got shape {emb.shape}")
    tokens = [emb[0].copy(),
              np.concatenate([emb[1], emb[2]]),
              np.concatenate([emb[3], emb[4]]),
              np.concatenate([emb[5], emb[6]])]
    return AlignedMotionSequence(tokens=tokens,
                                 source_indices=[(0,), (1, 2), (3, 4), (5, 6)])


class MappingNetwork(nn.Module):
    """Token-wise two-layer feedforward mapper for aligned motion tokens.

    Each feedforward layer applies RMS normalization at its start and end,
    expands the width by 3 through a linear GEGLU, and projects back. Tokens
    never mix, so token k's output depends only on token k's input.
    """

    def __init__(self, motion_dim: int, width: int = 128):
        super().__init__()
        self.motion_dim = motion_dim
        self.width = width
        self.proj_single = nn.Linear(motion_dim, width)
        self.proj_pair = nn.Linear(2 * motion_dim, width)
        self.layers = nn.ModuleList(_GegluFeedForward(width) for _ in range(2))

    def forward(self, aligned: AlignedMotionSequence) -> torch.Tensor:
        if aligned.motion_dim != self.motion_dim:
            raise ConfigurationError(
                f"mapping_network: token width {aligned.motion_dim} does not match "
                f"configured motion_dim {self.motion_dim}")
        singular = torch.from_numpy(np.asarray(aligned.tokens[0], dtype=np.float32))
        pairs = torch.from_numpy(np.stack([np.asarray(t, dtype=np.float32)
                                           for t in aligned.tokens[1:]]))
        x = torch.cat([self.proj_single(singular)[None, :], self.proj_pair(pairs)], dim=0)
        for layer in self.layers:
            x = layer(x)
        return x


class _GegluFeedForward(nn.Module):
    def __init__(self, width: int, expand: int = 3):
        super().__init__()
        self.norm_in = RMSNorm(width)
        self.gate = nn.Linear(width, width * expand * 2)
        self.down = nn.Linear(width * expand, width)
        self.norm_out = RMSNorm(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_in(x)
        a, b = self.gate(h).chunk(2, dim=-1)
        h = self.down(a * torch.nn.functional.gelu(b))
        return self.norm_out(h)


def mapping_network(aligned: AlignedMotionSequence, width: int = 128,
                    module: MappingNetwork | None = None) -> torch.Tensor:
    """Functional wrapper; builds a fresh (seeded-by-default) module if none given."""
    if module is None:
        module = MappingNetwork(aligned.motion_dim, width)
    with torch.no_grad():
        return module(aligned)


def route_conditioning(latent_timesteps: int, tokens) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Bijective temporal assignment of conditioning tokens to latent steps.

    Returns the (latent, token) assignment pairs and a boolean mask matrix
    that is exactly diagonal in time: token j may influence latent step i
    only when i == j.
    """
    n_tokens = len(tokens)
    if n_tokens != latent_timesteps:
        raise ConfigurationError(
            f"route_conditioning: {n_tokens} tokens cannot cover {latent_timesteps} latent steps")
    assignment = [(i, i) for i in range(latent_timesteps)]
    mask = np.eye(latent_timesteps, dtype=bool)
    return assignment, mask
