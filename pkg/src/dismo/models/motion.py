"""Motion extractor: clip -> per-timestep bottlenecked motion embeddings.

A trainable patch embedder plus a small per-frame transformer produce frame
tokens; those are spatially pooled, joined with one learned query token per
frame, and run through a joint space-time transformer with rotary position
encoding on the time axis. Each frame's motion embedding is a linear
readout of its query token, so every embedding sees the full clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from dismo.errors import ConfigurationError
from dismo.models.layers import TransformerBlock, rope_angles


@dataclass(frozen=True)
class MotionExtractorConfig:
    patch_size: int = 8
    frame_embed_depth: int = 4
    frame_embed_dim: int = 256
    sequence_depth: int = 6
    sequence_dim: int = 256
    num_query_tokens_per_frame: int = 1
    motion_dim: int = 64
    num_frames: int = 8
    frame_size: int = 64
    channels: int = 3
    num_heads: int = 4
    spatial_pool: int = 2

    def __post_init__(self):
        if self.frame_size % self.patch_size:
            raise ConfigurationError(
                f"motion_extractor.patch_size: {self.patch_size} does not divide frame size {self.frame_size}")
        if self.frame_embed_dim % self.num_heads or self.sequence_dim % self.num_heads:
            raise ConfigurationError("motion_extractor: dims must be divisible by num_heads")
        grid = self.frame_size // self.patch_size
        if grid % self.spatial_pool:
            raise ConfigurationError(
                f"motion_extractor.spatial_pool: {self.spatial_pool} does not divide token grid {grid}")
        # bottleneck: motion payload per frame must stay well under the frame
        # token payload, otherwise the embedding could smuggle appearance
        payload = self.motion_dim * self.num_query_tokens_per_frame
        budget = 0.25 * self.frame_embed_dim * self.tokens_per_frame
        if not payload < budget:
            raise ConfigurationError(
                f"motion_extractor.motion_dim: payload {payload} violates bottleneck "
                f"(< 25% of frame payload {self.frame_embed_dim * self.tokens_per_frame})")

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def pooled_tokens_per_frame(self) -> int:
        return (self.frame_size // self.patch_size // self.spatial_pool) ** 2


@dataclass
class MotionSequence:
    """Per-timestep motion embeddings (T, motion_dim) for one clip."""

    embeddings: np.ndarray
    clip_id: str = ""
    extractor_hash: str = ""

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ConfigurationError(
                f"motion_sequence.embeddings: expected (T, d), got shape {self.embeddings.shape}")
        if not np.isfinite(self.embeddings).all():
            raise ConfigurationError("motion_sequence.embeddings: non-finite values")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


class MotionExtractor(nn.Module):
    def __init__(self, config: MotionExtractorConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(c.channels, c.frame_embed_dim,
                                     kernel_size=c.patch_size, stride=c.patch_size)
        self.spatial_pos = nn.Parameter(torch.zeros(1, c.tokens_per_frame, c.frame_embed_dim))
        nn.init.normal_(self.spatial_pos, std=0.02)
        self.frame_blocks = nn.ModuleList(
            TransformerBlock(c.frame_embed_dim, c.num_heads) for _ in range(c.frame_embed_depth))
        self.frame_norm = nn.LayerNorm(c.frame_embed_dim)

        self.to_sequence = nn.Linear(c.frame_embed_dim, c.sequence_dim)
        self.seq_pos = nn.Parameter(torch.zeros(1, c.pooled_tokens_per_frame, c.sequence_dim))
        nn.init.normal_(self.seq_pos, std=0.02)
        self.query_token = nn.Parameter(torch.zeros(1, c.num_query_tokens_per_frame, c.sequence_dim))
        nn.init.normal_(self.query_token, std=0.02)
        self.sequence_blocks = nn.ModuleList(
            TransformerBlock(c.sequence_dim, c.num_heads) for _ in range(c.sequence_depth))
        self.seq_norm = nn.LayerNorm(c.sequence_dim)
        self.readout = nn.Linear(c.sequence_dim, c.motion_dim)

    def embed_frames(self, clip: torch.Tensor) -> torch.Tensor:
        """clip: (B, T, C, H, W) -> per-frame tokens (B, T, N, frame_embed_dim)."""
        c = self.config
        b, t, ch, h, w = clip.shape
        if (t, ch, h, w) != (c.num_frames, c.channels, c.frame_size, c.frame_size):
            raise ConfigurationError(
                f"motion_extractor: clip shape {(t, ch, h, w)} does not match config "
                f"{(c.num_frames, c.channels, c.frame_size, c.frame_size)}")
        x = self.patch_embed(clip.reshape(b * t, ch, h, w))
        x = x.flatten(2).transpose(1, 2) + self.spatial_pos
        for block in self.frame_blocks:
            x = block(x)
        x = self.frame_norm(x)
        return x.reshape(b, t, c.tokens_per_frame, c.frame_embed_dim)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        """clip: (B, T, C, H, W) -> motion embeddings (B, T, motion_dim)."""
        c = self.config
        tokens = self.embed_frames(clip)
        b, t, n, d = tokens.shape
        grid = c.frame_size // c.patch_size
        pooled = tokens.reshape(b * t, grid, grid, d) \
                       .reshape(b * t, grid // c.spatial_pool, c.spatial_pool,
                                grid // c.spatial_pool, c.spatial_pool, d).mean(dim=(2, 4))
        pooled = pooled.reshape(b * t, c.pooled_tokens_per_frame, d)
        x = self.to_sequence(pooled) + self.seq_pos
        query = self.query_token.expand(b * t, -1, -1)
        per_frame = torch.cat([x, query], dim=1)
        tokens_pf = per_frame.shape[1]
        x = per_frame.reshape(b, t * tokens_pf, c.sequence_dim)

        # rotary encoding over the time axis: every token of frame t shares angle t
        head_dim = c.sequence_dim // c.num_heads
        positions = torch.arange(t, dtype=x.dtype, device=x.device) \
                         .repeat_interleave(tokens_pf)
        rope = rope_angles(positions, head_dim)
        for block in self.sequence_blocks:
            x = block(x, rope=rope)
        x = self.seq_norm(x)

        query_out = x.reshape(b, t, tokens_pf, c.sequence_dim)[:, :, -c.num_query_tokens_per_frame:, :]
        m = self.readout(query_out).mean(dim=2)
        return m

    @torch.no_grad()
    def extract(self, clip: np.ndarray, clip_id: str = "") -> MotionSequence:
        """Inference on one clip given as (T, H, W, C) floats in [0, 1]."""
        was_training = self.training
        self.eval()
        try:
            x = torch.from_numpy(np.ascontiguousarray(clip)).float().permute(0, 3, 1, 2)
            m = self.forward(x.unsqueeze(0))[0].cpu().numpy()
        finally:
            self.train(was_training)
        return MotionSequence(embeddings=m, clip_id=clip_id)
