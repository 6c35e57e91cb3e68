"""Flow-matching frame generator.

Learns the conditional velocity field v(z_tau, x_t, m_t, delta, tau) that
transports Gaussian noise to the destination frame along the linear
interpolant z_tau = tau*z1 + (1-tau)*z0 with target u = z1 - z0. Sampling
integrates the learned ODE with explicit Euler steps.

Conditioning: the source frame enters as a second token stream; motion
embedding, step distance and flow time enter through adaptive layer norm.
Either conditioning channel can be dropped (replaced by a learned null)
for conditioning dropout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from dismo.errors import ConfigurationError
from dismo.models.layers import AdaLNBlock, sinusoidal_embedding


def interpolate(z0: torch.Tensor, z1: torch.Tensor, tau) -> torch.Tensor:
    """Linear interpolant tau*z1 + (1-tau)*z0; tau scalar or per-sample (B,)."""
    if z0.shape != z1.shape:
        raise ConfigurationError(f"interpolate: shape mismatch {z0.shape} vs {z1.shape}")
    tau = _as_weight(tau, z0)
    return tau * z1 + (1.0 - tau) * z0


def target_field(z0: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    """Target velocity z1 - z0 of the linear transport path."""
    if z0.shape != z1.shape:
        raise ConfigurationError(f"target_field: shape mismatch {z0.shape} vs {z1.shape}")
    return z1 - z0


def _as_weight(tau, like: torch.Tensor) -> torch.Tensor:
    tau = torch.as_tensor(tau, dtype=like.dtype, device=like.device)
    if tau.ndim == 0:
        return tau
    return tau.reshape(-1, *([1] * (like.ndim - 1)))


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 8
    dim: int = 256
    patch_size: int = 8
    delta_max: int = 4
    frame_size: int = 64
    channels: int = 3
    num_heads: int = 4
    motion_dim: int = 64
    num_frames: int = 8

    def __post_init__(self):
        if self.frame_size % self.patch_size:
            raise ConfigurationError(
                f"frame_generator.patch_size: {self.patch_size} does not divide frame size {self.frame_size}")
        if self.dim % self.num_heads:
            raise ConfigurationError("frame_generator.dim: must be divisible by num_heads")
        if not 1 <= self.delta_max <= self.num_frames - 1:
            raise ConfigurationError(
                f"frame_generator.delta_max: must be in [1, {self.num_frames - 1}], got {self.delta_max}")

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame_size // self.patch_size) ** 2


@dataclass
class GeneratorConditioning:
    """Conditioning for one velocity prediction.

    source_frame: (B, C, H, W); motion: (B, motion_dim); delta: (B,) int.
    Boolean masks select which samples have a channel dropped and replaced
    by the learned null.
    """

    source_frame: torch.Tensor
    motion: torch.Tensor
    delta: torch.Tensor
    drop_motion: torch.Tensor | None = None
    drop_frame: torch.Tensor | None = None


@dataclass
class FlowSample:
    """One training tuple of the flow-matching objective."""

    z0: torch.Tensor
    z1: torch.Tensor
    tau: torch.Tensor
    z_tau: torch.Tensor
    u: torch.Tensor
    cond: GeneratorConditioning

    @classmethod
    def build(cls, z0: torch.Tensor, z1: torch.Tensor, tau: torch.Tensor,
              cond: GeneratorConditioning) -> "FlowSample":
        return cls(z0=z0, z1=z1, tau=tau, z_tau=interpolate(z0, z1, tau),
                   u=target_field(z0, z1), cond=cond)


class FrameGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config
        self.noise_embed = nn.Conv2d(c.channels, c.dim, kernel_size=c.patch_size,
                                     stride=c.patch_size)
        self.source_embed = nn.Conv2d(c.channels, c.dim, kernel_size=c.patch_size,
                                      stride=c.patch_size)
        n = c.tokens_per_frame
        self.pos = nn.Parameter(torch.zeros(1, n, c.dim))
        self.stream = nn.Parameter(torch.zeros(2, 1, c.dim))
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.stream, std=0.02)
        self.null_frame_token = nn.Parameter(torch.zeros(1, 1, c.dim))
        self.null_motion = nn.Parameter(torch.zeros(c.motion_dim))
        nn.init.normal_(self.null_frame_token, std=0.02)
        nn.init.normal_(self.null_motion, std=0.02)

        self.tau_mlp = nn.Sequential(nn.Linear(c.dim, c.dim), nn.SiLU(), nn.Linear(c.dim, c.dim))
        self.delta_mlp = nn.Sequential(nn.Linear(c.dim, c.dim), nn.SiLU(), nn.Linear(c.dim, c.dim))
        self.motion_proj = nn.Linear(c.motion_dim, c.dim)

        self.blocks = nn.ModuleList(AdaLNBlock(c.dim, c.num_heads) for _ in range(c.depth))
        self.final_norm = nn.LayerNorm(c.dim, elementwise_affine=False)
        self.final_ada = nn.Linear(c.dim, c.dim * 2)
        nn.init.normal_(self.final_ada.weight, std=0.02)
        nn.init.zeros_(self.final_ada.bias)
        self.head = nn.Linear(c.dim, c.channels * c.patch_size ** 2)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def _cond_vector(self, tau: torch.Tensor, cond: GeneratorConditioning) -> torch.Tensor:
        c = self.config
        delta = cond.delta
        if torch.any(delta < 1) or torch.any(delta > c.delta_max):
            raise ConfigurationError(
                f"frame_generator.delta: values must be in [1, {c.delta_max}]")
        motion = cond.motion
        if cond.drop_motion is not None and cond.drop_motion.any():
            null = self.null_motion.to(motion.dtype).expand_as(motion)
            motion = torch.where(cond.drop_motion[:, None], null, motion)
        vec = self.tau_mlp(sinusoidal_embedding(tau.to(motion.dtype) * 1000.0, c.dim))
        vec = vec + self.delta_mlp(
            sinusoidal_embedding(delta.to(motion.dtype) * (1000.0 / c.delta_max), c.dim))
        return vec + self.motion_proj(motion)

    def predict_velocity(self, z_tau: torch.Tensor, tau, cond: GeneratorConditioning
                         ) -> torch.Tensor:
        """z_tau: (B, C, H, W); tau scalar or (B,). Returns a velocity field."""
        c = self.config
        b = z_tau.shape[0]
        tau_t = torch.as_tensor(tau, dtype=z_tau.dtype, device=z_tau.device).reshape(-1)
        if tau_t.numel() == 1:
            tau_t = tau_t.expand(b)
        vec = self._cond_vector(tau_t, cond)

        noise_tok = self.noise_embed(z_tau).flatten(2).transpose(1, 2)
        src_tok = self.source_embed(cond.source_frame).flatten(2).transpose(1, 2)
        if cond.drop_frame is not None and cond.drop_frame.any():
            null = self.null_frame_token.to(src_tok.dtype).expand_as(src_tok)
            src_tok = torch.where(cond.drop_frame[:, None, None], null, src_tok)
        pos = self.pos.to(z_tau.dtype)
        stream = self.stream.to(z_tau.dtype)
        x = torch.cat([noise_tok + pos + stream[0], src_tok + pos + stream[1]], dim=1)

        for block in self.blocks:
            x = block(x, vec)
        n = c.tokens_per_frame
        shift, scale = self.final_ada(F.silu(vec)).chunk(2, dim=-1)
        out = self.final_norm(x[:, :n]) * (1 + scale[:, None, :]) + shift[:, None, :]
        out = self.head(out)

        grid = c.frame_size // c.patch_size
        p = c.patch_size
        out = out.reshape(b, grid, grid, c.channels, p, p)
        return out.permute(0, 3, 1, 4, 2, 5).reshape(b, c.channels, c.frame_size, c.frame_size)

    @torch.no_grad()
    def sample(self, x_t: torch.Tensor, m_t: torch.Tensor, delta: int, steps: int,
               rng: torch.Generator) -> torch.Tensor:
        """Euler-integrate the learned ODE from Gaussian noise to a frame.

        x_t: (C, H, W) or (B, C, H, W); m_t matching (motion_dim,) or (B, motion_dim).
        Returns frames clipped to [0, 1].
        """
        if steps < 1:
            raise ConfigurationError(f"sample.steps: must be >= 1, got {steps}")
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t.unsqueeze(0)
            m_t = m_t.unsqueeze(0)
        b = x_t.shape[0]
        cond = GeneratorConditioning(
            source_frame=x_t, motion=m_t,
            delta=torch.full((b,), int(delta), dtype=torch.long, device=x_t.device))
        z0 = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
        z = euler_integrate(lambda zz, tt: self.predict_velocity(zz, tt, cond), z0, steps)
        z = z.clamp(0.0, 1.0)
        return z[0] if squeeze else z


def euler_integrate(velocity_fn, z0: torch.Tensor, steps: int) -> torch.Tensor:
    """Explicit Euler from tau=0 to tau=1 with step 1/steps."""
    if steps < 1:
        raise ConfigurationError(f"euler_integrate.steps: must be >= 1, got {steps}")
    z = z0
    h = 1.0 / steps
    for k in range(steps):
        z = z + h * velocity_fn(z, k * h)
    return z


def fm_loss(generator: FrameGenerator, batch: FlowSample) -> torch.Tensor:
    """Mean squared error between the predicted velocity and the target field."""
    if batch.z_tau.shape[0] == 0:
        raise ConfigurationError("fm_loss: empty batch")
    v = generator.predict_velocity(batch.z_tau, batch.tau, batch.cond)
    return ((v - batch.u) ** 2).mean()
