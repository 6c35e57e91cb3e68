"""Frame-consistent photometric and geometric clip augmentation.

One parameter set is sampled per clip and applied identically to every
frame, so the augmentation can never be confused with motion. Photometric
ops run in the order brightness, contrast, saturation, hue; the geometric
warp is a single affine (flip, scale, shear, rotate, translate) sampled
with border padding and bilinear interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from dismo.datagen import VideoClip
from dismo.errors import ConfigurationError

PADDING_MODES = ("border", "zeros", "reflection")


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 1.0
    contrast: float = 1.0
    hue: float = 0.0
    saturation: float = 1.0

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"photometric.{name}: factor must be > 0")
        if not -0.5 <= self.hue <= 0.5:
            raise ConfigurationError(f"photometric.hue: must be in [-0.5, 0.5], got {self.hue}")

    def is_identity(self) -> bool:
        return (self.brightness, self.contrast, self.hue, self.saturation) == (1.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True)
class GeometricParams:
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)
    angle: float = 0.0
    shear: float = 0.0
    hflip: bool = False

    def is_identity(self) -> bool:
        return (self.scale == 1.0 and self.translate == (0.0, 0.0)
                and self.angle == 0.0 and self.shear == 0.0 and not self.hflip)


def _check_range(name: str, rng: tuple[float, float], identity: float, enabled: bool) -> None:
    lo, hi = rng
    if lo > hi:
        raise ConfigurationError(f"augment.{name}: range lower bound {lo} exceeds upper bound {hi}")
    if enabled and not (lo <= identity <= hi):
        raise ConfigurationError(
            f"augment.{name}: range ({lo}, {hi}) must contain the identity value {identity}")


@dataclass(frozen=True)
class AugmentationConfig:
    """Sampling ranges for every augmentation parameter.

    Defaults are the recorded reference ranges; each range must contain the
    identity element unless its group is disabled.
    """

    brightness: tuple[float, float] = (0.5, 1.5)
    contrast: tuple[float, float] = (0.5, 1.5)
    hue: tuple[float, float] = (-0.3, 0.3)
    saturation: tuple[float, float] = (0.5, 1.5)
    scale: tuple[float, float] = (0.75, 1.0)
    translate: tuple[float, float] = (-0.3, 0.3)
    angle: tuple[float, float] = (-30.0, 30.0)
    shear: tuple[float, float] = (-15.0, 15.0)
    hflip: bool = True
    padding_mode: str = "border"
    enable_photometric: bool = True
    enable_geometric: bool = True

    def __post_init__(self):
        if self.padding_mode not in PADDING_MODES:
            raise ConfigurationError(f"augment.padding_mode: unknown mode {self.padding_mode!r}")
        _check_range("brightness", self.brightness, 1.0, self.enable_photometric)
        _check_range("contrast", self.contrast, 1.0, self.enable_photometric)
        _check_range("hue", self.hue, 0.0, self.enable_photometric)
        _check_range("saturation", self.saturation, 1.0, self.enable_photometric)
        _check_range("scale", self.scale, 1.0, self.enable_geometric)
        _check_range("translate", self.translate, 0.0, self.enable_geometric)
        _check_range("angle", self.angle, 0.0, self.enable_geometric)
        _check_range("shear", self.shear, 0.0, self.enable_geometric)
        if not -0.5 <= self.hue[0] <= self.hue[1] <= 0.5:
            raise ConfigurationError(f"augment.hue: range must lie inside [-0.5, 0.5]")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(brightness=(1.0, 1.0), contrast=(1.0, 1.0), hue=(0.0, 0.0),
                   saturation=(1.0, 1.0), scale=(1.0, 1.0), translate=(0.0, 0.0),
                   angle=(0.0, 0.0), shear=(0.0, 0.0), hflip=False)


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(lo + (hi - lo) * torch.rand((), generator=rng).item())


def sample_params(rng: torch.Generator, config: AugmentationConfig
                  ) -> tuple[PhotometricParams, GeometricParams]:
    """Draw one per-clip parameter set, each field uniform over its range."""
    if config.enable_photometric:
        photo = PhotometricParams(
            brightness=_uniform(rng, *config.brightness),
            contrast=_uniform(rng, *config.contrast),
            hue=_uniform(rng, *config.hue),
            saturation=_uniform(rng, *config.saturation),
        )
    else:
        photo = PhotometricParams()
    if config.enable_geometric:
        geo = GeometricParams(
            scale=_uniform(rng, *config.scale),
            translate=(_uniform(rng, *config.translate), _uniform(rng, *config.translate)),
            angle=_uniform(rng, *config.angle),
            shear=_uniform(rng, *config.shear),
            hflip=bool(config.hflip and torch.rand((), generator=rng).item() < 0.5),
        )
    else:
        geo = GeometricParams()
    return photo, geo


# ---------------------------------------------------------------------------
# Color space helpers ([0,1] float RGB <-> HSV)
# ---------------------------------------------------------------------------

def _rgb_to_hsv(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb.unbind(dim=-3)
    maxc = torch.max(rgb, dim=-3).values
    minc = torch.min(rgb, dim=-3).values
    v = maxc
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / maxc.clamp(min=1e-12), torch.zeros_like(maxc))
    safe = delta.clamp(min=1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc,
                    torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return torch.stack([h, s, v], dim=-3)


def _hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    h, s, v = hsv.unbind(dim=-3)
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    i = i.to(torch.int64) % 6
    out = torch.stack([
        torch.stack([v, t, p], dim=-3), torch.stack([q, v, p], dim=-3),
        torch.stack([p, v, t], dim=-3), torch.stack([p, q, v], dim=-3),
        torch.stack([t, p, v], dim=-3), torch.stack([v, p, q], dim=-3),
    ])
    idx = i.unsqueeze(-3).expand_as(out[0]).unsqueeze(0)
    return out.gather(0, idx).squeeze(0)


def apply_photometric(frames: torch.Tensor, params: PhotometricParams) -> torch.Tensor:
    """frames: (..., C, H, W) in [0,1]. Order: brightness, contrast, saturation, hue."""
    x = frames * params.brightness
    x = (x - 0.5) * params.contrast + 0.5
    x = x.clamp(0.0, 1.0)
    if params.saturation != 1.0 or params.hue != 0.0:
        hsv = _rgb_to_hsv(x)
        h, s, v = hsv.unbind(dim=-3)
        s = (s * params.saturation).clamp(0.0, 1.0)
        h = (h + params.hue) % 1.0
        x = _hsv_to_rgb(torch.stack([h, s, v], dim=-3))
    return x.clamp(0.0, 1.0)


def geometric_theta(params: GeometricParams) -> torch.Tensor:
    """2x3 inverse-map matrix in normalized coordinates for grid_sample."""
    a = math.radians(params.angle)
    sh = math.tan(math.radians(params.shear))
    flip = torch.tensor([[-1.0 if params.hflip else 1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    sc = torch.tensor([[params.scale, 0.0], [0.0, params.scale]], dtype=torch.float64)
    shear = torch.tensor([[1.0, sh], [0.0, 1.0]], dtype=torch.float64)
    rot = torch.tensor([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]],
                       dtype=torch.float64)
    lin = rot @ shear @ sc @ flip
    inv = torch.linalg.inv(lin)
    # translation is a fraction of the frame side; normalized coords span 2 units
    tvec = torch.tensor([2.0 * params.translate[0], 2.0 * params.translate[1]],
                        dtype=torch.float64)
    theta = torch.cat([inv, (-inv @ tvec).unsqueeze(1)], dim=1)
    return theta


def apply_geometric(frames: torch.Tensor, params: GeometricParams,
                    padding_mode: str = "border") -> torch.Tensor:
    """frames: (T, C, H, W); one shared affine warp for the whole clip."""
    if params.is_identity():
        return frames
    t, c, h, w = frames.shape
    # the grid is built in float64 so exact transforms (e.g. flips) sample
    # exactly on pixel centers
    theta = geometric_theta(params).unsqueeze(0).expand(t, 2, 3)
    grid = F.affine_grid(theta, size=(t, c, h, w), align_corners=False)
    out = F.grid_sample(frames.to(torch.float64), grid, mode="bilinear",
                        padding_mode=padding_mode, align_corners=False)
    return out.to(frames.dtype)


def apply_tensor(frames: torch.Tensor, photo: PhotometricParams, geo: GeometricParams,
                 padding_mode: str = "border") -> torch.Tensor:
    """Augment a (T, C, H, W) clip tensor; photometric first, then the warp."""
    out = apply_photometric(frames, photo) if not photo.is_identity() else frames
    out = apply_geometric(out, geo, padding_mode=padding_mode)
    return out.clamp(0.0, 1.0)


def apply(clip: VideoClip, photo: PhotometricParams, geo: GeometricParams,
          padding_mode: str = "border") -> VideoClip:
    """Augment a VideoClip; labels and metadata pass through unchanged."""
    if clip.num_frames == 0:
        raise ConfigurationError("augment.apply: clip is empty")
    frames = torch.from_numpy(np.ascontiguousarray(clip.frames)).permute(0, 3, 1, 2)
    out = apply_tensor(frames, photo, geo, padding_mode=padding_mode)
    return VideoClip(out.permute(0, 2, 3, 1).numpy(), clip.fps, dict(clip.labels), clip.clip_id)
