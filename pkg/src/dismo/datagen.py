"""Deterministic factored sprite-video generation.

Every clip is a pure function of (sprite identity, motion program, camera
program, length, resolution, seed). Identity controls appearance (shape,
color, background texture), the motion program controls the sprite
trajectory, and the camera program warps the composed frame with a
temporally smooth affine schedule. Ground-truth factor labels are recorded
in a JSON manifest next to one lossless PNG per frame.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from dismo.errors import ConfigurationError, CorruptDatasetError, NotFoundError

SHAPES = ("circle", "square", "triangle", "star")
MOTION_KINDS = ("linear", "circular", "bounce", "zigzag", "shake", "still")
CAMERA_KINDS = ("none", "pan", "zoom", "rotate")

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Kinds whose trajectory is invariant under time reversal up to a phase shift.
_REVERSIBLE_KINDS = {"shake": True, "still": True, "linear": False,
                     "circular": False, "bounce": False, "zigzag": False}

_MOTION_PARAM_SPECS = {
    "linear": {"vx": (-10.0, 10.0), "vy": (-10.0, 10.0)},
    "circular": {"radius": (0.5, 24.0), "period": (2.0, 64.0), "phase": (None, None)},
    "bounce": {"height": (1.0, 40.0), "fall_frames": (1.0, 32.0), "damping": (0.05, 0.95)},
    "zigzag": {"vx": (-10.0, 10.0), "amplitude": (0.5, 24.0), "period": (2.0, 64.0), "phase": (None, None)},
    "shake": {"amplitude": (0.5, 24.0), "period": (2.0, 64.0), "phase": (None, None)},
    "still": {},
}

_CAMERA_PARAM_SPECS = {
    "none": {},
    "pan": {"tx_per_frame": (-8.0, 8.0), "ty_per_frame": (-8.0, 8.0)},
    "zoom": {"rate_per_frame": (-0.15, 0.15)},
    "rotate": {"deg_per_frame": (-15.0, 15.0)},
}


def _check_params(kind: str, params: dict, specs: dict, where: str) -> dict:
    spec = specs.get(kind)
    if spec is None:
        raise ConfigurationError(f"{where}.kind: unknown kind {kind!r}")
    out = {}
    for name, (lo, hi) in spec.items():
        if name == "phase":
            out[name] = float(params.get(name, 0.0))
            continue
        if name == "axis":
            continue
        if name not in params:
            raise ConfigurationError(f"{where}.params.{name}: required for kind {kind!r}")
        val = float(params[name])
        if lo is not None and not (lo <= val <= hi):
            raise ConfigurationError(
                f"{where}.params.{name}: {val} outside allowed range [{lo}, {hi}]")
        out[name] = val
    if kind == "shake":
        axis = params.get("axis", "x")
        if axis not in ("x", "y"):
            raise ConfigurationError(f"{where}.params.axis: must be 'x' or 'y', got {axis!r}")
        out["axis"] = axis
    extra = set(params) - set(out)
    if extra:
        raise ConfigurationError(f"{where}.params: unknown keys {sorted(extra)} for kind {kind!r}")
    return out


@dataclass(frozen=True)
class SpriteSpec:
    """Appearance of one identity: shape, fill color, background texture, size."""

    identity_id: int
    shape: str
    base_color: tuple[float, float, float]
    texture_seed: int
    size_px: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigurationError(f"sprite.shape: unknown shape {self.shape!r}")
        if not all(0.0 <= c <= 1.0 for c in self.base_color):
            raise ConfigurationError(f"sprite.base_color: components must be in [0,1], got {self.base_color}")
        if self.size_px < 4:
            raise ConfigurationError(f"sprite.size_px: must be >= 4, got {self.size_px}")

    def validate_for(self, resolution: int) -> None:
        if self.size_px > resolution // 2:
            raise ConfigurationError(
                f"sprite.size_px: {self.size_px} exceeds half the frame side {resolution // 2}")

    def to_json(self) -> dict:
        return {"identity_id": self.identity_id, "shape": self.shape,
                "base_color": list(self.base_color), "texture_seed": self.texture_seed,
                "size_px": self.size_px}

    @classmethod
    def from_json(cls, d: dict) -> "SpriteSpec":
        return cls(int(d["identity_id"]), d["shape"], tuple(float(c) for c in d["base_color"]),
                   int(d["texture_seed"]), int(d["size_px"]))


@dataclass(frozen=True)
class MotionProgram:
    """A closed-form sprite trajectory; pos(t) = start + displacement(t)."""

    action_id: int
    kind: str
    params: dict = field(default_factory=dict)
    reversible: bool | None = None

    def __post_init__(self):
        checked = _check_params(self.kind, self.params, _MOTION_PARAM_SPECS, "motion")
        object.__setattr__(self, "params", checked)
        derived = _REVERSIBLE_KINDS[self.kind]
        if self.reversible is None:
            object.__setattr__(self, "reversible", derived)
        elif self.reversible != derived:
            raise ConfigurationError(
                f"motion.reversible: kind {self.kind!r} is {'reversible' if derived else 'non-reversible'}")

    def displacement(self, t: float) -> tuple[float, float]:
        """Offset from the start position at (possibly fractional) frame t."""
        p = self.params
        if self.kind == "still":
            return (0.0, 0.0)
        if self.kind == "linear":
            return (p["vx"] * t, p["vy"] * t)
        if self.kind == "circular":
            w0 = 2.0 * math.pi * p["phase"]
            w = 2.0 * math.pi * (t / p["period"] + p["phase"])
            r = p["radius"]
            return (r * (math.cos(w) - math.cos(w0)), r * (math.sin(w) - math.sin(w0)))
        if self.kind == "zigzag":
            dy = p["amplitude"] * (_triangle(t / p["period"] + p["phase"]) - _triangle(p["phase"]))
            return (p["vx"] * t, dy)
        if self.kind == "shake":
            w0 = 2.0 * math.pi * p["phase"]
            w = 2.0 * math.pi * (t / p["period"] + p["phase"])
            d = p["amplitude"] * (math.sin(w) - math.sin(w0))
            return (d, 0.0) if p["axis"] == "x" else (0.0, d)
        if self.kind == "bounce":
            return (0.0, _bounce_drop(t, p["height"], p["fall_frames"], p["damping"]))
        raise ConfigurationError(f"motion.kind: unknown kind {self.kind!r}")

    def trajectory(self, num_frames: int) -> np.ndarray:
        return np.array([self.displacement(t) for t in range(num_frames)], dtype=np.float64)

    def to_json(self) -> dict:
        return {"action_id": self.action_id, "kind": self.kind,
                "params": dict(self.params), "reversible": self.reversible}

    @classmethod
    def from_json(cls, d: dict) -> "MotionProgram":
        return cls(int(d["action_id"]), d["kind"], dict(d["params"]))


def _triangle(u: float) -> float:
    """Triangle wave with period 1, range [-1, 1], zero at u=0 rising."""
    frac = (u + 0.25) % 1.0
    return 4.0 * abs(frac - 0.5) - 1.0


def _bounce_drop(t: float, height: float, fall_frames: float, damping: float) -> float:
    """Downward displacement of a damped bounce starting at the apex."""
    g = 2.0 * height / (fall_frames ** 2)
    if t < fall_frames:
        return 0.5 * g * t * t
    t = t - fall_frames
    n = 1
    while n < 64:
        dur = 2.0 * fall_frames * damping ** n
        if dur < 1e-6:
            break
        if t < dur:
            v = g * fall_frames * damping ** n
            return height - (v * t - 0.5 * g * t * t)
        t -= dur
        n += 1
    return height


@dataclass(frozen=True)
class CameraProgram:
    """A temporally smooth per-frame affine schedule simulating camera motion."""

    cam_id: int
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        checked = _check_params(self.kind, self.params, _CAMERA_PARAM_SPECS, "camera")
        object.__setattr__(self, "params", checked)

    def affine_at(self, t: float) -> dict:
        """Affine parameters at frame t: dict(scale, angle_deg, tx, ty)."""
        p = self.params
        out = {"scale": 1.0, "angle_deg": 0.0, "tx": 0.0, "ty": 0.0}
        if self.kind == "pan":
            out["tx"] = p["tx_per_frame"] * t
            out["ty"] = p["ty_per_frame"] * t
        elif self.kind == "zoom":
            out["scale"] = (1.0 + p["rate_per_frame"]) ** t
        elif self.kind == "rotate":
            out["angle_deg"] = p["deg_per_frame"] * t
        return out

    def is_identity(self) -> bool:
        return self.kind == "none"

    def to_json(self) -> dict:
        return {"cam_id": self.cam_id, "kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_json(cls, d: dict) -> "CameraProgram":
        return cls(int(d["cam_id"]), d["kind"], dict(d["params"]))


@dataclass
class VideoClip:
    """An ordered frame stack (T, H, W, C) with values in [0, 1] plus labels."""

    frames: np.ndarray
    fps: float
    labels: dict
    clip_id: str

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ConfigurationError(f"clip.frames: expected 4-D (T,H,W,C), got shape {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def reversed(self) -> "VideoClip":
        return VideoClip(self.frames[::-1].copy(), self.fps, dict(self.labels),
                         self.clip_id + "-rev")


# ---------------------------------------------------------------------------
# Default factor vocabularies
# ---------------------------------------------------------------------------

def default_identities(n: int, size_px: int = 12) -> list[SpriteSpec]:
    """n visually distinct identities: shape cycles, hue spreads, texture differs."""
    specs = []
    for i in range(n):
        rgb = colorsys.hsv_to_rgb((i / max(n, 1) + 0.05) % 1.0, 0.85, 0.95)
        specs.append(SpriteSpec(identity_id=i, shape=SHAPES[i % len(SHAPES)],
                                base_color=tuple(round(c, 4) for c in rgb),
                                texture_seed=1000 + i, size_px=size_px))
    return specs


_DEFAULT_ACTIONS = [
    ("linear", {"vx": 3.2, "vy": 0.0}),
    ("linear", {"vx": 0.0, "vy": 3.2}),
    ("circular", {"radius": 12.0, "period": 8.0}),
    ("zigzag", {"vx": 2.0, "amplitude": 8.0, "period": 4.0}),
    ("shake", {"amplitude": 6.0, "period": 4.0, "axis": "x"}),
    ("bounce", {"height": 18.0, "fall_frames": 3.0, "damping": 0.55}),
]


def default_actions(n: int) -> list[MotionProgram]:
    if n > len(_DEFAULT_ACTIONS):
        raise ConfigurationError(f"data.actions: at most {len(_DEFAULT_ACTIONS)} default actions, got {n}")
    return [MotionProgram(action_id=i, kind=kind, params=dict(params))
            for i, (kind, params) in enumerate(_DEFAULT_ACTIONS[:n])]


_DEFAULT_CAMERAS = [
    ("none", {}),
    ("pan", {"tx_per_frame": 1.6, "ty_per_frame": 0.8}),
    ("zoom", {"rate_per_frame": 0.025}),
    ("rotate", {"deg_per_frame": 2.5}),
]


def default_cameras(n: int) -> list[CameraProgram]:
    if n > len(_DEFAULT_CAMERAS):
        raise ConfigurationError(f"data.cameras: at most {len(_DEFAULT_CAMERAS)} default cameras, got {n}")
    return [CameraProgram(cam_id=i, kind=kind, params=dict(params))
            for i, (kind, params) in enumerate(_DEFAULT_CAMERAS[:n])]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_SUPERSAMPLE = 4


def _background(spec: SpriteSpec, resolution: int) -> np.ndarray:
    """Low-contrast per-identity texture so appearance carries identity info."""
    rs = np.random.default_rng(spec.texture_seed)
    tone = 0.42 + 0.2 * rs.random(3)
    grid = 7
    coarse = rs.standard_normal((grid, grid, 3))
    idx = np.linspace(0.0, grid - 1.0, resolution)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, grid - 1)
    frac_r = (idx - i0)[:, None, None]
    rows = coarse[i0] * (1 - frac_r) + coarse[i1] * frac_r
    frac_c = (idx - i0)[None, :, None]
    bg = rows[:, i0] * (1 - frac_c) + rows[:, i1] * frac_c
    bg = tone[None, None, :] + 0.14 * bg
    return np.clip(bg, 0.03, 0.97).astype(np.float32)


def _points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon test, vectorized over points."""
    inside = np.zeros(px.shape, dtype=bool)
    k = len(verts)
    for i in range(k):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % k]
        cond = (y1 > py) != (y2 > py)
        denom = y2 - y1
        if abs(denom) < 1e-12:
            continue
        xint = x1 + (py - y1) * (x2 - x1) / denom
        inside ^= cond & (px < xint)
    return inside


def _shape_vertices(shape: str, cx: float, cy: float, size_px: int) -> np.ndarray | None:
    r = size_px / 2.0
    if shape == "triangle":
        angles = np.deg2rad([-90.0, 30.0, 150.0])
        return np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)
    if shape == "star":
        angles = np.deg2rad(-90.0 + 36.0 * np.arange(10))
        radii = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
        return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    return None


def _sprite_alpha(shape: str, size_px: int, cx: float, cy: float, resolution: int) -> np.ndarray:
    """Anti-aliased coverage mask of the sprite at a subpixel center."""
    r = size_px / 2.0
    pad = 2.0
    x_lo = max(0, int(math.floor(cx - r - pad)))
    x_hi = min(resolution, int(math.ceil(cx + r + pad)))
    y_lo = max(0, int(math.floor(cy - r - pad)))
    y_hi = min(resolution, int(math.ceil(cy + r + pad)))
    alpha = np.zeros((resolution, resolution), dtype=np.float32)
    if x_hi <= x_lo or y_hi <= y_lo:
        return alpha
    s = _SUPERSAMPLE
    xs = x_lo + (np.arange((x_hi - x_lo) * s) + 0.5) / s
    ys = y_lo + (np.arange((y_hi - y_lo) * s) + 0.5) / s
    px, py = np.meshgrid(xs, ys)
    if shape == "circle":
        inside = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    elif shape == "square":
        inside = np.maximum(np.abs(px - cx), np.abs(py - cy)) <= r * 0.82
    else:
        inside = _points_in_polygon(px, py, _shape_vertices(shape, cx, cy, size_px))
    cov = inside.reshape(y_hi - y_lo, s, x_hi - x_lo, s).mean(axis=(1, 3))
    alpha[y_lo:y_hi, x_lo:x_hi] = cov
    return alpha


def affine_matrix(scale: float = 1.0, angle_deg: float = 0.0, shear_deg: float = 0.0,
                  tx: float = 0.0, ty: float = 0.0, hflip: bool = False) -> np.ndarray:
    """Forward 2x3 pixel-space affine about the frame center.

    Composition order: flip, then scale, shear, rotate, translate.
    """
    a = math.radians(angle_deg)
    s = math.tan(math.radians(shear_deg))
    flip = np.array([[-1.0 if hflip else 1.0, 0.0], [0.0, 1.0]])
    sc = np.array([[scale, 0.0], [0.0, scale]])
    sh = np.array([[1.0, s], [0.0, 1.0]])
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    lin = rot @ sh @ sc @ flip
    return np.concatenate([lin, np.array([[tx], [ty]])], axis=1)


def warp_frame(frame: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a forward center-origin affine with bilinear sampling, border padding."""
    h, w = frame.shape[:2]
    lin = matrix[:, :2]
    trans = matrix[:, 2]
    inv = np.linalg.inv(lin)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    out = np.stack([xs - cx - trans[0], ys - cy - trans[1]], axis=-1)
    src = out @ inv.T
    sx = src[..., 0] + cx
    sy = src[..., 1] + cy
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    x0 = np.clip(x0.astype(int), 0, w - 1)
    y0 = np.clip(y0.astype(int), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    f = frame.astype(np.float64)
    top = f[y0, x0] * (1 - fx) + f[y0, x1] * fx
    bot = f[y1, x0] * (1 - fx) + f[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(frame.dtype)


def dewarp_frame(frame: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Invert warp_frame(frame, matrix) up to interpolation/border error."""
    lin = matrix[:, :2]
    inv_lin = np.linalg.inv(lin)
    inv_t = -inv_lin @ matrix[:, 2]
    return warp_frame(frame, np.concatenate([inv_lin, inv_t[:, None]], axis=1))


def render_clip(spec: SpriteSpec, motion: MotionProgram, camera: CameraProgram,
                num_frames: int, resolution: int, seed: int,
                fps: float = 6.0, clip_id: str | None = None) -> VideoClip:
    """Render one clip; deterministic for fixed arguments.

    The seed only chooses the start position (kept inside the frame wherever
    the trajectory allows); all dynamics come from the programs.
    """
    if num_frames < 2:
        raise ConfigurationError(f"render.num_frames: must be >= 2, got {num_frames}")
    if resolution < 16:
        raise ConfigurationError(f"render.resolution: must be >= 16, got {resolution}")
    spec.validate_for(resolution)

    rng = np.random.default_rng(seed)
    traj = motion.trajectory(num_frames)
    half = spec.size_px / 2.0 + 1.0
    lo = np.array([half, half]) - traj.min(axis=0)
    hi = np.array([resolution - half, resolution - half]) - traj.max(axis=0)
    start = np.where(hi > lo, lo + rng.random(2) * np.maximum(hi - lo, 0.0), (lo + hi) / 2.0)

    bg = _background(spec, resolution)
    frames = np.empty((num_frames, resolution, resolution, 3), dtype=np.float32)
    color = np.array(spec.base_color, dtype=np.float32)
    for t in range(num_frames):
        cx, cy = start + traj[t]
        alpha = _sprite_alpha(spec.shape, spec.size_px, cx, cy, resolution)[..., None]
        frame = bg * (1.0 - alpha) + color[None, None, :] * alpha
        cam = camera.affine_at(t)
        if not camera.is_identity():
            frame = warp_frame(frame, affine_matrix(scale=cam["scale"], angle_deg=cam["angle_deg"],
                                                    tx=cam["tx"], ty=cam["ty"]))
        frames[t] = np.clip(frame, 0.0, 1.0)

    if clip_id is None:
        clip_id = f"adhoc_i{spec.identity_id}_a{motion.action_id}_k{camera.cam_id}_s{seed}"
    labels = {"identity_id": spec.identity_id, "action_id": motion.action_id,
              "cam_id": camera.cam_id}
    return VideoClip(frames=frames, fps=fps, labels=labels, clip_id=clip_id)


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    """8-bit quantization applied before storage and before any training."""
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Dataset generation and persistence
# ---------------------------------------------------------------------------

SPLIT_POLICIES = ("none", "by-action-holdout", "by-identity-holdout")


@dataclass
class GenerationConfig:
    identities: list[SpriteSpec]
    actions: list[MotionProgram]
    cameras: list[CameraProgram]
    clips_per_cell: int = 4
    num_frames: int = 8
    resolution: int = 64
    fps: float = 6.0
    split_policy: str = "none"
    holdout: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.identities:
            raise ConfigurationError("data.identities: vocabulary must be non-empty")
        if not self.actions:
            raise ConfigurationError("data.actions: vocabulary must be non-empty")
        if not self.cameras:
            raise ConfigurationError("data.cameras: vocabulary must be non-empty")
        if self.clips_per_cell < 1:
            raise ConfigurationError(f"data.clips_per_cell: must be >= 1, got {self.clips_per_cell}")
        if self.split_policy not in SPLIT_POLICIES:
            raise ConfigurationError(f"data.split_policy: unknown policy {self.split_policy!r}")
        if self.split_policy == "by-action-holdout" and not any(
                a.action_id == self.holdout for a in self.actions):
            raise ConfigurationError(f"data.holdout: action_id {self.holdout} not in vocabulary")
        if self.split_policy == "by-identity-holdout" and not any(
                s.identity_id == self.holdout for s in self.identities):
            raise ConfigurationError(f"data.holdout: identity_id {self.holdout} not in vocabulary")

    def to_json(self) -> dict:
        return {
            "identities": [s.to_json() for s in self.identities],
            "actions": [a.to_json() for a in self.actions],
            "cameras": [c.to_json() for c in self.cameras],
            "clips_per_cell": self.clips_per_cell,
            "num_frames": self.num_frames,
            "resolution": self.resolution,
            "fps": self.fps,
            "split_policy": self.split_policy,
            "holdout": self.holdout,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GenerationConfig":
        return cls(
            identities=[SpriteSpec.from_json(s) for s in d["identities"]],
            actions=[MotionProgram.from_json(a) for a in d["actions"]],
            cameras=[CameraProgram.from_json(c) for c in d["cameras"]],
            clips_per_cell=int(d["clips_per_cell"]), num_frames=int(d["num_frames"]),
            resolution=int(d["resolution"]), fps=float(d["fps"]),
            split_policy=d["split_policy"], holdout=int(d["holdout"]), seed=int(d["seed"]),
        )


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed derived from the given parts."""
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


class DatasetManifest:
    """Parsed manifest.json plus its root directory."""

    def __init__(self, doc: dict, root: Path):
        self.doc = doc
        self.root = Path(root)
        self._by_id = {r["clip_id"]: r for r in doc["records"]}
        if len(self._by_id) != len(doc["records"]):
            raise CorruptDatasetError("manifest: duplicate clip_ids")

    @property
    def records(self) -> list[dict]:
        return self.doc["records"]

    @property
    def num_frames(self) -> int:
        return self.doc["num_frames"]

    @property
    def resolution(self) -> int:
        return self.doc["resolution"]

    @property
    def fps(self) -> float:
        return self.doc["fps"]

    @property
    def generation_config(self) -> GenerationConfig:
        return GenerationConfig.from_json(self.doc["generation_config"])

    @property
    def manifest_hash(self) -> str:
        return config_hash(self.doc)

    def clip_ids(self, split: str | None = None) -> list[str]:
        return [r["clip_id"] for r in self.records if split is None or r["split"] == split]

    def record(self, clip_id: str) -> dict:
        rec = self._by_id.get(clip_id)
        if rec is None:
            raise NotFoundError(f"clip_id {clip_id!r} not in manifest")
        return rec

    def select(self, split: str | None = None, **label_filters) -> list[dict]:
        out = []
        for r in self.records:
            if split is not None and r["split"] != split:
                continue
            if all(r["labels"].get(k) == v for k, v in label_filters.items()):
                out.append(r)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        mpath = path / MANIFEST_NAME if path.is_dir() else path
        if not mpath.exists():
            raise NotFoundError(f"manifest not found at {mpath}")
        with open(mpath, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise CorruptDatasetError(
                f"manifest schema_version {doc.get('schema_version')} != {MANIFEST_SCHEMA_VERSION}")
        return cls(doc, mpath.parent)


def _split_tag(policy: str, holdout: int, identity_id: int, action_id: int) -> str:
    if policy == "by-action-holdout":
        return "test" if action_id == holdout else "train"
    if policy == "by-identity-holdout":
        return "test" if identity_id == holdout else "train"
    return "train"


def _randomize_phase(program: MotionProgram, rng: np.random.Generator) -> MotionProgram:
    if "phase" in program.params:
        params = dict(program.params)
        params["phase"] = round(float(rng.random()), 6)
        return replace(program, params=params)
    return program


def generate_dataset(config: GenerationConfig, out_dir: str | Path) -> DatasetManifest:
    """Render every (identity, action, camera) cell and write clips + manifest.

    Clip content is a pure function of the config; regeneration reproduces
    the manifest hash bit for bit. Frames are 8-bit quantized on disk, and
    the quantized values are what training consumes.
    """
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"output directory {out} is not writable: {exc}") from exc

    records = []
    index = 0
    for spec in config.identities:
        spec.validate_for(config.resolution)
        for action in config.actions:
            for camera in config.cameras:
                for _ in range(config.clips_per_cell):
                    clip_seed = stable_seed(config.seed, index)
                    rng = np.random.default_rng(stable_seed(config.seed, index, "phase"))
                    program = _randomize_phase(action, rng)
                    clip_id = f"clip_{index:05d}"
                    clip = render_clip(spec, program, camera, config.num_frames,
                                       config.resolution, clip_seed, fps=config.fps,
                                       clip_id=clip_id)
                    rel = f"clips/{clip_id}"
                    _write_frames(out / rel, clip.frames)
                    records.append({
                        "clip_id": clip_id,
                        "path": rel,
                        "labels": clip.labels,
                        "split": _split_tag(config.split_policy, config.holdout,
                                            spec.identity_id, action.action_id),
                    })
                    index += 1

    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "generation_config": config.to_json(),
        "config_hash": config_hash(config.to_json()),
        "num_frames": config.num_frames,
        "resolution": config.resolution,
        "fps": config.fps,
        "vocabularies": {
            "identities": [s.to_json() for s in config.identities],
            "actions": [a.to_json() for a in config.actions],
            "cameras": [c.to_json() for c in config.cameras],
        },
        "records": records,
    }
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return DatasetManifest(doc, out)


def _write_frames(clip_dir: Path, frames: np.ndarray) -> None:
    clip_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(quantize_frames(frames)):
        Image.fromarray(frame).save(clip_dir / f"frame_{t:04d}.png")


def load_clip(manifest: DatasetManifest, clip_id: str) -> VideoClip:
    """Load a stored clip; exact round trip of the quantized frames."""
    rec = manifest.record(clip_id)
    clip_dir = manifest.root / rec["path"]
    frames = []
    for t in range(manifest.num_frames):
        fpath = clip_dir / f"frame_{t:04d}.png"
        if not fpath.exists():
            raise CorruptDatasetError(f"missing frame file {fpath}")
        try:
            with Image.open(fpath) as img:
                frames.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
        except OSError as exc:
            raise CorruptDatasetError(f"unreadable frame file {fpath}: {exc}") from exc
    stack = np.stack(frames).astype(np.float32) / 255.0
    return VideoClip(frames=stack, fps=manifest.fps, labels=dict(rec["labels"]),
                     clip_id=clip_id)


def load_split_arrays(manifest: DatasetManifest, split: str | None = None
                      ) -> tuple[np.ndarray, list[dict]]:
    """Load a whole split as one uint8 array (N, T, H, W, C) plus its records."""
    recs = manifest.select(split=split)
    n = len(recs)
    t, r = manifest.num_frames, manifest.resolution
    arr = np.empty((n, t, r, r, 3), dtype=np.uint8)
    for i, rec in enumerate(recs):
        clip = load_clip(manifest, rec["clip_id"])
        arr[i] = quantize_frames(clip.frames)
    return arr, recs
