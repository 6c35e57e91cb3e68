"""Joint end-to-end optimization of the motion extractor and frame generator.

Per step: a batch of clips is drawn, each clip gets one augmented view (fed
to the extractor) and one (t, t+delta) pair; the generator regresses the
flow-matching target for the destination frame conditioned on the clean
source frame, the motion embedding at t, and delta. Both parameter sets are
updated by a single AdamW step with linear warmup then constant lr.

All randomness flows through one torch.Generator whose state is stored in
checkpoints, so interrupted runs resume on the exact loss trajectory.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from dismo import augment as aug
from dismo.datagen import DatasetManifest, config_hash, load_split_arrays
from dismo.errors import ConfigurationError, TrainingDivergedError
from dismo.models import (
    FlowSample,
    FrameGenerator,
    GeneratorConditioning,
    GeneratorConfig,
    MotionExtractor,
    MotionExtractorConfig,
    fm_loss,
)

CHECKPOINT_NAME = "checkpoint.pt"
LOSS_LOG_NAME = "loss_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_iters: int = 20000
    warmup_iters: int = 1000
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    delta_max: int = 4
    dropout_motion: float = 0.1
    dropout_frame: float = 0.1
    seed: int = 0
    dataset: str = ""
    train_split: str = "train"
    log_every: int = 1
    checkpoint_every: int = 2000
    precision: str = "float32"
    # open question: whether the generator streams see the augmented view;
    # default keeps them clean so the reconstruction target is unchanged
    augment_generator_streams: bool = False

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise ConfigurationError(
                f"train.warmup_iters: {self.warmup_iters} exceeds total_iters {self.total_iters}")
        if self.lr <= 0:
            raise ConfigurationError(f"train.lr: must be > 0, got {self.lr}")
        if self.precision not in ("float32", "bfloat16"):
            raise ConfigurationError(f"train.precision: unknown precision {self.precision!r}")
        for name in ("dropout_motion", "dropout_frame"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigurationError(f"train.{name}: must be in [0, 1), got {v}")


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Linear warmup to lr over warmup_iters, then constant."""
    if config.warmup_iters <= 0:
        return config.lr
    return config.lr * min(1.0, iteration / config.warmup_iters)


def sample_dropout_mask(n: int, rate: float, rng: torch.Generator) -> torch.Tensor:
    """Independent per-item Bernoulli(rate) drop decisions."""
    return torch.rand(n, generator=rng) < rate


def sample_pair(clip, delta_max: int, rng: torch.Generator) -> tuple[int, int]:
    """One (t, t+delta) pair, 1-based: t uniform on {1..T-delta}, delta on {1..delta_max}."""
    num_frames = clip.num_frames if hasattr(clip, "num_frames") else int(clip)
    if num_frames < 2:
        raise ConfigurationError(f"sample_pair: clip must have >= 2 frames, got {num_frames}")
    if delta_max > num_frames - 1:
        raise ConfigurationError(
            f"sample_pair: delta_max {delta_max} exceeds T-1 = {num_frames - 1}")
    delta = 1 + int(torch.randint(delta_max, (1,), generator=rng).item())
    t = 1 + int(torch.randint(num_frames - delta, (1,), generator=rng).item())
    return t, t + delta


@dataclass
class CheckpointBundle:
    """Everything needed to reproduce forward outputs and resume training."""

    extractor_state: dict
    generator_state: dict
    extractor_config: MotionExtractorConfig
    generator_config: GeneratorConfig
    train_config: TrainConfig
    augment_config: aug.AugmentationConfig
    optimizer_state: dict | None
    iteration: int
    rng_state: torch.Tensor
    loss_history: list[float] = field(default_factory=list)
    config_hash: str = ""

    def save(self, path: str | Path) -> None:
        torch.save({
            "extractor_state": self.extractor_state,
            "generator_state": self.generator_state,
            "extractor_config": asdict(self.extractor_config),
            "generator_config": asdict(self.generator_config),
            "train_config": asdict(self.train_config),
            "augment_config": asdict(self.augment_config),
            "optimizer_state": self.optimizer_state,
            "iteration": self.iteration,
            "rng_state": self.rng_state,
            "loss_history": self.loss_history,
            "config_hash": self.config_hash,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "CheckpointBundle":
        d = torch.load(path, map_location="cpu", weights_only=False)
        def _tupled(dc):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in dc.items()}
        return cls(
            extractor_state=d["extractor_state"],
            generator_state=d["generator_state"],
            extractor_config=MotionExtractorConfig(**_tupled(d["extractor_config"])),
            generator_config=GeneratorConfig(**_tupled(d["generator_config"])),
            train_config=TrainConfig(**_tupled(d["train_config"])),
            augment_config=aug.AugmentationConfig(**_tupled(d["augment_config"])),
            optimizer_state=d["optimizer_state"],
            iteration=d["iteration"],
            rng_state=d["rng_state"],
            loss_history=d["loss_history"],
            config_hash=d.get("config_hash", ""),
        )

    def build_models(self) -> tuple[MotionExtractor, FrameGenerator]:
        ext = MotionExtractor(self.extractor_config)
        gen = FrameGenerator(self.generator_config)
        ext.load_state_dict(self.extractor_state)
        gen.load_state_dict(self.generator_state)
        ext.eval()
        gen.eval()
        return ext, gen


# ---------------------------------------------------------------------------
# Batched augmentation (float32 fast path used only inside the train loop)
# ---------------------------------------------------------------------------

def _augment_batch(clips: torch.Tensor, photos: list[aug.PhotometricParams],
                   geos: list[aug.GeometricParams], padding_mode: str) -> torch.Tensor:
    """clips: (B, T, C, H, W); one parameter set per clip, shared across frames."""
    b, t, c, h, w = clips.shape
    dev = clips.device
    bright = torch.tensor([p.brightness for p in photos], device=dev).view(b, 1, 1, 1, 1)
    contrast = torch.tensor([p.contrast for p in photos], device=dev).view(b, 1, 1, 1, 1)
    x = (clips * bright - 0.5) * contrast + 0.5
    x = x.clamp(0.0, 1.0)
    if any(p.saturation != 1.0 or p.hue != 0.0 for p in photos):
        sat = torch.tensor([p.saturation for p in photos], device=dev).view(b, 1, 1, 1)
        hue = torch.tensor([p.hue for p in photos], device=dev).view(b, 1, 1, 1)
        hsv = aug._rgb_to_hsv(x)
        hh, ss, vv = hsv.unbind(dim=-3)
        ss = (ss * sat).clamp(0.0, 1.0)
        hh = (hh + hue) % 1.0
        x = aug._hsv_to_rgb(torch.stack([hh, ss, vv], dim=-3))
    if any(not g.is_identity() for g in geos):
        thetas = torch.stack([aug.geometric_theta(g) for g in geos]).float().to(dev)
        thetas = thetas.repeat_interleave(t, dim=0)
        grid = torch.nn.functional.affine_grid(thetas, size=(b * t, c, h, w),
                                               align_corners=False)
        x = torch.nn.functional.grid_sample(x.reshape(b * t, c, h, w), grid,
                                            mode="bilinear", padding_mode=padding_mode,
                                            align_corners=False).reshape(b, t, c, h, w)
    return x.clamp(0.0, 1.0)


class Trainer:
    def __init__(self, train_config: TrainConfig,
                 extractor_config: MotionExtractorConfig | None = None,
                 generator_config: GeneratorConfig | None = None,
                 augment_config: aug.AugmentationConfig | None = None,
                 out_dir: str | Path | None = None):
        self.cfg = train_config
        self.ext_cfg = extractor_config or MotionExtractorConfig()
        self.gen_cfg = generator_config or GeneratorConfig(
            motion_dim=self.ext_cfg.motion_dim, delta_max=train_config.delta_max,
            frame_size=self.ext_cfg.frame_size, num_frames=self.ext_cfg.num_frames)
        self.aug_cfg = augment_config or aug.AugmentationConfig()
        if self.gen_cfg.motion_dim != self.ext_cfg.motion_dim:
            raise ConfigurationError("frame_generator.motion_dim: must match motion_extractor")
        if train_config.delta_max > self.ext_cfg.num_frames - 1:
            raise ConfigurationError(
                f"train.delta_max: {train_config.delta_max} exceeds T-1 = {self.ext_cfg.num_frames - 1}")
        self.out_dir = Path(out_dir) if out_dir is not None else None

        torch.manual_seed(train_config.seed)
        self.rng = torch.Generator().manual_seed(train_config.seed)
        self.extractor = MotionExtractor(self.ext_cfg)
        self.generator = FrameGenerator(self.gen_cfg)
        self.optimizer = torch.optim.AdamW(
            list(self.extractor.parameters()) + list(self.generator.parameters()),
            lr=train_config.lr, betas=train_config.adam_betas,
            weight_decay=train_config.weight_decay)
        self.iteration = 0
        self.loss_history: list[float] = []
        self._clips: torch.Tensor | None = None
        self._log_fh = None
        self._start_time = time.time()
        self._hash = config_hash({
            "train": asdict(train_config), "extractor": asdict(self.ext_cfg),
            "generator": asdict(self.gen_cfg), "augment": asdict(self.aug_cfg)})

    # -- data ---------------------------------------------------------------

    def attach_dataset(self, manifest: DatasetManifest) -> None:
        arr, recs = load_split_arrays(manifest, split=self.cfg.train_split)
        if len(recs) == 0:
            raise ConfigurationError(
                f"train.dataset: split {self.cfg.train_split!r} of {manifest.root} is empty")
        self._clips = torch.from_numpy(arr)

    def attach_clip_array(self, clips_u8: np.ndarray) -> None:
        self._clips = torch.from_numpy(np.ascontiguousarray(clips_u8))

    def _draw_batch(self) -> torch.Tensor:
        n = self._clips.shape[0]
        idx = torch.randint(n, (self.cfg.batch_size,), generator=self.rng)
        return self._clips[idx].permute(0, 1, 4, 2, 3).float() / 255.0

    # -- optimization -------------------------------------------------------

    def train_step(self, clips: torch.Tensor | None = None) -> float:
        """One joint update; returns the scalar flow-matching loss."""
        cfg = self.cfg
        if clips is None:
            clips = self._draw_batch()
        b, t = clips.shape[:2]

        photos, geos = [], []
        for _ in range(b):
            p, g = aug.sample_params(self.rng, self.aug_cfg)
            photos.append(p)
            geos.append(g)
        augmented = _augment_batch(clips, photos, geos, self.aug_cfg.padding_mode)
        gen_view = augmented if cfg.augment_generator_streams else clips

        deltas = 1 + torch.randint(cfg.delta_max, (b,), generator=self.rng)
        t_idx = (torch.rand(b, generator=self.rng)
                 * (t - deltas).to(torch.float32)).floor().long()
        rows = torch.arange(b)
        x_t = gen_view[rows, t_idx]
        z1 = gen_view[rows, t_idx + deltas]
        z0 = torch.randn(z1.shape, generator=self.rng)
        tau = torch.rand(b, generator=self.rng)
        drop_m = sample_dropout_mask(b, cfg.dropout_motion, self.rng)
        drop_f = sample_dropout_mask(b, cfg.dropout_frame, self.rng)

        lr = lr_at(cfg, self.iteration)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)

        autocast = torch.autocast("cpu", dtype=torch.bfloat16,
                                  enabled=cfg.precision == "bfloat16")
        with autocast:
            m_all = self.extractor(augmented)
            m_t = m_all[rows, t_idx]
            cond = GeneratorConditioning(source_frame=x_t, motion=m_t, delta=deltas,
                                         drop_motion=drop_m, drop_frame=drop_f)
            loss = fm_loss(self.generator, FlowSample.build(z0, z1, tau, cond))

        value = float(loss.item())
        if not np.isfinite(value):
            self._dump_diagnostics(value)
            raise TrainingDivergedError(
                f"non-finite loss {value} at iteration {self.iteration}")
        loss.backward()
        self.optimizer.step()

        self.iteration += 1
        self.loss_history.append(value)
        if self.out_dir is not None and self.iteration % max(cfg.log_every, 1) == 0:
            self._log({"iter": self.iteration, "loss": value, "lr": lr,
                       "wall_time": round(time.time() - self._start_time, 3)})
        return value

    def _log(self, record: dict) -> None:
        if self._log_fh is None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / LOSS_LOG_NAME, "a", encoding="utf-8")
        self._log_fh.write(json.dumps(record) + "\n")
        if record["iter"] % 100 == 0:
            self._log_fh.flush()

    def _dump_diagnostics(self, value: float) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump = {
            "iteration": self.iteration,
            "loss": value,
            "lr": lr_at(self.cfg, self.iteration),
            "recent_losses": self.loss_history[-50:],
            "param_norms": {
                "extractor": float(sum(p.detach().norm() ** 2 for p in
                                       self.extractor.parameters()) ** 0.5),
                "generator": float(sum(p.detach().norm() ** 2 for p in
                                       self.generator.parameters()) ** 0.5),
            },
        }
        with open(self.out_dir / "diagnostic_dump.json", "w", encoding="utf-8") as fh:
            json.dump(dump, fh, indent=2)

    # -- checkpointing ------------------------------------------------------

    def bundle(self) -> CheckpointBundle:
        return CheckpointBundle(
            extractor_state={k: v.clone() for k, v in self.extractor.state_dict().items()},
            generator_state={k: v.clone() for k, v in self.generator.state_dict().items()},
            extractor_config=self.ext_cfg, generator_config=self.gen_cfg,
            train_config=self.cfg, augment_config=self.aug_cfg,
            optimizer_state=self.optimizer.state_dict(),
            iteration=self.iteration, rng_state=self.rng.get_state(),
            loss_history=list(self.loss_history), config_hash=self._hash)

    def restore(self, bundle: CheckpointBundle) -> None:
        self.extractor.load_state_dict(bundle.extractor_state)
        self.generator.load_state_dict(bundle.generator_state)
        if bundle.optimizer_state is not None:
            self.optimizer.load_state_dict(bundle.optimizer_state)
        self.rng.set_state(bundle.rng_state)
        self.iteration = bundle.iteration
        self.loss_history = list(bundle.loss_history)

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.flush()
            self._log_fh.close()
            self._log_fh = None


def run_training(train_config: TrainConfig,
                 extractor_config: MotionExtractorConfig | None = None,
                 generator_config: GeneratorConfig | None = None,
                 augment_config: aug.AugmentationConfig | None = None,
                 out_dir: str | Path = "runs/train",
                 resume: str | Path | None = None,
                 progress: bool = False) -> CheckpointBundle:
    """Full training run; writes periodic checkpoints and a loss log."""
    if not train_config.dataset:
        raise ConfigurationError("train.dataset: path required")
    manifest = DatasetManifest.load(train_config.dataset)
    trainer = Trainer(train_config, extractor_config, generator_config, augment_config,
                      out_dir=out_dir)
    trainer.attach_dataset(manifest)
    if resume is not None:
        trainer.restore(CheckpointBundle.load(resume))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        while trainer.iteration < train_config.total_iters:
            trainer.train_step()
            it = trainer.iteration
            if progress and it % 500 == 0:
                recent = trainer.loss_history[-200:]
                print(f"iter {it}/{train_config.total_iters} "
                      f"loss {float(np.mean(recent)):.4f}", flush=True)
            if train_config.checkpoint_every and it % train_config.checkpoint_every == 0:
                trainer.bundle().save(out / CHECKPOINT_NAME)
        final = trainer.bundle()
        final.save(out / CHECKPOINT_NAME)
    finally:
        trainer.close()
    return final
