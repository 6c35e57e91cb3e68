import json

import numpy as np
import pytest

from dismo import datagen
from dismo.errors import ConfigurationError, CorruptDatasetError, NotFoundError

IDS = datagen.default_identities(5)
CAM_NONE = datagen.CameraProgram(0, "none")


def centroid(frame: np.ndarray, color) -> tuple[float, float]:
    """Brute-force color-segmentation centroid of the sprite."""
    dist = np.linalg.norm(frame - np.asarray(color)[None, None, :], axis=-1)
    ys, xs = np.nonzero(dist < 0.25)
    assert len(xs) > 0, "sprite not found"
    return float(xs.mean()), float(ys.mean())


def test_still_program_all_frames_identical():
    prog = datagen.MotionProgram(0, "still")
    clip = datagen.render_clip(IDS[0], prog, CAM_NONE, 8, 64, seed=4)
    for t in range(1, 8):
        assert np.array_equal(clip.frames[t], clip.frames[0])


def test_linear_centroid_kinematics():
    prog = datagen.MotionProgram(0, "linear", {"vx": 2.0, "vy": 0.0})
    clip = datagen.render_clip(IDS[0], prog, CAM_NONE, 8, 64, seed=9)
    x0, y0 = centroid(clip.frames[0], IDS[0].base_color)
    x3, y3 = centroid(clip.frames[3], IDS[0].base_color)
    assert abs((x3 - x0) - 6.0) <= 0.5
    assert abs(y3 - y0) <= 0.5


def test_render_determinism():
    prog = datagen.MotionProgram(1, "circular", {"radius": 8.0, "period": 8.0})
    a = datagen.render_clip(IDS[1], prog, datagen.default_cameras(2)[1], 8, 64, seed=2)
    b = datagen.render_clip(IDS[1], prog, datagen.default_cameras(2)[1], 8, 64, seed=2)
    assert np.array_equal(a.frames, b.frames)


def test_factor_independence_identity_vs_trajectory():
    prog = datagen.MotionProgram(0, "linear", {"vx": 2.0, "vy": 1.0})
    a = datagen.render_clip(IDS[0], prog, CAM_NONE, 8, 64, seed=5)
    b = datagen.render_clip(IDS[1], prog, CAM_NONE, 8, 64, seed=5)
    for t in range(8):
        ca = centroid(a.frames[t], IDS[0].base_color)
        cb = centroid(b.frames[t], IDS[1].base_color)
        assert abs(ca[0] - cb[0]) <= 0.5 and abs(ca[1] - cb[1]) <= 0.5


def test_factor_independence_action_vs_appearance():
    lin = datagen.MotionProgram(0, "linear", {"vx": 2.0, "vy": 0.0})
    shk = datagen.MotionProgram(1, "shake", {"amplitude": 4.0, "period": 4.0})
    a = datagen.render_clip(IDS[2], lin, CAM_NONE, 8, 64, seed=5)
    b = datagen.render_clip(IDS[2], shk, CAM_NONE, 8, 64, seed=5)
    for clip in (a, b):
        dist = np.linalg.norm(clip.frames[0] - np.asarray(IDS[2].base_color), axis=-1)
        mask = dist < 0.1
        assert mask.sum() > 10
        np.testing.assert_allclose(clip.frames[0][mask].mean(axis=0), IDS[2].base_color,
                                   atol=0.05)


def _reversal_mismatch(program: datagen.MotionProgram, num_frames: int = 8) -> float:
    """Min over the forward family (phase grid) of the max trajectory gap."""
    traj = program.trajectory(num_frames)
    rev = traj[::-1] - traj[-1]
    best = np.inf
    phases = np.linspace(0.0, 1.0, 65) if "phase" in program.params else [None]
    for phase in phases:
        if phase is None:
            fwd = traj - traj[0]
        else:
            params = dict(program.params)
            params["phase"] = float(phase)
            fwd = datagen.MotionProgram(program.action_id, program.kind, params) \
                         .trajectory(num_frames)
        best = min(best, float(np.abs(rev - fwd).max()))
    return best


@pytest.mark.parametrize("kind,params", [
    ("linear", {"vx": 2.5, "vy": 0.0}),
    ("circular", {"radius": 10.0, "period": 8.0}),
    ("zigzag", {"vx": 1.5, "amplitude": 6.0, "period": 4.0}),
    ("bounce", {"height": 18.0, "fall_frames": 3.0, "damping": 0.55}),
    ("shake", {"amplitude": 4.0, "period": 4.0}),
    ("still", {}),
])
def test_reversal_property(kind, params):
    prog = datagen.MotionProgram(0, kind, params)
    mismatch = _reversal_mismatch(prog)
    if prog.reversible:
        assert mismatch <= 1.0
    else:
        assert mismatch > 1.0


def test_invalid_params_name_field():
    with pytest.raises(ConfigurationError, match="motion.kind"):
        datagen.MotionProgram(0, "teleport", {})
    with pytest.raises(ConfigurationError, match="motion.params.radius"):
        datagen.MotionProgram(0, "circular", {"radius": -1.0, "period": 8.0})
    with pytest.raises(ConfigurationError, match="sprite.size_px"):
        datagen.SpriteSpec(0, "circle", (1, 0, 0), 1, 2)
    with pytest.raises(ConfigurationError, match="camera.params.rate_per_frame"):
        datagen.CameraProgram(0, "zoom", {"rate_per_frame": 99.0})


def test_camera_none_identity_affine():
    cam = datagen.CameraProgram(0, "none")
    for t in range(8):
        assert cam.affine_at(t) == {"scale": 1.0, "angle_deg": 0.0, "tx": 0.0, "ty": 0.0}


def test_render_preconditions():
    prog = datagen.MotionProgram(0, "still")
    with pytest.raises(ConfigurationError, match="num_frames"):
        datagen.render_clip(IDS[0], prog, CAM_NONE, 1, 64, seed=0)
    with pytest.raises(ConfigurationError, match="resolution"):
        datagen.render_clip(IDS[0], prog, CAM_NONE, 8, 8, seed=0)


def _small_config(tmp_path, **kw):
    base = dict(identities=datagen.default_identities(5, size_px=8),
                actions=datagen.default_actions(5),
                cameras=datagen.default_cameras(1),
                clips_per_cell=4, num_frames=8, resolution=32, seed=1)
    base.update(kw)
    return datagen.GenerationConfig(**base)


def test_generate_dataset_counts(tmp_path):
    manifest = datagen.generate_dataset(_small_config(tmp_path), tmp_path / "d")
    assert len(manifest.records) == 5 * 5 * 1 * 4


def test_action_holdout_split(tmp_path):
    cfg = _small_config(tmp_path, split_policy="by-action-holdout", holdout=4)
    manifest = datagen.generate_dataset(cfg, tmp_path / "d")
    assert all(r["labels"]["action_id"] != 4 for r in manifest.select(split="train"))
    assert all(r["labels"]["action_id"] == 4 for r in manifest.select(split="test"))
    assert len(manifest.select(split="train")) + len(manifest.select(split="test")) \
        == len(manifest.records)


def test_identity_holdout_split(tmp_path):
    cfg = _small_config(tmp_path, split_policy="by-identity-holdout", holdout=0)
    manifest = datagen.generate_dataset(cfg, tmp_path / "d")
    assert all(r["labels"]["identity_id"] != 0 for r in manifest.select(split="train"))


def test_regeneration_identical_manifest_hash(tmp_path):
    m1 = datagen.generate_dataset(_small_config(tmp_path), tmp_path / "a")
    m2 = datagen.generate_dataset(_small_config(tmp_path), tmp_path / "b")
    assert m1.manifest_hash == m2.manifest_hash
    raw1 = (tmp_path / "a" / "manifest.json").read_bytes()
    raw2 = (tmp_path / "b" / "manifest.json").read_bytes()
    assert raw1 == raw2


def test_save_load_roundtrip_exact(tmp_path):
    manifest = datagen.generate_dataset(_small_config(tmp_path), tmp_path / "d")
    clip_id = manifest.clip_ids()[7]
    loaded = datagen.load_clip(manifest, clip_id)
    # stored values are 8-bit quantized; reload-then-requantize is lossless
    requantized = datagen.quantize_frames(loaded.frames)
    reloaded = datagen.load_clip(manifest, clip_id)
    assert np.array_equal(datagen.quantize_frames(reloaded.frames), requantized)
    assert np.abs(reloaded.frames - loaded.frames).max() == 0.0


def test_load_unknown_id(tmp_path):
    manifest = datagen.generate_dataset(_small_config(tmp_path), tmp_path / "d")
    with pytest.raises(NotFoundError):
        datagen.load_clip(manifest, "clip_99999")


def test_load_deleted_file_corrupt(tmp_path):
    manifest = datagen.generate_dataset(_small_config(tmp_path), tmp_path / "d")
    clip_id = manifest.clip_ids()[0]
    victim = manifest.root / manifest.record(clip_id)["path"] / "frame_0003.png"
    victim.unlink()
    with pytest.raises(CorruptDatasetError):
        datagen.load_clip(manifest, clip_id)


def test_manifest_schema_fields(tmp_path):
    manifest = datagen.generate_dataset(_small_config(tmp_path), tmp_path / "d")
    doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert doc["schema_version"] == datagen.MANIFEST_SCHEMA_VERSION
    assert {"identities", "actions", "cameras"} <= set(doc["vocabularies"])
    ids = [r["clip_id"] for r in doc["records"]]
    assert len(ids) == len(set(ids))
    for r in doc["records"]:
        assert (tmp_path / "d" / r["path"] / "frame_0000.png").exists()


def test_empty_vocabulary_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="identities"):
        datagen.GenerationConfig(identities=[], actions=datagen.default_actions(1),
                                 cameras=datagen.default_cameras(1))
