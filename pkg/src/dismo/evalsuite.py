"""Quantitative evaluation protocols.

Frozen-feature probes (kNN identity / action classification on factor
splits), the mutual-information ratio between action and identity labels,
composite object/camera motion analysis with permutation nulls, and latent
trajectory analyses (PCA projections, cycle scores, forward/backward
separation).

Embeddings are always extracted from clean clips and mean-pooled over time
unless a protocol says otherwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from dismo import augment as aug
from dismo.datagen import (
    DatasetManifest,
    affine_matrix,
    load_clip,
    warp_frame,
)
from dismo.errors import ConfigurationError
from dismo.estimators import MIEstimate, PermutationNull, discrete_mi, permutation_null
from dismo.models.motion import MotionSequence
from dismo.training import CheckpointBundle

REPORT_SCHEMA_VERSION = 1


@dataclass
class EmbeddingSet:
    """Pooled embeddings with aligned per-vector labels."""

    vectors: np.ndarray
    labels: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.vectors).all():
            raise ConfigurationError("embedding_set.vectors: non-finite values")
        for key, lab in self.labels.items():
            if len(lab) != len(self.vectors):
                raise ConfigurationError(
                    f"embedding_set.labels[{key}]: length {len(lab)} != {len(self.vectors)} vectors")

    def __len__(self) -> int:
        return len(self.vectors)

    def subset(self, mask: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[mask],
                            {k: v[mask] for k, v in self.labels.items()},
                            dict(self.provenance))


def pool_embeddings(motion: MotionSequence | np.ndarray) -> np.ndarray:
    """Temporal mean of a per-timestep embedding sequence."""
    emb = motion.embeddings if isinstance(motion, MotionSequence) else np.asarray(motion)
    if emb.size == 0:
        raise ConfigurationError("pool_embeddings: empty sequence")
    return emb.mean(axis=0)


# ---------------------------------------------------------------------------
# kNN probes
# ---------------------------------------------------------------------------

def _knn_predict(train_x: np.ndarray, train_y: np.ndarray, queries: np.ndarray,
                 k: int, exclude: list[np.ndarray] | None = None) -> np.ndarray:
    """Euclidean kNN with majority vote.

    Class-count ties go to the class of the nearest neighbor among the tied
    classes; distance ties are broken by lower training-sample index.
    """
    preds = np.empty(len(queries), dtype=train_y.dtype)
    for i, q in enumerate(queries):
        dist = np.linalg.norm(train_x - q[None, :], axis=1)
        if exclude is not None and exclude[i] is not None:
            dist = dist.copy()
            dist[exclude[i]] = np.inf
        order = np.lexsort((np.arange(len(dist)), dist))
        neigh = order[:k]
        classes, counts = np.unique(train_y[neigh], return_counts=True)
        tied = classes[counts == counts.max()]
        if len(tied) == 1:
            preds[i] = tied[0]
        else:
            tied_set = set(tied.tolist())
            for j in neigh:
                if train_y[j] in tied_set:
                    preds[i] = train_y[j]
                    break
    return preds


def knn_classify(train: EmbeddingSet, test: EmbeddingSet, k: int, label_key: str) -> float:
    """Accuracy of a kNN probe predicting `label_key` on the test set."""
    if len(train) == 0 or len(test) == 0:
        raise ConfigurationError("knn_classify: empty embedding set")
    if label_key not in train.labels or label_key not in test.labels:
        raise ConfigurationError(f"knn_classify: label key {label_key!r} missing")
    if k > len(train):
        raise ConfigurationError(f"knn_classify: k={k} exceeds train size {len(train)}")
    preds = _knn_predict(train.vectors, train.labels[label_key], test.vectors, k)
    return float(np.mean(preds == test.labels[label_key]))


# ---------------------------------------------------------------------------
# Mutual-information ratio
# ---------------------------------------------------------------------------

@dataclass
class MirResult:
    ratio: float
    capped: bool
    uninformative: bool
    action_mi: MIEstimate
    identity_mi: MIEstimate
    floor: float

    def to_json(self) -> dict:
        return {"ratio": self.ratio, "capped": self.capped,
                "uninformative": self.uninformative, "floor": self.floor,
                "action_mi": self.action_mi.to_json(),
                "identity_mi": self.identity_mi.to_json()}


def mir(embeddings: EmbeddingSet, k: int = 5, floor: float = 0.01) -> MirResult:
    """I(z; action) / I(z; identity); capped reporting near a zero denominator."""
    for key in ("action_id", "identity_id"):
        if key not in embeddings.labels:
            raise ConfigurationError(f"mir: label key {key!r} missing")
    action = discrete_mi(embeddings.vectors, embeddings.labels["action_id"], k)
    identity = discrete_mi(embeddings.vectors, embeddings.labels["identity_id"], k)
    uninformative = action.value < floor and identity.value < floor
    if identity.value <= floor:
        return MirResult(ratio=action.value / floor, capped=True,
                         uninformative=uninformative, action_mi=action,
                         identity_mi=identity, floor=floor)
    return MirResult(ratio=action.value / identity.value, capped=False,
                     uninformative=uninformative, action_mi=action,
                     identity_mi=identity, floor=floor)


# ---------------------------------------------------------------------------
# PCA / trajectory analyses
# ---------------------------------------------------------------------------

@dataclass
class PcaResult:
    coordinates: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray


def pca_project(embeddings: np.ndarray, dims: int = 2) -> PcaResult:
    """Centered PCA with a deterministic sign convention.

    Components are ordered by descending eigenvalue; each is flipped so its
    largest-magnitude loading is positive. Rank-deficient inputs yield fewer
    components with a warning.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"pca_project: expected 2-D input, got shape {x.shape}")
    n, d = x.shape
    if n < dims + 1:
        raise ConfigurationError(f"pca_project: need >= dims+1 = {dims + 1} vectors, got {n}")
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > max(tol, 1e-12)))
    r = min(dims, rank)
    if r < dims:
        warnings.warn(f"pca_project: input rank {rank} < requested dims {dims}; "
                      f"returning {r} components")
    comps = vt[:r]
    for i in range(r):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    coords = centered @ comps.T
    var = s ** 2
    evr = var[:r] / var.sum() if var.sum() > 0 else np.zeros(r)
    return PcaResult(coordinates=coords, components=comps, explained_variance_ratio=evr)


def cycle_score(trajectory: np.ndarray) -> float:
    """Normalized peak autocorrelation of a latent trajectory at nonzero lag.

    Correlations are taken over overlapping windows at lags 1..T//2, so a
    trajectory repeating with period p <= T//2 scores near 1 and white noise
    stays low. Constant trajectories score 0 by convention.
    """
    x = np.asarray(trajectory, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    t = len(x)
    if t < 6:
        raise ConfigurationError(f"cycle_score: trajectory length must be >= 6, got {t}")
    x = x - x.mean(axis=0, keepdims=True)
    if float((x ** 2).sum()) < 1e-18:
        return 0.0
    best = 0.0
    for lag in range(1, t // 2 + 1):
        a = x[:-lag]
        b = x[lag:]
        den = np.sqrt((a ** 2).sum() * (b ** 2).sum())
        if den > 0:
            best = max(best, float((a * b).sum() / den))
    return float(np.clip(best, 0.0, 1.0))


def reversibility_separation(forward: np.ndarray, reversed_: np.ndarray, k: int = 5) -> float:
    """Balanced accuracy of a leave-one-pair-out kNN forward/backward probe."""
    fwd = np.asarray(forward, dtype=np.float64)
    rev = np.asarray(reversed_, dtype=np.float64)
    if fwd.shape != rev.shape:
        raise ConfigurationError(
            f"reversibility_separation: unpaired sets {fwd.shape} vs {rev.shape}")
    n = len(fwd)
    pool = np.concatenate([fwd, rev])
    labels = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    correct = np.zeros(2)
    total = np.zeros(2)
    exclude = [np.array([i % n, i % n + n]) for i in range(2 * n)]
    preds = _knn_predict(pool, labels, pool, k, exclude=exclude)
    for lab in (0, 1):
        mask = labels == lab
        total[lab] = mask.sum()
        correct[lab] = np.sum(preds[mask] == lab)
    return float(np.mean(correct / np.maximum(total, 1)))


# ---------------------------------------------------------------------------
# Embedding extraction over a dataset
# ---------------------------------------------------------------------------

def _frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).float().permute(0, 3, 1, 2)


def embed_clip_batch(bundle_models, clips: list[np.ndarray]) -> np.ndarray:
    """Per-timestep embeddings (N, T, d) for a list of (T, H, W, C) arrays."""
    extractor, _ = bundle_models
    x = torch.stack([_frames_to_tensor(c) for c in clips])
    with torch.no_grad():
        return extractor(x).cpu().numpy()


def embed_records(bundle: CheckpointBundle, manifest: DatasetManifest,
                  records: list[dict], batch_size: int = 32,
                  pooled: bool = True) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Embeddings plus label arrays for the given manifest records."""
    extractor, _ = bundle.build_models()
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        clips = [load_clip(manifest, r["clip_id"]).frames for r in chunk]
        x = torch.stack([_frames_to_tensor(c) for c in clips])
        with torch.no_grad():
            m = extractor(x).cpu().numpy()
        out.append(m)
    seqs = np.concatenate(out) if out else np.zeros((0, 0, 0))
    labels = {key: np.array([r["labels"][key] for r in records])
              for key in ("identity_id", "action_id", "cam_id")}
    return (seqs.mean(axis=1) if pooled else seqs), labels


def embed_split(bundle: CheckpointBundle, manifest: DatasetManifest,
                split: str | None = None, batch_size: int = 32) -> EmbeddingSet:
    records = manifest.select(split=split)
    vectors, labels = embed_records(bundle, manifest, records, batch_size)
    return EmbeddingSet(vectors, labels,
                        provenance={"model_hash": bundle.config_hash, "pooling": "mean",
                                    "split": split or "all"})


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

def identity_leak_protocol(bundle: CheckpointBundle, manifest: DatasetManifest,
                           k: int = 20) -> dict:
    """Identity probe on the held-out-action split; low accuracy = disentangled."""
    train = embed_split(bundle, manifest, split="train")
    test = embed_split(bundle, manifest, split="test")
    if len(test) == 0:
        raise ConfigurationError("identity_leak: manifest has no test split "
                                 "(generate with by-action-holdout)")
    acc = knn_classify(train, test, k=k, label_key="identity_id")
    n_ids = len(np.unique(train.labels["identity_id"]))
    return {"accuracy": acc, "k": k, "chance": 1.0 / n_ids,
            "train_size": len(train), "test_size": len(test)}


def action_knn_protocol(bundle: CheckpointBundle, manifest: DatasetManifest,
                        k: int = 20, holdout_identity: int | None = None) -> dict:
    """Action probe generalizing across identities (one identity held out)."""
    full = embed_split(bundle, manifest, split=None)
    ids = np.unique(full.labels["identity_id"])
    holdout = int(ids.max()) if holdout_identity is None else holdout_identity
    test_mask = full.labels["identity_id"] == holdout
    if not test_mask.any() or test_mask.all():
        raise ConfigurationError(f"action_knn: identity {holdout} split is degenerate")
    train = full.subset(~test_mask)
    test = full.subset(test_mask)
    acc = knn_classify(train, test, k=k, label_key="action_id")
    n_actions = len(np.unique(full.labels["action_id"]))
    return {"accuracy": acc, "k": k, "chance": 1.0 / n_actions,
            "holdout_identity": holdout, "train_size": len(train), "test_size": len(test)}


def mir_protocol(bundle: CheckpointBundle, manifest: DatasetManifest, k: int = 5,
                 floor: float = 0.01) -> dict:
    full = embed_split(bundle, manifest, split=None)
    return mir(full, k=k, floor=floor).to_json()


def augmentation_invariance_protocol(bundle: CheckpointBundle, manifest: DatasetManifest,
                                     n_clips: int = 200, seed: int = 0,
                                     photometric: aug.AugmentationConfig | None = None,
                                     geometric: aug.AugmentationConfig | None = None) -> dict:
    """Cosine similarity of pooled embeddings under clip-consistent augmentation.

    Same-clip pairs compare the clean view against a photometric-only or a
    geometric-only augmented view; different-clip pairs compare clean views
    of distinct clips.
    """
    if photometric is None:
        photometric = aug.AugmentationConfig(enable_geometric=False)
    if geometric is None:
        geometric = aug.AugmentationConfig(enable_photometric=False)
    extractor, _ = bundle.build_models()
    ids = manifest.clip_ids()
    if len(ids) < 2:
        raise ConfigurationError("augmentation_invariance: need at least 2 clips")
    rng = np.random.default_rng(seed)
    chosen = list(rng.choice(ids, size=min(n_clips, len(ids)), replace=False))
    torch_rng = torch.Generator().manual_seed(seed)

    clean, photo_v, geo_v = [], [], []
    for clip_id in chosen:
        clip = load_clip(manifest, clip_id)
        frames = _frames_to_tensor(clip.frames)
        p_photo, _ = aug.sample_params(torch_rng, photometric)
        _, g_geo = aug.sample_params(torch_rng, geometric)
        views = torch.stack([
            frames,
            aug.apply_tensor(frames, p_photo, aug.GeometricParams(),
                             padding_mode=photometric.padding_mode),
            aug.apply_tensor(frames, aug.PhotometricParams(), g_geo,
                             padding_mode=geometric.padding_mode),
        ])
        with torch.no_grad():
            m = extractor(views).cpu().numpy().mean(axis=1)
        clean.append(m[0])
        photo_v.append(m[1])
        geo_v.append(m[2])
    clean = np.stack(clean)
    photo_v = np.stack(photo_v)
    geo_v = np.stack(geo_v)

    shift = rng.integers(1, len(clean))
    other = np.roll(clean, shift, axis=0)

    def _cos(a, b):
        num = (a * b).sum(axis=1)
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        return num / np.maximum(den, 1e-12)

    diff_mean = float(_cos(clean, other).mean())
    photo_mean = float(_cos(clean, photo_v).mean())
    geo_mean = float(_cos(clean, geo_v).mean())
    return {
        "n_clips": len(clean),
        "different_clip_mean": diff_mean,
        "photometric": {"same_clip_mean": photo_mean, "gap": photo_mean - diff_mean},
        "geometric": {"same_clip_mean": geo_mean, "gap": geo_mean - diff_mean},
    }


# -- composite object/camera motion -----------------------------------------

SEVERITY_LEVELS = {
    "light": {"pan": 0.8, "zoom": 0.008, "rotate": 0.8},
    "medium": {"pan": 2.5, "zoom": 0.025, "rotate": 2.5},
    "heavy": {"pan": 6.0, "zoom": 0.06, "rotate": 6.0},
}


def sample_camera_schedule(rng: np.random.Generator, num_frames: int, severity: str
                           ) -> list[dict]:
    """Per-frame affine parameters of one smooth random camera move."""
    if severity not in SEVERITY_LEVELS:
        raise ConfigurationError(f"composite.severity: unknown level {severity!r}")
    lim = SEVERITY_LEVELS[severity]
    theta = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.5, 1.0) * lim["pan"]
    vx, vy = speed * np.cos(theta), speed * np.sin(theta)
    zoom = rng.uniform(-1.0, 1.0) * lim["zoom"]
    rot = rng.uniform(-1.0, 1.0) * lim["rotate"]
    return [{"scale": (1.0 + zoom) ** t, "angle_deg": rot * t,
             "tx": vx * t, "ty": vy * t} for t in range(num_frames)]


def apply_camera_schedule(frames: np.ndarray, schedule: list[dict]) -> np.ndarray:
    out = np.empty_like(frames)
    for t, params in enumerate(schedule):
        out[t] = warp_frame(frames[t], affine_matrix(
            scale=params["scale"], angle_deg=params["angle_deg"],
            tx=params["tx"], ty=params["ty"]))
    return out


def build_composite_triplet(object_frames: np.ndarray, other_first_frame: np.ndarray,
                            schedule: list[dict]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(object-only, camera-only, combined) clips sharing one camera schedule.

    The camera-only clip animates a different clip's first frame so it holds
    no object motion and no appearance overlap with the combined clip.
    """
    t = len(object_frames)
    camera_only = apply_camera_schedule(
        np.repeat(other_first_frame[None], t, axis=0), schedule)
    combined = apply_camera_schedule(object_frames, schedule)
    return object_frames, camera_only, combined


def composite_motion_protocol(bundle: CheckpointBundle, manifest: DatasetManifest,
                              severities: tuple[str, ...] = ("light", "medium", "heavy"),
                              n_samples: int = 256, k: int = 5, n_perm: int = 100,
                              seed: int = 0, batch_size: int = 32) -> dict:
    """MI between combined-motion embeddings and each isolated motion factor."""
    extractor, _ = bundle.build_models()
    still_cams = [c["cam_id"] for c in manifest.doc["vocabularies"]["cameras"]
                  if c["kind"] == "none"]
    if not still_cams:
        raise ConfigurationError("composite: dataset has no still-camera clips")
    records = [r for r in manifest.records if r["labels"]["cam_id"] in still_cams]
    if not records:
        raise ConfigurationError("composite: dataset has no still-camera clips")

    out = {}
    for severity in severities:
        rng = np.random.default_rng((seed, hash(severity) & 0xFFFF))
        idx = rng.integers(0, len(records), size=n_samples)
        other = (idx + 1 + rng.integers(0, len(records) - 1, size=n_samples)) % len(records)

        obj_list, cam_list, both_list = [], [], []
        for i, j in zip(idx, other):
            frames = load_clip(manifest, records[i]["clip_id"]).frames
            other_first = load_clip(manifest, records[j]["clip_id"]).frames[0]
            schedule = sample_camera_schedule(rng, len(frames), severity)
            obj, cam, both = build_composite_triplet(frames, other_first, schedule)
            obj_list.append(obj)
            cam_list.append(cam)
            both_list.append(both)

        def _embed(clips):
            vecs = []
            for start in range(0, len(clips), batch_size):
                x = torch.stack([_frames_to_tensor(c) for c in clips[start:start + batch_size]])
                with torch.no_grad():
                    vecs.append(extractor(x).cpu().numpy().mean(axis=1))
            return np.concatenate(vecs)

        m_obj = _embed(obj_list)
        m_cam = _embed(cam_list)
        m_both = _embed(both_list)

        cam_null = permutation_null(m_both, m_cam, k=k, n_perm=n_perm,
                                    rng=np.random.default_rng((seed, 1)))
        obj_null = permutation_null(m_both, m_obj, k=k, n_perm=n_perm,
                                    rng=np.random.default_rng((seed, 2)))
        out[severity] = {
            "n_samples": int(n_samples),
            "camera": cam_null.to_json() | {"excess_stds": cam_null.excess_in_stds},
            "object": obj_null.to_json() | {"excess_stds": obj_null.excess_in_stds},
        }
    return out


# -- latent trajectory protocols ---------------------------------------------

def cycles_protocol(bundle: CheckpointBundle, manifest: DatasetManifest,
                    clips_per_action: int = 3, dims: int = 2, seed: int = 0) -> dict:
    """Per-clip PCA trajectories of the motion sequence plus cycle scores."""
    rng = np.random.default_rng(seed)
    extractor, _ = bundle.build_models()
    actions = manifest.doc["vocabularies"]["actions"]
    result = {"dims": dims, "actions": {}}
    for action in actions:
        recs = manifest.select(action_id=action["action_id"])
        if not recs:
            continue
        chosen = rng.choice(len(recs), size=min(clips_per_action, len(recs)), replace=False)
        entries = []
        for ci in chosen:
            clip = load_clip(manifest, recs[ci]["clip_id"])
            with torch.no_grad():
                seq = extractor(_frames_to_tensor(clip.frames).unsqueeze(0))[0].numpy()
            proj = pca_project(seq, dims=min(dims, seq.shape[1]))
            entries.append({
                "clip_id": recs[ci]["clip_id"],
                "cycle_score": cycle_score(proj.coordinates),
                "coordinates": proj.coordinates.tolist(),
            })
        result["actions"][str(action["action_id"])] = {
            "kind": action["kind"],
            "mean_cycle_score": float(np.mean([e["cycle_score"] for e in entries])),
            "clips": entries,
        }
    return result


def reversibility_protocol(bundle: CheckpointBundle, manifest: DatasetManifest,
                           clips_per_action: int = 24, k: int = 5, seed: int = 0) -> dict:
    """Forward/backward separation per action kind."""
    rng = np.random.default_rng(seed)
    extractor, _ = bundle.build_models()
    actions = manifest.doc["vocabularies"]["actions"]
    result = {}
    for action in actions:
        recs = manifest.select(action_id=action["action_id"])
        if len(recs) < 4:
            continue
        chosen = rng.choice(len(recs), size=min(clips_per_action, len(recs)), replace=False)
        fwd, rev = [], []
        for ci in chosen:
            clip = load_clip(manifest, recs[ci]["clip_id"])
            both = torch.stack([_frames_to_tensor(clip.frames),
                                _frames_to_tensor(clip.reversed().frames)])
            with torch.no_grad():
                m = extractor(both).numpy().mean(axis=1)
            fwd.append(m[0])
            rev.append(m[1])
        result[str(action["action_id"])] = {
            "kind": action["kind"],
            "reversible": action["reversible"],
            "separation": reversibility_separation(np.stack(fwd), np.stack(rev), k=k),
            "n_pairs": len(fwd),
        }
    return result
