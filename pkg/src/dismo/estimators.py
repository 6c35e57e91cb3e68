"""k-nearest-neighbor information estimators.

All estimators work in the max (Chebyshev) norm:

- differential entropy via Kozachenko-Leonenko kth-neighbor distances,
- mutual information between continuous variables via the
  Kraskov-Stoegbauer-Grassberger estimator, variant 1 (max-norm joint
  ball, strict-inequality marginal neighbor counts),
- mutual information between a continuous variable and discrete labels via
  Ross's nearest-neighbor estimator,
- permutation nulls for significance testing.

Inputs are jittered with uniform noise at 1e-10 scale (fixed seed) so
duplicate samples do not produce zero distances; exactly identical X and Y
are rejected as degenerate instead of returning a diverging estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma
from sklearn.neighbors import KDTree

from dismo.errors import ConfigurationError, DegenerateDataError

_JITTER_SEED = 0x5EED
_JITTER_SCALE = 1e-10


def _as_2d(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ConfigurationError(f"estimator input must be 1-D or 2-D, got shape {a.shape}")
    return a


def _jitter(*arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng(_JITTER_SEED)
    return tuple(a + rng.uniform(-_JITTER_SCALE, _JITTER_SCALE, size=a.shape)
                 for a in arrays)


@dataclass
class MIEstimate:
    """A mutual-information (or entropy) estimate in nats."""

    value: float
    k: int
    n: int
    method: str
    raw_value: float = 0.0

    def to_json(self) -> dict:
        return {"value": self.value, "raw_value": self.raw_value, "k": self.k,
                "n": self.n, "method": self.method}


def knn_entropy(samples, k: int = 5) -> float:
    """Kozachenko-Leonenko differential entropy estimate in nats (max norm)."""
    x = _as_2d(samples)
    n, d = x.shape
    if not 1 <= k < n:
        raise ConfigurationError(f"knn_entropy: need 1 <= k < N, got k={k}, N={n}")
    (x,) = _jitter(x)
    tree = KDTree(x, metric="chebyshev")
    dist, _ = tree.query(x, k=k + 1)
    eps = dist[:, k]
    if np.any(eps <= 0):
        raise DegenerateDataError("knn_entropy: zero kth-neighbor distance (duplicate points)")
    # max-norm ball of radius eps has volume (2*eps)^d
    return float(digamma(n) - digamma(k) + d * np.log(2.0) + d * np.mean(np.log(eps)))


def ksg_mi(x, y, k: int = 5) -> MIEstimate:
    """KSG mutual-information estimate (variant 1) between continuous X and Y.

    The reported value is clamped at zero; the raw estimate is retained.
    """
    xa = _as_2d(x)
    ya = _as_2d(y)
    if xa.shape[0] != ya.shape[0]:
        raise ConfigurationError(
            f"ksg_mi: sample counts differ ({xa.shape[0]} vs {ya.shape[0]})")
    n = xa.shape[0]
    if n <= k:
        raise ConfigurationError(f"ksg_mi: need N > k, got N={n}, k={k}")
    if xa.shape == ya.shape and np.array_equal(xa, ya):
        raise DegenerateDataError(
            "ksg_mi: X and Y are identical (duplicate distances); the estimate diverges")
    xa, ya = _jitter(xa, ya)

    joint = np.concatenate([xa, ya], axis=1)
    dist, _ = KDTree(joint, metric="chebyshev").query(joint, k=k + 1)
    eps = dist[:, k]
    if np.any(eps <= 0):
        raise DegenerateDataError("ksg_mi: zero kth-neighbor distance (duplicate points)")
    radius = np.nextafter(eps, 0)  # strict inequality in the marginal counts

    nx = KDTree(xa, metric="chebyshev").query_radius(xa, radius, count_only=True) - 1
    ny = KDTree(ya, metric="chebyshev").query_radius(ya, radius, count_only=True) - 1
    raw = float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))
    return MIEstimate(value=max(raw, 0.0), k=k, n=n, method="ksg1", raw_value=raw)


def discrete_mi(z, labels, k: int = 5) -> MIEstimate:
    """Ross estimator of I(Z; labels) for continuous Z and discrete labels."""
    za = _as_2d(z)
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] != za.shape[0]:
        raise ConfigurationError("discrete_mi: labels must be 1-D and match Z in length")
    n = za.shape[0]
    (za,) = _jitter(za)

    radius = np.empty(n)
    class_counts = np.empty(n)
    for value in np.unique(lab):
        mask = lab == value
        count = int(mask.sum())
        if count < k + 1:
            raise ConfigurationError(
                f"discrete_mi: class {value!r} has {count} samples, need >= {k + 1}")
        dist, _ = KDTree(za[mask], metric="chebyshev").query(za[mask], k=k + 1)
        radius[mask] = np.nextafter(dist[:, k], 0)
        class_counts[mask] = count

    m_all = KDTree(za, metric="chebyshev").query_radius(za, radius, count_only=True)
    raw = float(digamma(n) + digamma(k) - np.mean(digamma(class_counts))
                - np.mean(digamma(np.maximum(m_all, 1))))
    return MIEstimate(value=max(raw, 0.0), k=k, n=n, method="ross", raw_value=raw)


@dataclass
class PermutationNull:
    """Observed MI against a permutation null distribution."""

    null_mean: float
    null_std: float
    observed: float
    p_value: float
    null_values: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"null_mean": self.null_mean, "null_std": self.null_std,
                "observed": self.observed, "p_value": self.p_value,
                "n_perm": len(self.null_values)}

    @property
    def excess_in_stds(self) -> float:
        return (self.observed - self.null_mean) / max(self.null_std, 1e-12)


def permutation_null(x, y, k: int = 5, n_perm: int = 100,
                     rng: np.random.Generator | int | None = None) -> PermutationNull:
    """Re-estimate MI under n_perm row permutations of Y.

    The permutation list is generated up front from the given rng so a
    parallel evaluation of the replicates would reproduce the serial result.
    """
    if n_perm < 20:
        raise ConfigurationError(f"permutation_null: need n_perm >= 20, got {n_perm}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    xa = _as_2d(x)
    ya = _as_2d(y)
    n = xa.shape[0]
    perms = [rng.permutation(n) for _ in range(n_perm)]

    observed = ksg_mi(xa, ya, k=k).raw_value
    null_values = [ksg_mi(xa, ya[perm], k=k).raw_value for perm in perms]
    null = np.array(null_values)
    p = (1 + int(np.sum(null >= observed))) / (1 + n_perm)
    return PermutationNull(null_mean=float(null.mean()), null_std=float(null.std()),
                           observed=float(observed), p_value=float(p),
                           null_values=[float(v) for v in null_values])
