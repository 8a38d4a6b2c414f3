"""Sparsity and low-rank potentials and their quadratic-majorizer weights.

The sparse potential of a feature vector z is sum_j w_j (z_j^2 + gamma)^(p/2).
The low-rank potential of a feature matrix Z applies the same form to the
singular values of Z (descending), with the weight vector w restricted to
ascending order so small singular values are penalized hardest.

Each potential admits a tight quadratic upper bound around any anchor point,
whose curvature is a weight matrix: diagonal entries w_j (z_j^2 + g)^((p-2)/2)
in the sparse case, and the symmetric matrix
U diag(w) U' (Z Z' + g I)^((p-2)/2) in the low-rank case (shared eigenbasis U
of Z Z', eigenvalues descending). Those weights drive the reweighted
least-squares outer loop.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .errors import DimensionError, DomainError

__all__ = [
    "PriorSpec",
    "GroupWeights",
    "sparse_penalty",
    "lowrank_penalty",
    "sparse_penalty_grad",
    "lowrank_penalty_grad",
    "sparse_majorizer_weights",
    "lowrank_majorizer_weights",
    "lowrank_majorizer_weights_batch",
    "sparse_majorizer_gap",
    "lowrank_majorizer_gap",
    "symmetric_eig_descending",
    "exponent_from_raw",
    "exponent_grad_wrt_raw",
    "raw_from_exponent",
]

EXPONENT_MIN = 0.4
EXPONENT_MAX = 0.9


@dataclass
class PriorSpec:
    """Configuration of one analysis prior.

    family: "sparse" or "low_rank".
    weights: per-filter vector (sparse) or per-singular-index vector sorted
        ascending (low_rank); shared by every spatial group unless a
        per-position weight_map overrides it.
    provider: "fixed" (all-ones style constants), "learned" (one global
        vector trained jointly), or "map" (weight_map loaded from file).
    """

    family: str
    p: float
    gamma: float
    weights: np.ndarray
    weight_map: Optional[np.ndarray] = None
    provider: str = "fixed"

    def __post_init__(self):
        if self.family not in ("sparse", "low_rank"):
            raise ValueError(f"unknown prior family {self.family!r}")
        if not 0.0 < self.p <= 1.0:
            raise DomainError(f"exponent p must be in (0, 1], got {self.p}")
        if self.gamma <= 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if self.provider not in ("fixed", "learned", "map"):
            raise ValueError(f"unknown weight provider {self.provider!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        _check_weights(w, self.family)
        self.weights = w
        if self.weight_map is not None:
            wmap = np.asarray(self.weight_map, dtype=np.float64)
            if wmap.ndim != 3 or wmap.shape[0] != w.shape[0]:
                raise DimensionError(
                    f"weight map must be ({w.shape[0]}, Hv, Wv), got {wmap.shape}"
                )
            _check_weights(wmap.reshape(wmap.shape[0], -1), self.family)
            self.weight_map = wmap

    @classmethod
    def fixed(cls, family, size, p=1.0, gamma=1e-4, scale=1.0):
        """All-equal weights; the classic unweighted configurations."""
        return cls(family, p, gamma, np.full(size, float(scale)))

    @property
    def convex(self):
        """True when the resulting objective is convex: p = 1 and, for the
        low-rank family, equal weights."""
        if self.p != 1.0:
            return False
        if self.family == "sparse":
            return True
        uniform = np.allclose(self.weights, self.weights[0])
        return uniform and self.weight_map is None


def _check_weights(w, family):
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    if family == "low_rank" and np.any(np.diff(w, axis=0) < 0):
        raise DomainError("low-rank weights must be sorted ascending")


@dataclass
class GroupWeights:
    """Majorizer weights for every spatial group at one anchor iterate.

    sparse: data has shape (d, Hv, Wv) holding the diagonal entries.
    low_rank: data has shape (N, c, c) holding one symmetric matrix per
        position (N = Hv * Wv); scales/basis keep its eigen-decomposition.
    """

    family: str
    grid: tuple
    data: np.ndarray
    scales: Optional[np.ndarray] = field(default=None)  # (N, c) eigen scaling
    basis: Optional[np.ndarray] = field(default=None)  # (N, c, c) eigenvectors

    def max_per_group(self):
        """Largest weight (diagonal entry or eigenvalue) of each group."""
        if self.family == "sparse":
            return self.data.reshape(self.data.shape[0], -1).max(axis=0)
        return self.scales.max(axis=1)


# ---------------------------------------------------------------------------
# Potentials and gradients.
# ---------------------------------------------------------------------------


def sparse_penalty(z, w, p, gamma):
    """sum_j w_j (z_j^2 + gamma)^(p/2); w broadcasts against z."""
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    if gamma < 0:
        raise DomainError("gamma must be >= 0")
    return float(np.sum(w * (z**2 + gamma) ** (p / 2.0)))


def sparse_penalty_grad(z, w, p, gamma):
    """Gradient of sparse_penalty in z: p * W(z) z."""
    z = np.asarray(z, dtype=np.float64)
    return p * sparse_majorizer_weights(z, w, p, gamma) * z


def _singular_values_desc(Z):
    return np.linalg.svd(Z, compute_uv=False)


def lowrank_penalty(Z, w, p, gamma):
    """sum_j w_j (sigma_j(Z)^2 + gamma)^(p/2), sigma descending, w ascending."""
    Z = np.asarray(Z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_weights(w, "low_rank")
    if gamma < 0:
        raise DomainError("gamma must be >= 0")
    r = min(Z.shape[-2], Z.shape[-1])
    if w.shape[0] != r:
        raise DimensionError(f"need {r} weights for a {Z.shape[-2]}x{Z.shape[-1]} matrix")
    sig = _singular_values_desc(Z)
    return float(np.sum(w * (sig**2 + gamma) ** (p / 2.0)))


def lowrank_penalty_grad(Z, w, p, gamma):
    """Gradient of lowrank_penalty in Z: p * W(Z) Z."""
    Z = np.asarray(Z, dtype=np.float64)
    return p * lowrank_majorizer_weights(Z, w, p, gamma) @ Z


# ---------------------------------------------------------------------------
# Majorizer weights.
# ---------------------------------------------------------------------------

_EIG_FLOOR = 1e-300  # underflow guard only; gamma > 0 keeps eigenvalues positive


def sparse_majorizer_weights(z, w, p, gamma):
    """Diagonal majorizer weights w_j (z_j^2 + gamma)^((p-2)/2)."""
    if gamma <= 0:
        raise DomainError("gamma must be positive for majorizer weights")
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    return w * (z**2 + gamma) ** ((p - 2.0) / 2.0)


def _lowrank_spectral(mats):
    """Eigen-decomposition of stacked symmetric matrices, descending order."""
    lam, vec = np.linalg.eigh(mats)
    return lam[..., ::-1], vec[..., ::-1]


def lowrank_majorizer_weights_batch(Zs, w, p, gamma):
    """Majorizer weight matrices for a stack of feature matrices.

    Zs: (N, c, q) with q >= c. Returns (weights (N, c, c), scales (N, c),
    basis (N, c, c)); scales are the eigenvalues of each weight matrix paired
    with the descending eigenvalues of Z Z'.
    """
    if gamma <= 0:
        raise DomainError("gamma must be positive for majorizer weights")
    Zs = np.asarray(Zs, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_weights(w, "low_rank")
    c, q = Zs.shape[-2], Zs.shape[-1]
    if q < c:
        raise DimensionError(f"feature matrices must have q >= c, got {c}x{q}")
    if w.shape[-1] != c:
        raise DimensionError(f"need {c} weights, got {w.shape[-1]}")
    grams = Zs @ np.swapaxes(Zs, -1, -2)
    lam, basis = _lowrank_spectral(grams)
    lam = np.maximum(lam, 0.0)  # clip eigh round-off on PSD input
    scales = w * np.maximum(lam + gamma, _EIG_FLOOR) ** ((p - 2.0) / 2.0)
    weights = np.einsum("...ij,...j,...kj->...ik", basis, scales, basis, optimize=True)
    return weights, scales, basis


def lowrank_majorizer_weights(Z, w, p, gamma):
    """Symmetric majorizer weight matrix for one c x q feature matrix."""
    weights, _, _ = lowrank_majorizer_weights_batch(np.asarray(Z)[None], w, p, gamma)
    return weights[0]


# ---------------------------------------------------------------------------
# Majorizer gap diagnostics (bound minus function; >= 0, = 0 at the anchor).
# ---------------------------------------------------------------------------


def sparse_majorizer_gap(x, y, w, p, gamma):
    """Quadratic bound anchored at y, evaluated at x, minus the potential at x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    wy = sparse_majorizer_weights(y, w, p, gamma)
    bound = (
        sparse_penalty(y, w, p, gamma)
        + 0.5 * p * float(np.sum(wy * x * x))
        - 0.5 * p * float(np.sum(wy * y * y))
    )
    return bound - sparse_penalty(x, w, p, gamma)


def lowrank_majorizer_gap(X, Y, w, p, gamma):
    """Low-rank analogue of sparse_majorizer_gap using trace forms."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    wy = lowrank_majorizer_weights(Y, w, p, gamma)
    bound = (
        lowrank_penalty(Y, w, p, gamma)
        + 0.5 * p * float(np.sum(X * (wy @ X)))
        - 0.5 * p * float(np.sum(Y * (wy @ Y)))
    )
    return bound - lowrank_penalty(X, w, p, gamma)


# ---------------------------------------------------------------------------
# Small symmetric eigendecomposition (c <= 4) with an explicit contract.
# ---------------------------------------------------------------------------


def symmetric_eig_descending(S):
    """Eigendecomposition S = U diag(lam) U' with lam descending, c <= 4."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"need a square matrix, got {S.shape}")
    if S.shape[0] > 4:
        raise DimensionError(f"matrix side {S.shape[0]} exceeds the small-matrix limit 4")
    defect = float(np.max(np.abs(S - S.T))) if S.size else 0.0
    if defect > 1e-12 * max(1.0, float(np.max(np.abs(S)))):
        raise ValueError(f"matrix asymmetry {defect:.3e} beyond tolerance")
    lam, vec = np.linalg.eigh(0.5 * (S + S.T))
    return vec[:, ::-1], lam[::-1]


# ---------------------------------------------------------------------------
# Smooth parametrization of the exponent p onto [0.4, 0.9] for training.
# ---------------------------------------------------------------------------


def exponent_from_raw(raw):
    return EXPONENT_MIN + (EXPONENT_MAX - EXPONENT_MIN) * float(expit(raw))


def exponent_grad_wrt_raw(raw):
    s = float(expit(raw))
    return (EXPONENT_MAX - EXPONENT_MIN) * s * (1.0 - s)


def raw_from_exponent(p):
    if not EXPONENT_MIN < p < EXPONENT_MAX:
        raise DomainError(f"p must be strictly inside ({EXPONENT_MIN}, {EXPONENT_MAX})")
    return float(logit((p - EXPONENT_MIN) / (EXPONENT_MAX - EXPONENT_MIN)))
