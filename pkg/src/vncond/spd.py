"""SPD matrix functions, covariance estimation and von Neumann divergences.

Everything here works on small dense symmetric matrices (a few hundred
rows at most) and is pure: inputs are never modified and returned
objects are immutable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Sequence

import numpy as np

EIG_FLOOR = 1e-12
JITTER_REL = 1e-5
# smallest per-dimension scale used for jitter; keeps constant batches above EIG_FLOOR
JITTER_SCALE_FLOOR = 1e-6
NEG_CLAMP = 1e-10

GradientMode = Literal["daleckii_krein", "paper_closed_form"]


class NumericalFailure(ArithmeticError):
    """A computation produced a value outside its mathematically valid range."""


class EigenConvergenceError(NumericalFailure):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"Jacobi eigensolver did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


class NotPositiveDefinite(ValueError):
    def __init__(self, eigenvalue: float):
        super().__init__(
            f"matrix is not positive definite: eigenvalue {eigenvalue:.6e} "
            f"below floor {EIG_FLOOR:g}"
        )
        self.eigenvalue = eigenvalue


# ---------------------------------------------------------------------------
# eigendecomposition


def jacobi_eig(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Convergence is declared when the off-diagonal Frobenius norm drops
    below ``tol`` times the Frobenius norm of ``m`` (absolute ``tol`` for
    the zero matrix). Returns ascending eigenvalues and the matching
    orthogonal eigenvector matrix.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1.0)

    mask = ~np.eye(n, dtype=bool)

    def off(x):
        return float(np.sqrt(np.sum(x[mask] ** 2)))

    residual = off(a)
    sweeps = 0
    while residual > tol * scale:
        if sweeps >= max_sweeps:
            raise EigenConvergenceError(residual, sweeps)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
        residual = off(a)
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def sym_eig(m: np.ndarray, method: Literal["lapack", "jacobi"] = "lapack"):
    """Eigenvalues (ascending) and orthonormal eigenvectors of symmetric ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if method == "jacobi":
        return jacobi_eig(m)
    if method != "lapack":
        raise ValueError(f"unknown eigensolver {method!r}")
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(float("nan"), 0) from exc
    return w, v


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * (m + m.T)


# ---------------------------------------------------------------------------
# SPD matrices


class SpdMatrix:
    """Immutable symmetric positive definite matrix with its eigendecomposition.

    The input is symmetrized on construction. Construction fails with
    :class:`NotPositiveDefinite` if the smallest eigenvalue is below
    ``EIG_FLOOR``.
    """

    def __init__(self, entries, method: Literal["lapack", "jacobi"] = "lapack"):
        a = symmetrize(entries)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
        w, v = sym_eig(a, method=method)
        if w[0] < EIG_FLOOR:
            raise NotPositiveDefinite(float(w[0]))
        a.setflags(write=False)
        w.setflags(write=False)
        v.setflags(write=False)
        self.entries = a
        self.eigvals = w
        self.eigvecs = v

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def log(self) -> np.ndarray:
        out = (self.eigvecs * np.log(self.eigvals)) @ self.eigvecs.T
        out = symmetrize(out)
        out.setflags(write=False)
        return out

    @cached_property
    def inverse(self) -> np.ndarray:
        out = symmetrize((self.eigvecs / self.eigvals) @ self.eigvecs.T)
        out.setflags(write=False)
        return out

    def block(self, start: int, stop: int) -> "SpdMatrix":
        return SpdMatrix(self.entries[start:stop, start:stop])

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    def __repr__(self):
        return f"SpdMatrix(dim={self.dim}, eig=[{self.eigvals[0]:.3g}, {self.eigvals[-1]:.3g}])"


def as_spd(x) -> SpdMatrix:
    return x if isinstance(x, SpdMatrix) else SpdMatrix(x)


def matrix_log(x) -> np.ndarray:
    """Principal matrix logarithm of an SPD matrix."""
    return np.array(as_spd(x).log)


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class DatasetBatch:
    """``n`` samples of features and optional responses (``None`` if unlabeled)."""

    features: np.ndarray
    response: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if x.shape[0] < 2:
            raise ValueError(f"a batch needs at least 2 samples, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", x)
        if self.response is not None:
            y = np.asarray(self.response, dtype=np.float64)
            if y.ndim == 1:
                y = y[:, None]
            if y.shape[0] != x.shape[0]:
                raise ValueError(
                    f"response has {y.shape[0]} rows but features have {x.shape[0]}"
                )
            if not np.all(np.isfinite(y)):
                raise ValueError("response contains non-finite values")
            object.__setattr__(self, "response", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def labeled(self) -> bool:
        return self.response is not None

    def subset(self, idx) -> "DatasetBatch":
        y = None if self.response is None else self.response[idx]
        return DatasetBatch(self.features[idx], y)


@dataclass(frozen=True)
class JointCovariance:
    """Covariance of stacked (features, response); features occupy the leading block."""

    feature_dim: int
    response_dim: int
    matrix: SpdMatrix

    def __post_init__(self):
        if self.matrix.dim != self.feature_dim + self.response_dim:
            raise ValueError(
                f"matrix dim {self.matrix.dim} != {self.feature_dim} + {self.response_dim}"
            )

    @cached_property
    def marginal(self) -> SpdMatrix:
        return self.matrix.block(0, self.feature_dim)


def jitter_for(features_cov: np.ndarray) -> float:
    """Ridge added to every estimated covariance.

    Proportional to the mean variance of the *feature* block, so joint
    covariances that share feature samples share their jittered marginal.
    """
    d = features_cov.shape[0]
    scale = float(np.trace(features_cov)) / d
    return JITTER_REL * max(scale, JITTER_SCALE_FLOOR)


def _centered(z: np.ndarray) -> np.ndarray:
    return z - z.mean(axis=0, keepdims=True)


def raw_covariance(z: np.ndarray, feature_dim: int | None = None):
    """Un-jittered ``1/n`` covariance of rows of ``z`` and the jitter to add."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 samples, got {n}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite values in covariance input")
    zc = _centered(z)
    c = zc.T @ zc / n
    c = symmetrize(c)
    d = c.shape[0] if feature_dim is None else feature_dim
    return c, jitter_for(c[:d, :d])


def estimate_covariance(x: np.ndarray) -> SpdMatrix:
    """Jittered maximum-likelihood covariance of the rows of ``x``."""
    c, eps = raw_covariance(x)
    return SpdMatrix(c + eps * np.eye(c.shape[0]))


def joint_covariance_of(features: np.ndarray, response: np.ndarray) -> JointCovariance:
    features = np.asarray(features, dtype=np.float64)
    response = np.asarray(response, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if response.ndim == 1:
        response = response[:, None]
    d, r = features.shape[1], response.shape[1]
    c, eps = raw_covariance(np.hstack([features, response]), feature_dim=d)
    return JointCovariance(d, r, SpdMatrix(c + eps * np.eye(d + r)))


def estimate_joint_covariance(batch: DatasetBatch) -> JointCovariance:
    if batch.response is None:
        raise ValueError("joint covariance needs a labeled batch")
    return joint_covariance_of(batch.features, batch.response)


# ---------------------------------------------------------------------------
# divergences


def _check_dims(x: SpdMatrix, y: SpdMatrix):
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")


def _clamp(value: float, scale: float) -> float:
    # rounding error in the traces grows with their magnitude
    tol = NEG_CLAMP * max(1.0, scale)
    if value < 0.0:
        if value < -tol:
            raise NumericalFailure(f"divergence evaluated to {value:.3e} < 0")
        return 0.0
    return value


def vn_divergence(x, y) -> float:
    """von Neumann divergence ``Tr(X log X - X log Y - X + Y)``."""
    x, y = as_spd(x), as_spd(y)
    _check_dims(x, y)
    xlogx = float(np.sum(x.eigvals * np.log(x.eigvals)))
    xlogy = float(np.sum(x.entries * y.log))
    tx, ty = float(np.trace(x.entries)), float(np.trace(y.entries))
    value = xlogx - xlogy - tx + ty
    return _clamp(value, abs(xlogx) + abs(xlogy) + tx + ty)


def jeffery_divergence(x, y) -> float:
    """Symmetrized von Neumann divergence ``0.5 Tr((X - Y)(log X - log Y))``.

    Swapping the arguments negates both factors exactly, so the result is
    bitwise symmetric.
    """
    x, y = as_spd(x), as_spd(y)
    _check_dims(x, y)
    value = 0.5 * float(np.sum((x.entries - y.entries) * (x.log - y.log)))
    scale = float(np.sum(np.abs(x.entries) * np.abs(x.log - y.log)))
    return _clamp(value, scale)


def sqrt_jeffery_loss(x, y) -> float:
    return float(np.sqrt(jeffery_divergence(x, y)))


def conditional_divergence(p1: JointCovariance, p2: JointCovariance,
                           symmetric: bool = True) -> float:
    """von Neumann conditional divergence between ``p(y|x)`` of two joints.

    The asymmetric form is ``D(joint1||joint2) - D(marg1||marg2)`` and may
    be negative; the symmetric form averages both directions.
    """
    if (p1.feature_dim, p1.response_dim) != (p2.feature_dim, p2.response_dim):
        raise ValueError(
            f"joint layouts differ: ({p1.feature_dim},{p1.response_dim}) vs "
            f"({p2.feature_dim},{p2.response_dim})"
        )
    forward = vn_divergence(p1.matrix, p2.matrix) - vn_divergence(p1.marginal, p2.marginal)
    if not symmetric:
        return forward
    backward = vn_divergence(p2.matrix, p1.matrix) - vn_divergence(p2.marginal, p1.marginal)
    return 0.5 * (forward + backward)


# ---------------------------------------------------------------------------
# gradients


def log_divided_differences(w: np.ndarray) -> np.ndarray:
    """First divided differences of ``log`` on eigenvalues ``w``.

    Entry ``(i, j)`` is ``(log w_i - log w_j) / (w_i - w_j)``, or ``1 / w_i``
    on coincident eigenvalues.
    """
    wi = w[:, None]
    wj = w[None, :]
    d = wi - wj
    ratio = d / wj
    safe = np.where(d == 0.0, 1.0, d)
    out = np.log1p(ratio) / safe
    small = np.abs(ratio) < 1e-8
    series = (1.0 - ratio / 2.0 + ratio * ratio / 3.0) / wj
    return np.where(small, series, out)


def trace_log_gradient(x: SpdMatrix, c: np.ndarray) -> np.ndarray:
    """Gradient of ``X -> Tr(C log X)`` for symmetric ``C``."""
    u = x.eigvecs
    inner = u.T @ c @ u
    return symmetrize(u @ (log_divided_differences(x.eigvals) * inner) @ u.T)


def divergence_gradient(x, y, mode: GradientMode = "daleckii_krein"):
    """Gradients of the Jeffery divergence with respect to both arguments.

    ``daleckii_krein`` is the exact gradient for arbitrary SPD pairs.
    ``paper_closed_form`` uses ``0.5 (log X - log Y - Y X^-1 + I)``
    (symmetrized), which is exact only when X and Y commute.
    """
    x, y = as_spd(x), as_spd(y)
    _check_dims(x, y)
    eye = np.eye(x.dim)
    diff = x.log - y.log
    if mode == "daleckii_krein":
        gx = 0.5 * (diff + eye - trace_log_gradient(x, y.entries))
        gy = 0.5 * (-diff + eye - trace_log_gradient(y, x.entries))
    elif mode == "paper_closed_form":
        gx = 0.5 * symmetrize(diff - y.entries @ x.inverse + eye)
        gy = 0.5 * symmetrize(-diff - x.entries @ y.inverse + eye)
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    return symmetrize(gx), symmetrize(gy)


# ---------------------------------------------------------------------------
# sample convergence


def empirical_convergence_curve(true_cov, sample_sizes: Sequence[int], trials: int = 20,
                                seed: int = 0) -> list[tuple[int, float]]:
    """Mean ``vn_divergence(sample estimate, true)`` per sample size.

    Samples are drawn from a zero-mean Gaussian with covariance ``true_cov``.
    """
    true_cov = as_spd(true_cov)
    sizes = [int(n) for n in sample_sizes]
    if any(n < 2 for n in sizes):
        raise ValueError("sample sizes must be at least 2")
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sample sizes must be ascending")
    rng = np.random.default_rng(seed)
    chol = true_cov.eigvecs * np.sqrt(true_cov.eigvals)
    curve = []
    for n in sizes:
        vals = []
        for _ in range(trials):
            z = rng.standard_normal((n, true_cov.dim)) @ chol.T
            vals.append(vn_divergence(estimate_covariance(z), true_cov))
        curve.append((n, float(np.mean(vals))))
    return curve
