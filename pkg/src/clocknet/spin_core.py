"""Gaussian (Holstein-Primakoff) model of a collective clock pseudo-spin.

A clock ensemble of ``N`` two-level atoms is described by the direction and
length ``J`` of its mean Bloch vector plus the covariance of the canonical
pair ``X_A = J_perp1 / sqrt(J)``, ``P_A = J_perp2 / sqrt(J)`` taken along two
axes transverse to the mean spin. For a mean spin along +x the pair is
``(J_z, J_y) / sqrt(J)``. A coherent spin state (CSS) has ``cov = I/2``.

Conventions
-----------
* Rotations are right-handed about the named lab axis, so a pi/2 rotation
  about y maps +x to -z (and +z to +x).
* The transverse frame attached to a mean direction ``m`` is fixed by ``m``
  alone: the X axis is lab z projected orthogonally to ``m`` (lab x when ``m``
  is parallel to z) and the P axis is ``X x m``. Rotations that move the mean
  spin re-express the covariance in the frame of the new direction.

All operations return new objects; :class:`CollectiveSpin` is immutable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

#: Variance of a canonical quadrature of a CSS (vacuum level).
CSS_VARIANCE = 0.5

#: Default ratio for the Holstein-Primakoff flag: the state is considered
#: outside the Gaussian regime when ``max eig(cov) > HP_RATIO * J``.
HP_RATIO = 0.1

_AXES = {
    "x": np.array([1.0, 0.0, 0.0]),
    "y": np.array([0.0, 1.0, 0.0]),
    "z": np.array([0.0, 0.0, 1.0]),
}


def make_rng(seed=None) -> np.random.Generator:
    """Return a PCG64 generator; passes through an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent generators deterministically from ``seed``."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def axis_vector(axis) -> np.ndarray:
    if isinstance(axis, str):
        try:
            return _AXES[axis.lower()].copy()
        except KeyError:
            raise ValueError(f"unknown rotation axis {axis!r}; use 'x', 'y' or 'z'") from None
    v = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(v)
    if v.shape != (3,) or norm == 0.0:
        raise ValueError("rotation axis must be a nonzero 3-vector")
    return v / norm


def rotation_matrix(axis, angle) -> np.ndarray:
    """Right-handed rotation matrix about ``axis`` (Rodrigues formula).

    ``angle`` may be an array, in which case the result has shape
    ``angle.shape + (3, 3)``.
    """
    n = axis_vector(axis)
    angle = np.asarray(angle, dtype=float)
    c = np.cos(angle)[..., None, None]
    s = np.sin(angle)[..., None, None]
    k = np.array([[0.0, -n[2], n[1]], [n[2], 0.0, -n[0]], [-n[1], n[0], 0.0]])
    return c * np.eye(3) + s * k + (1.0 - c) * np.outer(n, n)


def transverse_frame(mean_dir) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors (e_X, e_P) spanning the plane orthogonal to ``mean_dir``."""
    m = np.asarray(mean_dir, dtype=float)
    z = _AXES["z"]
    e_x = z - np.dot(z, m) * m
    if np.linalg.norm(e_x) < 1e-9:
        x = _AXES["x"]
        e_x = x - np.dot(x, m) * m
    e_x = e_x / np.linalg.norm(e_x)
    e_p = np.cross(e_x, m)
    return e_x, e_p / np.linalg.norm(e_p)


@dataclass(frozen=True)
class CollectiveSpin:
    """Gaussian state of one clock ensemble.

    Attributes:
        n_atoms: atom number N.
        mean_dir: unit vector of the mean Bloch vector.
        j_len: mean spin length J (CSS: N/2).
        cov: 2x2 covariance of (X_A, P_A).
        eta_acc: accumulated spontaneous-emission exponent.
        quad_mean: conditional means of (X_A, P_A); nonzero only after a
            measurement has been conditioned on.
    """

    n_atoms: int
    mean_dir: np.ndarray
    j_len: float
    cov: np.ndarray
    eta_acc: float = 0.0
    quad_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise ValueError(f"n_atoms must be a positive integer, got {self.n_atoms!r}")
        m = np.asarray(self.mean_dir, dtype=float)
        norm = np.linalg.norm(m)
        if m.shape != (3,) or norm == 0.0:
            raise ValueError("mean_dir must be a nonzero 3-vector")
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (2, 2):
            raise ValueError("cov must be 2x2")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("cov must be symmetric")
        if self.j_len < 0:
            raise ValueError("j_len must be >= 0")
        object.__setattr__(self, "mean_dir", m / norm)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "quad_mean", np.asarray(self.quad_mean, dtype=float).reshape(2))

    @property
    def var_x(self) -> float:
        return float(self.cov[0, 0])

    @property
    def var_p(self) -> float:
        return float(self.cov[1, 1])

    @property
    def var_jz(self) -> float:
        """Variance of the squeezed spin projection, ``J * Var(X_A)``."""
        return self.j_len * self.var_x

    def replace(self, **changes) -> "CollectiveSpin":
        return dataclasses.replace(self, **changes)


def new_css(n_atoms: int, direction="x") -> CollectiveSpin:
    """Coherent spin state of ``n_atoms`` atoms with J = N/2.

    ``direction`` is a lab axis name (optionally signed, e.g. ``"-z"``) or a
    3-vector; the default is +x.
    """
    if int(n_atoms) != n_atoms or n_atoms < 1:
        raise ValueError(f"n_atoms must be >= 1, got {n_atoms!r}")
    if isinstance(direction, str):
        sign = -1.0 if direction.startswith("-") else 1.0
        m = sign * axis_vector(direction.lstrip("+-"))
    else:
        m = axis_vector(direction)
    return CollectiveSpin(
        n_atoms=int(n_atoms),
        mean_dir=m,
        j_len=n_atoms / 2.0,
        cov=CSS_VARIANCE * np.eye(2),
    )


def rotate(s: CollectiveSpin, axis, angle: float, angle_error_rms: float = 0.0, rng=None) -> CollectiveSpin:
    """Rotate the state about a lab axis.

    A Gaussian error of rms ``angle_error_rms`` is added to ``angle``; it is
    drawn from ``rng`` (required when the rms is nonzero).
    """
    if not np.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    if angle_error_rms < 0:
        raise ValueError("angle_error_rms must be >= 0")
    if angle_error_rms > 0:
        if rng is None:
            raise ValueError("an rng is required when angle_error_rms > 0")
        angle = angle + make_rng(rng).normal(0.0, angle_error_rms)

    rot = rotation_matrix(axis, angle)
    old_x, old_p = transverse_frame(s.mean_dir)
    new_m = rot @ s.mean_dir
    new_x, new_p = transverse_frame(new_m)
    rx, rp = rot @ old_x, rot @ old_p
    q = np.array([[new_x @ rx, new_x @ rp], [new_p @ rx, new_p @ rp]])
    return s.replace(mean_dir=new_m, cov=q @ s.cov @ q.T, quad_mean=q @ s.quad_mean)


def apply_decoherence(s: CollectiveSpin, eta: float, inject_noise: bool = False) -> CollectiveSpin:
    """Shorten the mean spin as ``J -> exp(-eta) J``.

    By default the quadrature covariance is left unchanged. ``inject_noise``
    adds ``eta/2`` to both variances; this is an extension and is off unless
    requested.
    """
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    cov = s.cov + 0.5 * eta * np.eye(2) if inject_noise else s.cov
    return s.replace(j_len=s.j_len * np.exp(-eta), eta_acc=s.eta_acc + eta, cov=cov)


def squeezing_parameter(s: CollectiveSpin) -> float:
    """Metrological squeezing ``xi = Var(X_A) N / J``; xi < 1 means entanglement."""
    if s.j_len <= 0:
        raise ValueError("squeezing parameter undefined for zero mean spin")
    return s.var_x * s.n_atoms / s.j_len


def min_detectable_angle(s: CollectiveSpin) -> float:
    """Quantum-limited angle resolution ``sqrt(Var(J_z))/J = sqrt(xi/N)``."""
    return float(np.sqrt(squeezing_parameter(s) / s.n_atoms))


def to_db(xi: float) -> float:
    """Squeezing in dB (negative values mean noise below QPN)."""
    return float(10.0 * np.log10(xi))


def heisenberg_ok(cov, tol: float = 1e-12) -> bool:
    cov = np.asarray(cov, dtype=float)
    return bool(np.linalg.det(cov) >= 0.25 - tol and np.all(np.linalg.eigvalsh(cov) > 0))


def hp_valid(s: CollectiveSpin, ratio: float = HP_RATIO) -> bool:
    """True while the largest quadrature variance stays below ``ratio * J``."""
    return bool(np.linalg.eigvalsh(s.cov).max() <= ratio * s.j_len)


def sample_product_jz(n_atoms: int, shots: int, rng=None) -> np.ndarray:
    """Draw J_z outcomes of an x-polarized product state atom by atom.

    Each atom is found in |1> or |2> with probability 1/2, so
    ``J_z = N_1 - N/2`` with ``N_1 ~ Binomial(N, 1/2)``.
    """
    rng = make_rng(rng)
    return rng.binomial(n_atoms, 0.5, size=shots) - n_atoms / 2.0
