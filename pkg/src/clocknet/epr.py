"""Dissipatively generated EPR pair of clocks and secret time sharing.

Two clocks with antiparallel mean spins (``J = J_x1 = -J_x2``) are mapped to
bosonic modes ``b_k = (X_k + i P_k)/sqrt(2)`` with

    X_1 = J_z1/sqrt(J),  P_1 = J_y1/sqrt(J),
    X_2 = J_z2/sqrt(J),  P_2 = -J_y2/sqrt(J),

so that both pairs are canonical. Covariances are symmetrized and ordered
as (X_1, P_1, X_2, P_2); the vacuum has ``cov = I/2``.

The forward-scattered modes a_+ and a_- are eliminated adiabatically, leaving
collective jump operators

    L_+ = mu_1 b_1^dag + nu_2 b_2,   L_- = mu_2 b_2^dag + nu_1 b_1,

plus optional single-mode decay at rate ``extra_loss``. For matched rates and
``nu > mu`` the steady state is a two-mode squeezed vacuum with
``tanh r = mu/nu``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .spin_core import make_rng, spawn_rngs

OMEGA = np.array([[0.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, -1.0, 0.0]])
# quadrature coefficient vectors: b = (X + iP)/sqrt2, b^dag = (X - iP)/sqrt2
_B1 = np.array([1.0, 1.0j, 0.0, 0.0]) / math.sqrt(2.0)
_B2 = np.array([0.0, 0.0, 1.0, 1.0j]) / math.sqrt(2.0)


class UnstableDriftError(ValueError):
    """The drift matrix has an eigenvalue with nonnegative real part."""


@dataclass(frozen=True)
class CouplingRates:
    mu1: float
    mu2: float
    nu1: float
    nu2: float
    extra_loss: float = 0.0

    def __post_init__(self):
        if min(self.mu1, self.mu2, self.nu1, self.nu2, self.extra_loss) < 0:
            raise ValueError("coupling rates must be >= 0")

    @classmethod
    def matched(cls, mu: float, nu: float, extra_loss: float = 0.0) -> "CouplingRates":
        return cls(mu, mu, nu, nu, extra_loss)

    @property
    def is_matched(self) -> bool:
        return math.isclose(self.mu1, self.mu2) and math.isclose(self.nu1, self.nu2)


@dataclass(frozen=True)
class EPRState:
    cov4: np.ndarray
    j_len: float = 1.0
    mean4: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        cov = np.asarray(self.cov4, dtype=float)
        if cov.shape != (4, 4):
            raise ValueError("cov4 must be 4x4")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("cov4 must be symmetric")
        object.__setattr__(self, "cov4", 0.5 * (cov + cov.T))
        object.__setattr__(self, "mean4", np.asarray(self.mean4, dtype=float).reshape(4))


def vacuum(j_len: float = 1.0) -> EPRState:
    """Two independent coherent spin states."""
    return EPRState(0.5 * np.eye(4), j_len)


def two_mode_squeezed(r: float, j_len: float = 1.0) -> EPRState:
    """Ideal two-mode squeezed vacuum with ``Var(X1+X2) = Var(P1-P2) = e^{-2r}``."""
    c, s = 0.5 * math.cosh(2 * r), 0.5 * math.sinh(2 * r)
    cov = np.array([[c, 0, -s, 0], [0, c, 0, s], [-s, 0, c, 0], [0, s, 0, c]])
    return EPRState(cov, j_len)


def physicality_margin(cov4) -> float:
    """Smallest eigenvalue of ``cov + i Omega/2``; negative means unphysical."""
    return float(np.linalg.eigvalsh(np.asarray(cov4) + 0.5j * OMEGA).min())


def is_physical(cov4, tol: float = 1e-10) -> bool:
    cov4 = np.asarray(cov4)
    return bool(np.all(np.linalg.eigvalsh(cov4) > 0) and physicality_margin(cov4) >= -tol)


def epr_variances(s: EPRState) -> tuple[float, float]:
    """(Var(X1+X2), Var(P1-P2)) in quadrature units."""
    u = np.array([1.0, 0.0, 1.0, 0.0])
    w = np.array([0.0, 1.0, 0.0, -1.0])
    return float(u @ s.cov4 @ u), float(w @ s.cov4 @ w)


def epr_criterion(s: EPRState) -> tuple[float, bool]:
    """``Var(J_y1+J_y2) + Var(J_z1+J_z2)`` and whether it beats ``2J``."""
    if s.j_len <= 0:
        raise ValueError("j_len must be > 0")
    vx, vp = epr_variances(s)
    value = s.j_len * (vx + vp)
    return value, bool(value < 2.0 * s.j_len * (1.0 - 1e-12))


def single_party_variance(s: EPRState, party: int) -> float:
    """Mean quadrature variance seen by one clock alone."""
    if party not in (1, 2):
        raise ValueError("party must be 1 or 2")
    k = 2 * (party - 1)
    return float(0.5 * (s.cov4[k, k] + s.cov4[k + 1, k + 1]))


def jump_operators(rates: CouplingRates) -> list[np.ndarray]:
    """Quadrature coefficient vectors ``c`` with ``L = c . (X1, P1, X2, P2)``."""
    ops = [
        rates.mu1 * _B1.conj() + rates.nu2 * _B2,
        rates.mu2 * _B2.conj() + rates.nu1 * _B1,
    ]
    if rates.extra_loss > 0:
        g = math.sqrt(rates.extra_loss)
        ops += [g * _B1, g * _B2]
    return ops


def drift_diffusion(rates: CouplingRates) -> tuple[np.ndarray, np.ndarray]:
    """Drift ``A`` and diffusion ``D`` with ``dcov/dt = A cov + cov A^T + D``.

    For a linear jump operator with coefficient vector ``c``,
    ``A = -Omega Im(c c^dag)`` and ``D = Omega Re(c c^dag) Omega^T``.

    Raises:
        UnstableDriftError: if no steady state exists.
    """
    if not rates.is_matched:
        warnings.warn("rates violate the matching condition mu1=mu2, nu1=nu2", stacklevel=2)
    a = np.zeros((4, 4))
    dmat = np.zeros((4, 4))
    for c in jump_operators(rates):
        cc = np.outer(c, c.conj())
        a -= OMEGA @ cc.imag
        dmat += OMEGA @ cc.real @ OMEGA.T
    if np.linalg.eigvals(a).real.max() >= -1e-14:
        raise UnstableDriftError(
            f"drift has no decaying steady state (mu={rates.mu1:g},{rates.mu2:g}, "
            f"nu={rates.nu1:g},{rates.nu2:g}, extra_loss={rates.extra_loss:g})"
        )
    return a, dmat


def lyapunov_residual(a, dmat, cov) -> float:
    res = a @ cov + cov @ a.T + dmat
    return float(np.linalg.norm(res) / max(np.linalg.norm(dmat), 1e-300))


def steady_state(rates: CouplingRates, j_len: float = 1.0) -> EPRState:
    """Solve ``A cov + cov A^T + D = 0`` directly."""
    a, dmat = drift_diffusion(rates)
    cov = linalg.solve_continuous_lyapunov(a, -dmat)
    return EPRState(0.5 * (cov + cov.T), j_len)


def criterion_closed_form(mu: float, nu: float, j_len: float = 1.0) -> float:
    """``2J (nu - mu)/(nu + mu)`` for matched rates without extra loss."""
    return 2.0 * j_len * (nu - mu) / (nu + mu)


def _heun(a, dmat, cov, dt):
    f1 = a @ cov + cov @ a.T + dmat
    pred = cov + dt * f1
    f2 = a @ pred + pred @ a.T + dmat
    return cov + 0.5 * dt * (f1 + f2)


def _advance(cov, mean, a, dmat, dt, max_halvings):
    def step(c, h, depth):
        new = _heun(a, dmat, c, h)
        if is_physical(new, tol=1e-9):
            return new
        if depth >= max_halvings:
            raise FloatingPointError("integrator stays unphysical after repeated step halving")
        return step(step(c, h / 2, depth + 1), h / 2, depth + 1)

    new = step(cov, dt, 0)
    pred = mean + dt * (a @ mean)
    mean = mean + 0.5 * dt * (a @ mean + a @ pred)
    return 0.5 * (new + new.T), mean


def evolve(s: EPRState, rates: CouplingRates, dt: float, max_halvings: int = 20) -> EPRState:
    """Advance the covariance by ``dt`` with a second-order (Heun) step.

    A step that breaks physicality is redone as two half steps, recursively.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    a, dmat = drift_diffusion(rates)
    cov, mean = _advance(s.cov4, s.mean4, a, dmat, dt, max_halvings)
    return EPRState(cov, s.j_len, mean)


def relaxation_time(rates: CouplingRates) -> float:
    """Slowest mean-decay time ``1 / min |Re lambda(A)|`` of the drift."""
    a, _ = drift_diffusion(rates)
    return float(1.0 / np.abs(np.linalg.eigvals(a).real).min())


def relax(s: EPRState, rates: CouplingRates, t_total: float, dt: float, max_halvings: int = 20) -> EPRState:
    """Integrate for ``t_total`` in steps of ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    a, dmat = drift_diffusion(rates)
    cov, mean = s.cov4, s.mean4
    for _ in range(int(math.ceil(t_total / dt))):
        cov, mean = _advance(cov, mean, a, dmat, dt, max_halvings)
    return EPRState(cov, s.j_len, mean)


# --- secret time sharing ---------------------------------------------------


@dataclass(frozen=True)
class Eavesdropper:
    """Intercept-resend attack on clock 2.

    ``kind="heterodyne"`` measures both quadratures (vacuum-limited) and
    resends a coherent state; ``kind="homodyne"`` measures one randomly
    chosen quadrature ideally and resends a coherent state displaced along
    it. ``fraction`` is the share of rounds attacked.
    """

    kind: str = "heterodyne"
    fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ("heterodyne", "homodyne"):
            raise ValueError(f"unknown eavesdropper kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")


@dataclass
class ProtocolTranscript:
    choice1: np.ndarray
    choice2: np.ndarray
    outcomes: np.ndarray
    sifted: np.ndarray
    attacked: np.ndarray
    summary: dict

    def rounds(self) -> list[dict]:
        return [
            {
                "round": k,
                "choice1": int(self.choice1[k]),
                "choice2": int(self.choice2[k]),
                "outcome1": float(self.outcomes[k, 0]),
                "outcome2": float(self.outcomes[k, 1]),
                "sifted": bool(self.sifted[k]),
            }
            for k in range(self.choice1.size)
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.rounds())


MIN_SIFTED = 20


def _attack(x: np.ndarray, eve: Eavesdropper, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    hit = rng.random(n) < eve.fraction
    sq = math.sqrt(0.5)
    x = x.copy()
    if eve.kind == "heterodyne":
        # heterodyne adds vacuum noise on readout, the resent coherent state adds it again
        meas = x[:, 2:4] + sq * rng.standard_normal((n, 2))
        resent = meas + sq * rng.standard_normal((n, 2))
    else:
        basis = rng.integers(0, 2, n)
        resent = sq * rng.standard_normal((n, 2))
        rows = np.arange(n)
        resent[rows, basis] += x[rows, 2 + basis]
    x[hit, 2:4] = resent[hit]
    return x, hit


def secret_time_protocol(s: EPRState, rounds: int, eavesdropper: Eavesdropper | None = None,
                         seed=None, alpha: float = 0.01) -> ProtocolTranscript:
    """Run the random-basis clock comparison and a variance test for tampering.

    Each round both owners flip a fair coin and apply (1) or skip (0) a pi/2
    pulse about x before reading J_z. In quadratures the pulse maps
    ``X_1 -> P_1`` and ``X_2 -> -P_2``, so on rounds with equal choices the
    sum of the two readouts is ``X1+X2`` or ``P1-P2``. Outcomes are in units
    of ``sqrt(J)``.

    The test statistic ``sum s_k^2 / v_k`` over sifted rounds is chi-squared
    with one degree of freedom per round when nobody interferes; a two-sided
    test at level ``alpha`` sets ``eavesdrop_flag``.
    """
    if rounds < 2 * MIN_SIFTED:
        raise ValueError(f"need at least {2 * MIN_SIFTED} rounds for the variance test")
    rng = make_rng(seed)
    c1 = rng.integers(0, 2, rounds)
    c2 = rng.integers(0, 2, rounds)
    chol = np.linalg.cholesky(s.cov4)
    x = s.mean4 + rng.standard_normal((rounds, 4)) @ chol.T
    attacked = np.zeros(rounds, dtype=bool)
    if eavesdropper is not None:
        x, attacked = _attack(x, eavesdropper, rng)

    o1 = np.where(c1 == 1, x[:, 1], x[:, 0])
    o2 = np.where(c2 == 1, -x[:, 3], x[:, 2])
    sifted = c1 == c2
    n_sift = int(sifted.sum())
    if n_sift < MIN_SIFTED:
        raise ValueError(f"only {n_sift} sifted rounds; need {MIN_SIFTED}")

    vx, vp = epr_variances(s)
    sums = (o1 + o2)[sifted]
    expected = np.where(c1[sifted] == 1, vp, vx)
    stat = float(np.sum(sums**2 / expected))
    cdf = stats.chi2.cdf(stat, n_sift)
    p_value = float(min(1.0, 2.0 * min(cdf, 1.0 - cdf)))
    joint_var = float(np.mean(sums**2))
    summary = {
        "rounds": rounds,
        "sifted_rounds": n_sift,
        "sift_fraction": n_sift / rounds,
        "joint_variance": joint_var,
        "expected_joint_variance": float(expected.mean()),
        "qpn_joint_variance": 1.0,
        "single_party_variance": single_party_variance(s, 1),
        "chi2_statistic": stat,
        "p_value": p_value,
        "alpha": alpha,
        "eavesdrop_flag": bool(p_value < alpha),
        "attacked_rounds": int(attacked.sum()),
    }
    return ProtocolTranscript(c1, c2, np.column_stack([o1, o2]), sifted, attacked, summary)


def detection_rate(s: EPRState, rounds: int, trials: int, eavesdropper: Eavesdropper | None = None,
                   seed=0, alpha: float = 0.01) -> dict:
    """Fraction of independent protocol runs that raise the eavesdrop flag."""
    flags = np.empty(trials, dtype=bool)
    sift = np.empty(trials)
    for k, rng in enumerate(spawn_rngs(seed, trials)):
        t = secret_time_protocol(s, rounds, eavesdropper, rng, alpha)
        flags[k] = t.summary["eavesdrop_flag"]
        sift[k] = t.summary["sift_fraction"]
    rate = float(flags.mean())
    return {
        "trials": trials,
        "flag_rate": rate,
        "flag_rate_sigma": math.sqrt(max(rate * (1 - rate), alpha * (1 - alpha)) / trials),
        "mean_sift_fraction": float(sift.mean()),
    }
