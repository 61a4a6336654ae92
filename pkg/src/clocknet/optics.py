"""QND probe physics in free space and in an optical cavity.

Symbols follow the usual atom-light conventions: ``d`` is the resonant
single-pass optical depth, ``eta`` the probe-induced spontaneous-emission
parameter, ``kappa`` the dimensionless QND coupling, ``F`` the cavity finesse.
Frequencies only enter through ratios, so any consistent unit works.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .spin_core import CollectiveSpin, apply_decoherence, heisenberg_ok, make_rng

E = math.e
#: Upper bound on sigma*F/A beyond which the Gaussian spin model fails.
HP_BOUND = 2.0 * math.pi * math.e
SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ProbePulse:
    """Far-detuned probe on the cyclic transition.

    ``n_dr`` is the number of photons driving the atoms (free-space
    bookkeeping), ``n_det`` the number detected after the cavity.
    """

    n_dr: float
    n_det: float
    gamma: float
    delta: float
    sigma_over_a: float

    def __post_init__(self):
        if self.delta == 0:
            raise ValueError("probe detuning delta must be nonzero")
        if self.n_dr < 0 or self.n_det < 0:
            raise ValueError("photon numbers must be >= 0")
        if self.gamma <= 0 or self.sigma_over_a <= 0:
            raise ValueError("gamma and sigma_over_a must be > 0")

    @property
    def scatter_per_photon(self) -> float:
        """(gamma/Delta)^2 sigma/A: spontaneous emission per probe photon."""
        return (self.gamma / self.delta) ** 2 * self.sigma_over_a

    @property
    def eta(self) -> float:
        """Free-space decoherence parameter of the driving photons."""
        return self.n_dr * self.scatter_per_photon

    @property
    def eta_n(self) -> float:
        """Same parameter evaluated with the detected photon number."""
        return self.n_det * self.scatter_per_photon


def photons_for_eta(eta: float, gamma: float, delta: float, sigma_over_a: float) -> float:
    """Photon number that produces a given ``eta`` at this detuning."""
    return eta / ((gamma / delta) ** 2 * sigma_over_a)


@dataclass(frozen=True)
class CavityParams:
    """Standing-wave cavity around the ensemble.

    ``t1``, ``t2`` are mirror power transmissions and ``loss`` the single-pass
    intracavity power loss. ``length``, ``big_gamma`` (linewidth) and
    ``omega_single`` (single-atom vacuum Rabi frequency) are metadata used
    by consistency checks only.
    """

    t1: float
    t2: float
    loss: float = 0.0
    length: float = 0.05
    big_gamma: float = 29e3
    omega_single: float = 16e3
    d: float = 0.012

    def __post_init__(self):
        for name in ("t1", "t2"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")
        if self.loss < 0:
            raise ValueError("loss must be >= 0")
        if self.d <= 0:
            raise ValueError("optical depth d must be > 0")
        if self.finesse <= 1.0:
            raise ValueError(f"finesse {self.finesse:.3g} must exceed 1")

    @property
    def round_trip_loss(self) -> float:
        return self.t1 + self.t2 + 2.0 * self.loss

    @property
    def finesse(self) -> float:
        return 2.0 * math.pi / self.round_trip_loss

    @property
    def small_loss(self) -> bool:
        """True in the regime where the finesse formula is trustworthy."""
        return self.round_trip_loss < 0.1

    @property
    def geometric_linewidth(self) -> float:
        """FWHM linewidth c / (2 L F) in Hz implied by length and finesse."""
        return SPEED_OF_LIGHT / (2.0 * self.length * self.finesse)

    @classmethod
    def symmetric(cls, finesse: float, loss: float = 0.0, **kw) -> "CavityParams":
        """Cavity with equal mirrors chosen to give ``finesse``."""
        t = (2.0 * math.pi / finesse - 2.0 * loss) / 2.0
        return cls(t1=t, t2=t, loss=loss, **kw)


def kappa_free(d: float, eta: float) -> float:
    """Free-space QND coupling ``sqrt(d eta e^-eta)``."""
    if d <= 0 or eta < 0:
        raise ValueError("need d > 0 and eta >= 0")
    return math.sqrt(d * eta * math.exp(-eta))


def xi_qnd(kappa: float, eta: float) -> float:
    """Squeezing after one QND probe of a CSS: ``1 / (e^-eta (1 + kappa^2))``."""
    return 1.0 / (math.exp(-eta) * (1.0 + kappa * kappa))


def xi_min_free(d: float) -> float:
    """Large-d optimum ``2e/d`` reached at eta = 1/2."""
    return 2.0 * E / d


def xi_min_cavity(d: float, finesse: float) -> float:
    """Large-dF optimum ``e pi / (2 d F)`` reached at eta_cav = 1/2."""
    return E * math.pi / (2.0 * d * finesse)


def qnd_update(s: CollectiveSpin, kappa: float, eta: float = 0.0, rng=None, outcome=None):
    """Condition the spin on a homodyne readout of ``P_L^out = P_L^in + kappa X_A``.

    The probe first kicks ``P_A`` by ``kappa X_L`` (variance ``kappa^2/2``),
    then the readout is used in a Gaussian (Kalman) update of ``(X_A, P_A)``,
    and finally the mean spin is shortened by ``e^-eta``.

    The outcome is drawn from its predictive distribution
    ``N(kappa <X_A>, kappa^2 Var(X_A) + 1/2)`` when ``rng`` is given; pass
    ``outcome`` to condition on a known value instead. With neither, the
    expected outcome ``kappa <X_A>`` is used.

    Returns:
        (new_state, outcome)
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if s.j_len <= 0 or not heisenberg_ok(s.cov, tol=1e-9):
        raise ValueError("invalid prior state")

    cov = s.cov + np.diag([0.0, 0.5 * kappa * kappa])
    mean = s.quad_mean
    pred_mean = kappa * mean[0]
    pred_var = kappa * kappa * cov[0, 0] + 0.5
    if outcome is None:
        if rng is not None:
            outcome = make_rng(rng).normal(pred_mean, math.sqrt(pred_var))
        else:
            outcome = pred_mean

    cross = kappa * cov[:, 0]
    gain = cross / pred_var
    new_mean = mean + gain * (outcome - pred_mean)
    new_cov = cov - np.outer(cross, cross) / pred_var
    post = s.replace(cov=new_cov, quad_mean=new_mean)
    return apply_decoherence(post, eta), float(outcome)


def phase_shift(s: CollectiveSpin, probe: ProbePulse, cav: CavityParams) -> tuple[float, float]:
    """Mean cavity-enhanced probe phase and its shot-noise rms.

    Returns:
        (mean phase, shot-noise rms) in radians.
    """
    if probe.n_det < 1:
        raise ValueError("at least one detected photon is required")
    eta_n = probe.eta_n
    gain = (
        math.sqrt(cav.d * math.exp(-eta_n))
        * (probe.gamma / probe.delta)
        * math.sqrt(probe.sigma_over_a)
        * 2.0 * cav.finesse / math.pi
    )
    return gain * float(s.quad_mean[0]), probe.n_det ** -0.5


def kappa_cavity(d: float, f: float, eta_n: float) -> float:
    """Cavity-enhanced coupling ``sqrt(d eta_n e^-eta_n) 2F/pi``.

    The exponent uses the detected-photon parameter ``eta_n``. See
    :func:`kappa_cavity_substituted` for the form written in terms of the
    intracavity parameter ``eta_cav``.
    """
    if d <= 0 or f <= 0 or eta_n < 0:
        raise ValueError("need d, f > 0 and eta_n >= 0")
    return math.sqrt(d * eta_n * math.exp(-eta_n)) * 2.0 * f / math.pi


def kappa_cavity_substituted(d: float, f: float, eta_cav: float = 0.5) -> float:
    """Coupling ``sqrt(4 d F eta_cav e^-eta_cav / pi)``.

    Equals :func:`kappa_cavity` with ``eta_n = pi eta_cav / F`` except that
    the decoherence exponent is ``eta_cav`` rather than ``eta_n``. This is
    the form whose optimum gives ``xi = e pi / (2 d F)``.
    """
    if d <= 0 or f <= 0 or eta_cav < 0:
        raise ValueError("need d, f > 0 and eta_cav >= 0")
    return math.sqrt(4.0 * d * f * eta_cav * math.exp(-eta_cav) / math.pi)


def eta_cav(eta_n: float, f: float) -> float:
    """Intracavity spontaneous emission ``eta_n F / pi``."""
    if eta_n < 0 or f <= 0:
        raise ValueError("need eta_n >= 0 and f > 0")
    return eta_n * f / math.pi


def cavity_transmission(cav: CavityParams, d_delta: float) -> tuple[float, float]:
    """On-resonance power transmission with probe absorption ``d_delta``.

    Returns:
        (exact, first_order). The exact form
        ``4 T1 T2 / (T1 + T2 + 2L + 2 d_delta)^2`` is authoritative; the
        second value is its expansion ``4 T1 T2 / (T1 + T2 + 2L)^2 (1 - 2 F d_delta / pi)``.
    """
    if d_delta < 0:
        raise ValueError("d_delta must be >= 0")
    denom = cav.round_trip_loss + 2.0 * d_delta
    if denom == 0:
        raise ZeroDivisionError("transmission denominator vanishes")
    exact = 4.0 * cav.t1 * cav.t2 / denom**2
    bare = 4.0 * cav.t1 * cav.t2 / cav.round_trip_loss**2
    return exact, bare * (1.0 - 2.0 * cav.finesse * d_delta / math.pi)


def probe_absorption(d: float, gamma: float, delta: float) -> float:
    """Single-pass absorption of the detuned probe, ``d (gamma/Delta)^2``."""
    return d * (gamma / delta) ** 2


def d_delta_at_optimum(n_atoms: float, n_photons: float) -> float:
    """Detuned absorption ``N / (2 n)`` when the probe sits at eta = 1/2."""
    return n_atoms / (2.0 * n_photons)


def collective_rabi(omega_single: float, n_atoms: int) -> float:
    return omega_single * math.sqrt(n_atoms)


@dataclass(frozen=True)
class CooperativityReport:
    cooperativity: float
    d_times_f: float
    rel_diff: float
    consistent: bool


def cooperativity_check(cav: CavityParams, omega_collective: float, gamma: float, rtol: float = 0.05) -> CooperativityReport:
    """Compare ``Omega^2 / (Gamma gamma)`` with ``d F``.

    A disagreement beyond ``rtol`` triggers a warning but is not an error.
    """
    if omega_collective <= 0 or gamma <= 0 or cav.big_gamma <= 0:
        raise ValueError("all rates must be > 0")
    coop = omega_collective**2 / (cav.big_gamma * gamma)
    df = cav.d * cav.finesse
    rel = abs(coop - df) / df
    ok = rel <= rtol
    if not ok:
        warnings.warn(
            f"cooperativity {coop:.4g} differs from d*F = {df:.4g} by {rel:.1%} (rtol {rtol:.1%})",
            stacklevel=2,
        )
    return CooperativityReport(coop, df, rel, ok)


def hp_validity(sigma_over_a: float, f: float) -> bool:
    """True iff ``sigma F / A < 2 pi e``."""
    if sigma_over_a <= 0 or f <= 0:
        raise ValueError("inputs must be > 0")
    return sigma_over_a * f < HP_BOUND


def optimal_eta_scan(d: float, etas=None) -> tuple[float, float]:
    """Grid minimum of the free-space squeezing over ``eta``.

    Returns:
        (eta_at_minimum, xi_minimum)
    """
    if etas is None:
        etas = np.linspace(1e-4, 2.0, 20001)
    etas = np.asarray(etas, dtype=float)
    xis = np.array([xi_qnd(kappa_free(d, e), e) for e in etas])
    k = int(np.argmin(xis))
    return float(etas[k]), float(xis[k])
