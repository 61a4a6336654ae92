"""Monte Carlo of the squeezed Ramsey clock sequence.

Each shot carries one phase-space sample of the collective spin, a lab-frame
3-vector ``J``. Initial transverse fluctuations are Gaussian with the CSS
variance ``N/4``; pulses rotate the sample exactly; the QND probe reads the
population of |1>, ``N_1 = N/2 + J_z``, and kicks the conjugate quadrature.
For Gaussian states and linear operations, sampling this way reproduces the
measurement statistics of the quadratures exactly.

Sequence per shot (mean spin along +x from step b on):

a. all atoms in |1> (spin along +z), atom number jittered
b. pi/2 about y, to +x
c. QND at +Delta, pi swap about x, QND at -Delta; the half-difference of
   the two readouts estimates J_z free of N and of the pi/2 error
d. pi/2 about x, moving the squeezed quadrature into the phase direction
e. free precession about z by the clock phase
f. pi/2 about x and destructive population readout

The deterministic probe light shift is modelled as a clock-frequency
offset ``sign(Delta) * stark_coeff * n_dr`` per probe that adds to the
Ramsey phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import optics
from .optics import CavityParams, ProbePulse
from .spin_core import make_rng, rotation_matrix


class HPValidityError(ValueError):
    """Raised when a configuration leaves the Gaussian (Holstein-Primakoff) regime."""


@dataclass(frozen=True)
class SequenceConfig:
    """Parameters of one Monte Carlo batch.

    ``mode`` is ``"qnd"`` (squeezed clock) or ``"css"`` (no QND probe). The
    coupling and decoherence are derived from ``probe`` and ``cavity``
    unless ``kappa``/``eta`` are given. ``kappa_model`` picks between the
    substituted cavity coupling (``"substituted"``, the one whose optimum is
    ``e pi / 2dF``) and the literal one (``"literal"``).

    ``pulse_error_rms`` applies to every pi/2 pulse. The pi swap has its own
    ``swap_error_rms`` because an error there rotates the antisqueezed J_y
    into J_z, which the double measurement cannot remove.
    """

    n_atoms: int
    probe: ProbePulse
    cavity: CavityParams | None = None
    precession_angle: float = 0.0
    pulse_error_rms: float = 0.0
    swap_error_rms: float = 0.0
    atom_number_jitter_rms: float = 0.0
    shots: int = 10_000
    seed: int = 0
    mode: str = "qnd"
    kappa: float | None = None
    eta: float | None = None
    kappa_model: str = "substituted"
    stark_coeff: float = 0.0
    probe_signs: tuple[int, int] = (1, -1)
    detector_noise_rms: float = 0.0

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.n_atoms < 1:
            raise ValueError("n_atoms must be >= 1")
        if min(self.pulse_error_rms, self.swap_error_rms, self.atom_number_jitter_rms, self.detector_noise_rms) < 0:
            raise ValueError("noise amplitudes must be >= 0")
        if self.mode not in ("qnd", "css"):
            raise ValueError(f"mode must be 'qnd' or 'css', got {self.mode!r}")
        if self.kappa_model not in ("substituted", "literal"):
            raise ValueError(f"unknown kappa_model {self.kappa_model!r}")
        if any(s not in (1, -1) for s in self.probe_signs):
            raise ValueError("probe_signs must be +1 or -1")

    @property
    def optical_depth(self) -> float:
        if self.cavity is not None:
            return self.cavity.d
        return self.n_atoms * self.probe.sigma_over_a

    def coupling(self) -> tuple[float, float]:
        """(kappa, eta) of the full double-QND measurement."""
        if self.mode == "css":
            return 0.0, 0.0
        d = self.optical_depth
        if self.cavity is None:
            eta = self.probe.eta if self.eta is None else self.eta
            kappa = optics.kappa_free(d, eta) if self.kappa is None else self.kappa
            return kappa, eta
        f = self.cavity.finesse
        eta_n = self.probe.eta_n if self.eta is None else self.eta * math.pi / f
        eta = optics.eta_cav(eta_n, f)
        if self.kappa is not None:
            kappa = self.kappa
        elif self.kappa_model == "literal":
            kappa = optics.kappa_cavity(d, f, eta_n)
        else:
            kappa = optics.kappa_cavity_substituted(d, f, eta)
        return kappa, eta

    def xi_predicted(self) -> float:
        kappa, eta = self.coupling()
        return optics.xi_qnd(kappa, eta)

    def check_hp(self) -> None:
        if self.mode == "css" or self.cavity is None:
            return
        sigma_over_a = self.cavity.d / self.n_atoms
        if not optics.hp_validity(sigma_over_a, self.cavity.finesse):
            raise HPValidityError(
                f"sigma*F/A = {sigma_over_a * self.cavity.finesse:.3g} >= 2*pi*e at N={self.n_atoms}: "
                "antisqueezed noise too large for the Gaussian spin model"
            )


class ShotRecord(NamedTuple):
    qnd1_outcome: float
    qnd2_outcome: float
    final_population_signal: float
    estimator: float


@dataclass
class SequenceResult:
    config: SequenceConfig
    qnd1: np.ndarray
    qnd2: np.ndarray
    signal: np.ndarray
    estimator: np.ndarray
    jz_error: np.ndarray
    xi_predicted: float
    summary: dict = field(default_factory=dict)

    def records(self) -> Iterator[ShotRecord]:
        for row in zip(self.qnd1, self.qnd2, self.signal, self.estimator):
            yield ShotRecord(*map(float, row))

    def rows(self) -> list[dict]:
        return [dict(shot=k, **rec._asdict()) for k, rec in enumerate(self.records())]


def _rotate(v: np.ndarray, axis: str, angles) -> np.ndarray:
    rot = rotation_matrix(axis, angles)
    if rot.ndim == 2:
        return v @ rot.T
    return np.einsum("nij,nj->ni", rot, v)


def _summarize(cfg: SequenceConfig, est: np.ndarray, jz_err: np.ndarray, xi_pred: float) -> dict:
    n = est.size
    std = float(est.std(ddof=1)) if n > 1 else 0.0
    pred = math.sqrt(xi_pred / cfg.n_atoms)
    return {
        "shots": n,
        "mean": float(est.mean()),
        "std": std,
        "std_error_of_mean": std / math.sqrt(n),
        "std_error_of_std": std / math.sqrt(2.0 * max(n - 1, 1)),
        "bias": float(est.mean()) - cfg.precession_angle,
        "precision_predicted": pred,
        "xi_predicted": xi_pred,
        "xi_measured": std**2 * cfg.n_atoms,
        "jz_estimate_variance": float(jz_err.var(ddof=1)) if n > 1 else 0.0,
    }


def run_sequence(cfg: SequenceConfig) -> SequenceResult:
    """Simulate ``cfg.shots`` independent clock cycles."""
    cfg.check_hp()
    rng = make_rng(cfg.seed)
    shots = cfg.shots
    n0 = cfg.n_atoms
    j_ref = n0 / 2.0
    kappa, eta = cfg.coupling()
    k_half = kappa / math.sqrt(2.0)  # each probe carries half the photons
    sq = math.sqrt(0.5)
    eps = cfg.pulse_error_rms

    # all draws are made up front in a fixed order so runs replay exactly
    n_shot = np.maximum(1.0, np.rint(n0 * (1.0 + cfg.atom_number_jitter_rms * rng.standard_normal(shots))))
    fluct = rng.standard_normal((shots, 2)) * sq
    # pi/2 pulses share pulse_error_rms; the pi swap has its own rms
    pulse_err = rng.standard_normal((shots, 4)) * np.array([eps, cfg.swap_error_rms, eps, eps])
    shot_noise = rng.standard_normal((shots, 2)) * sq
    back_action = rng.standard_normal((shots, 2)) * sq
    det_noise = rng.standard_normal(shots) * cfg.detector_noise_rms

    # a) all atoms in |1>
    j0 = n_shot / 2.0
    v = np.column_stack([np.sqrt(j0) * fluct[:, 0], np.sqrt(j0) * fluct[:, 1], j0])
    # b) pi/2 about y: +z -> +x
    v = _rotate(v, "y", math.pi / 2 + pulse_err[:, 0])

    # c) double QND with a pi swap in between
    stark = 0.0
    readouts = []
    for k, sign in enumerate(cfg.probe_signs):
        n1 = n_shot / 2.0 + v[:, 2]
        readouts.append(k_half * (n1 - n0 / 2.0) / math.sqrt(j_ref) + shot_noise[:, k])
        v[:, 1] += math.sqrt(j_ref) * k_half * back_action[:, k]
        stark += sign * cfg.stark_coeff * cfg.probe.n_dr
        if k == 0:
            v = _rotate(v, "x", math.pi + pulse_err[:, 1])
    m1, m2 = readouts
    jz_true = -v[:, 2]  # J_z before the swap, as seen by the first probe

    # Gaussian estimate of X = J_z/sqrt(J) from the swap-symmetric combination
    y = (m1 - m2) / math.sqrt(2.0)
    prior_var = 0.5 + j_ref * eps**2
    x_hat = kappa * prior_var * y / (kappa**2 * prior_var + 0.5)
    jz_hat = math.sqrt(j_ref) * x_hat

    # probe-induced decoherence: J -> e^-eta J, quadratures in units of sqrt(J) unchanged
    v[:, 0] *= math.exp(-eta)
    v[:, 1:] *= math.exp(-eta / 2.0)
    jz_now_hat = -math.exp(-eta / 2.0) * jz_hat
    jz_err = jz_true - jz_hat

    # d) squeezing into the phase quadrature
    v = _rotate(v, "x", math.pi / 2 + pulse_err[:, 2])
    # e) free precession plus mean light shift
    v = _rotate(v, "z", cfg.precession_angle + stark)
    # f) readout pulse and population measurement
    v = _rotate(v, "x", math.pi / 2 + pulse_err[:, 3])
    signal = v[:, 2] + det_noise

    # invert signal = J sin(phi) - J_z_now cos(phi)
    j_nom = math.exp(-eta) * j_ref
    radius = np.hypot(j_nom, jz_now_hat)
    alpha = np.arctan2(jz_now_hat, j_nom)
    est = alpha + np.arcsin(np.clip(signal / radius, -1.0, 1.0))

    xi_pred = optics.xi_qnd(kappa, eta)
    res = SequenceResult(cfg, m1, m2, signal, est, jz_err, xi_pred)
    res.summary = _summarize(cfg, est, jz_err, xi_pred)
    res.summary.update(kappa=kappa, eta=eta, stark_offset=stark)
    return res


@dataclass(frozen=True)
class StarkReport:
    residual_mean_shift: float
    residual_sigma: float
    same_sign_shift: float
    same_sign_sigma: float
    expected_same_sign_shift: float


def stark_cancellation_check(cfg: SequenceConfig) -> StarkReport:
    """Mean phase offset with probes at (+Delta, -Delta) versus (+Delta, +Delta)."""
    out = []
    for signs in ((1, -1), (1, 1)):
        res = run_sequence(replace(cfg, probe_signs=signs))
        out.append((res.summary["bias"], res.summary["std_error_of_mean"]))
    (pm, pm_sig), (pp, pp_sig) = out
    return StarkReport(pm, pm_sig, pp, pp_sig, 2.0 * cfg.stark_coeff * cfg.probe.n_dr)


def stark_bias_scan(cfg: SequenceConfig, n_dr_values: Sequence[float]) -> dict:
    """Same-sign probing bias versus drive photon number, with a linear fit."""
    n_dr_values = np.asarray(n_dr_values, dtype=float)
    biases = []
    for n in n_dr_values:
        probe = replace(cfg.probe, n_dr=float(n))
        res = run_sequence(replace(cfg, probe=probe, probe_signs=(1, 1)))
        biases.append(res.summary["bias"])
    biases = np.array(biases)
    slope, intercept = np.polyfit(n_dr_values, biases, 1)
    fit = slope * n_dr_values + intercept
    ss_res = float(((biases - fit) ** 2).sum())
    ss_tot = float(((biases - biases.mean()) ** 2).sum())
    return {
        "n_dr": n_dr_values.tolist(),
        "bias": biases.tolist(),
        "slope": float(slope),
        "intercept": float(intercept),
        "r_squared": 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"),
    }


def precision_scan(cfg: SequenceConfig, n_list: Sequence[int], scale_d_with_n: bool = True) -> dict:
    """Measured clock precision versus atom number and its log-log slope.

    With ``scale_d_with_n`` the optical depth grows in proportion to N, as it
    does for a fixed beam geometry.
    """
    rows = []
    for n in n_list:
        sub = replace(cfg, n_atoms=int(n))
        if scale_d_with_n and cfg.mode == "qnd":
            if cfg.cavity is not None:
                sub = replace(sub, cavity=replace(cfg.cavity, d=cfg.cavity.d * n / cfg.n_atoms))
        res = run_sequence(sub)
        s = res.summary
        rows.append({
            "n_atoms": int(n),
            "precision_measured": s["std"],
            "precision_predicted": s["precision_predicted"],
            "qpn_reference": 1.0 / math.sqrt(n),
            "heisenberg_reference": 1.0 / n,
            "xi_predicted": s["xi_predicted"],
        })
    ns = np.log([r["n_atoms"] for r in rows])
    slope = float(np.polyfit(ns, np.log([r["precision_measured"] for r in rows]), 1)[0])
    slope_pred = float(np.polyfit(ns, np.log([r["precision_predicted"] for r in rows]), 1)[0])
    return {"rows": rows, "slope": slope, "slope_predicted": slope_pred}
