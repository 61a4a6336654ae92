"""Chains of cavity clocks read out by one cascaded QND probe.

Clock ``i`` (1-based, 1 farthest from the detector) contributes a signal
``sqrt(4 d N F_i eta_i e^{-2 eta_i} e^{-r_i} / pi)`` to the collective S/N,
where ``e^{-r_i}`` is the channel transmission from clock ``i`` to the
detector. The noise is the shot noise of the one detected beam, so the
contributions add linearly.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .optics import hp_validity

INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class TransmissionConvention(str, enum.Enum):
    """How a total channel transmission ``t`` is split into per-hop exponents.

    ``total_over_M`` (``r = |ln t| / M``) reproduces the published 4- and
    8-clock numbers; ``total_over_M_minus_1`` (``r = |ln t| / (M-1)``)
    follows the written definition ``t = e^{-(M-1) r}``; ``per_hop_exponent``
    treats ``t`` as the transmission of a single hop.
    """

    PER_HOP = "per_hop_exponent"
    TOTAL_OVER_M = "total_over_M"
    TOTAL_OVER_M_MINUS_1 = "total_over_M_minus_1"


def per_hop_r(m: int, t: float, convention=TransmissionConvention.TOTAL_OVER_M) -> float:
    """Per-hop attenuation exponent for ``m`` clocks and transmission ``t``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 < t <= 1.0:
        raise ValueError(f"transmission must lie in (0, 1], got {t}")
    convention = TransmissionConvention(convention)
    loss = abs(math.log(t))
    if convention is TransmissionConvention.PER_HOP:
        return loss
    if convention is TransmissionConvention.TOTAL_OVER_M:
        return loss / m
    return loss / (m - 1) if m > 1 else 0.0


@dataclass(frozen=True)
class ChainClock:
    n_atoms: int
    d: float
    finesse: float
    eta: float = 0.5

    def __post_init__(self):
        if self.n_atoms < 1 or self.d <= 0 or self.finesse <= 0 or self.eta <= 0:
            raise ValueError(f"chain clock parameters must be positive: {self}")
        if not hp_validity(self.d / self.n_atoms, self.finesse):
            warnings.warn(f"clock with F={self.finesse:.3g} violates sigma*F/A < 2*pi*e", stacklevel=3)


@dataclass(frozen=True)
class ChannelSegment:
    r: float = 0.0

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("attenuation exponent r must be >= 0")


@dataclass(frozen=True)
class ChainConfig:
    """Clocks ordered from farthest (index 0 here, clock 1) to nearest the detector.

    ``segments[i]`` is the channel after clock ``i`` towards the detector.
    """

    clocks: tuple[ChainClock, ...]
    segments: tuple[ChannelSegment, ...]
    convention: TransmissionConvention = TransmissionConvention.TOTAL_OVER_M

    def __post_init__(self):
        object.__setattr__(self, "clocks", tuple(self.clocks))
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "convention", TransmissionConvention(self.convention))
        if not self.clocks:
            raise ValueError("a chain needs at least one clock")
        if len(self.segments) != len(self.clocks):
            raise ValueError("need exactly one channel segment per clock")

    @property
    def m(self) -> int:
        return len(self.clocks)

    @property
    def attenuation(self) -> np.ndarray:
        """Accumulated exponent r_i from each clock to the detector."""
        r = np.array([seg.r for seg in self.segments])
        return np.cumsum(r[::-1])[::-1]

    @property
    def finesses(self) -> np.ndarray:
        return np.array([c.finesse for c in self.clocks])

    @property
    def etas(self) -> np.ndarray:
        return np.array([c.eta for c in self.clocks])

    def with_params(self, finesses=None, etas=None) -> "ChainConfig":
        fs = self.finesses if finesses is None else finesses
        es = self.etas if etas is None else etas
        clocks = tuple(replace(c, finesse=float(f), eta=float(e)) for c, f, e in zip(self.clocks, fs, es))
        return replace(self, clocks=clocks)


def uniform_chain(m: int, r: float, n_atoms: int, d: float, f_last: float, eta: float = 0.5,
                  allocate: bool = True, convention=TransmissionConvention.TOTAL_OVER_M) -> ChainConfig:
    """Identical clocks with equal per-hop exponent ``r``.

    With ``allocate`` the finesses follow :func:`allocate_finesse`, otherwise
    every clock has ``f_last``.
    """
    segs = tuple(ChannelSegment(r if i < m - 1 else 0.0) for i in range(m))
    clocks = tuple(ChainClock(n_atoms, d, f_last, eta) for _ in range(m))
    cfg = ChainConfig(clocks, segs, convention)
    if allocate:
        cfg = cfg.with_params(finesses=allocate_finesse(f_last, cfg))
    return cfg


def chain_terms(cfg: ChainConfig) -> np.ndarray:
    """Per-clock contributions to the collective S/N."""
    r = cfg.attenuation
    out = np.empty(cfg.m)
    for i, (c, ri) in enumerate(zip(cfg.clocks, r)):
        out[i] = math.sqrt(4.0 * c.d * c.n_atoms * c.finesse * c.eta * math.exp(-2.0 * c.eta - ri) / math.pi)
    return out


def chain_snr(cfg: ChainConfig) -> float:
    return float(chain_terms(cfg).sum())


def chain_table(cfg: ChainConfig) -> list[dict]:
    """Rows (i, r_i, F_i, eta_i, term) for CSV export, i counted from 1."""
    terms = chain_terms(cfg)
    return [
        {"i": i + 1, "r_i": float(r), "finesse": c.finesse, "eta": c.eta, "snr_term": float(t)}
        for i, (c, r, t) in enumerate(zip(cfg.clocks, cfg.attenuation, terms))
    ]


def allocate_finesse(f_last: float, cfg: ChainConfig) -> np.ndarray:
    """Finesse profile ``F_i = F_M e^{(i-M) r}`` for a uniform-hop chain.

    This profile keeps every ``eta_i = n e^{r_i} (gamma/Delta)^2 (sigma/A) F_i / pi``
    equal for a common detected photon number ``n``.
    """
    if f_last <= 0:
        raise ValueError("f_last must be > 0")
    hops = np.array([seg.r for seg in cfg.segments[:-1]])
    if hops.size and not np.allclose(hops, hops[0], rtol=1e-12, atol=0):
        raise ValueError("allocate_finesse requires equal per-hop attenuation")
    r = hops[0] if hops.size else 0.0
    i = np.arange(1, cfg.m + 1)
    return f_last * np.exp((i - cfg.m) * r)


def eta_from_photons(n_photons: float, r_i, scatter_per_photon: float, finesse) -> np.ndarray:
    """``eta_i = n e^{r_i} (gamma/Delta)^2 (sigma/A) F_i / pi``."""
    return n_photons * np.exp(r_i) * scatter_per_photon * np.asarray(finesse) / math.pi


def chain_improvement(m: int, total_transmission: float, convention=TransmissionConvention.TOTAL_OVER_M) -> float:
    """Precision gain of an optimally allocated chain over one clock at F_M.

    ``sum_{k=0}^{M-1} e^{-k r}`` with ``r`` set by ``convention``.
    """
    if total_transmission <= 0:
        raise ValueError("total transmission must be > 0")
    r = per_hop_r(m, total_transmission, convention)
    return float(np.exp(-r * np.arange(m)).sum())


@dataclass(frozen=True)
class ChainPrecision:
    exact: float
    asymptotic: float
    rel_diff: float
    flagged: bool
    asymptotic_printed: float


def chain_precision(m: int, r: float, d: float, n_atoms: int, f_last: float, flag_rtol: float = 0.1) -> ChainPrecision:
    """Inverse collective S/N of a uniform chain at eta_i = 1/2.

    ``exact`` sums the chain terms with the allocated finesses. Each term is
    then ``sqrt(2 d N F_M / (pi e)) e^{-(M-i) r}``, so the dense-chain limit
    (``r << 1 << M r``) is ``asymptotic = r (2 d N F_M / (pi e))^{-1/2}``.
    ``asymptotic_printed`` keeps the commonly quoted prefactor
    ``(4 d N F_M / (pi e))^{-1/2}``, which is smaller by sqrt(2) and does not
    follow from the S/N sum.
    """
    cfg = uniform_chain(m, r, n_atoms, d, f_last, eta=0.5, allocate=True)
    exact = 1.0 / chain_snr(cfg)
    asym = r / math.sqrt(2.0 * d * n_atoms * f_last / (math.pi * math.e))
    rel = abs(asym - exact) / exact
    return ChainPrecision(exact, asym, rel, rel > flag_rtol, asym / math.sqrt(2.0))


@dataclass
class OptimizeConstraints:
    """Bounds for :func:`optimize_chain`.

    ``photon_scatter`` couples eta to finesse for a fixed detected photon
    number: ``eta_i = photon_scatter e^{r_i} F_i`` (``photon_scatter`` is
    ``n (gamma/Delta)^2 (sigma/A) / pi``). ``eta_budget`` caps every eta_i.
    """

    eta_bounds: tuple[float, float] = (1e-6, 2.0)
    finesse_bounds: tuple[float, float] = (1.0, 1e6)
    photon_scatter: float | None = None
    eta_budget: float | None = None
    tol: float = 1e-10
    max_sweeps: int = 200
    grid_points: int = 41


@dataclass
class OptimizeResult:
    config: ChainConfig
    snr: float
    converged: bool
    sweeps: int
    history: list[float] = field(default_factory=list)


def _line_search(f, lo: float, hi: float, grid_points: int, xtol: float) -> tuple[float, float]:
    """Maximize ``f`` on [lo, hi]: coarse grid bracket, then golden section."""
    xs = np.linspace(lo, hi, grid_points)
    vals = np.array([f(x) for x in xs])
    k = int(np.argmax(vals))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, grid_points - 1)]
    c = b - INV_GOLDEN * (b - a)
    e = a + INV_GOLDEN * (b - a)
    fc, fe = f(c), f(e)
    while b - a > xtol * max(1.0, abs(a) + abs(b)):
        if fc >= fe:
            b, e, fe = e, c, fc
            c = b - INV_GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + INV_GOLDEN * (b - a)
            fe = f(e)
    best = max([(vals[k], xs[k]), (fc, c), (fe, e), (f(a), a), (f(b), b)])
    return best[1], best[0]


def optimize_chain(cfg: ChainConfig, free_params: Sequence[str] = ("eta",),
                   constraints: OptimizeConstraints | None = None) -> OptimizeResult:
    """Maximize :func:`chain_snr` by coordinate ascent.

    ``free_params`` may contain ``"eta"`` and/or ``"finesse"``. When
    ``constraints.photon_scatter`` is set, eta is tied to finesse through a
    fixed detected photon number and only ``"finesse"`` may be free.
    Convergence is declared when one full sweep improves S/N by less than
    ``constraints.tol`` relative; otherwise the best configuration found is
    returned with ``converged=False`` and a warning.
    """
    con = constraints or OptimizeConstraints()
    free = set(free_params)
    if not free or not free <= {"eta", "finesse"}:
        raise ValueError("free_params must be a nonempty subset of {'eta', 'finesse'}")
    coupled = con.photon_scatter is not None
    if coupled and "eta" in free:
        raise ValueError("eta cannot be free when it is tied to finesse by a fixed photon number")

    r = cfg.attenuation
    fs = cfg.finesses.astype(float)
    es = cfg.etas.astype(float)
    eta_hi = con.eta_bounds[1] if con.eta_budget is None else min(con.eta_bounds[1], con.eta_budget)

    def coupled_eta(i, f):
        return con.photon_scatter * math.exp(r[i]) * f

    if coupled:
        es = np.array([coupled_eta(i, f) for i, f in enumerate(fs)])

    def snr(fs_, es_):
        return chain_snr(cfg.with_params(fs_, es_))

    def term(i, f, e):
        c = cfg.clocks[i]
        return math.sqrt(4.0 * c.d * c.n_atoms * f * e * math.exp(-2.0 * e - r[i]) / math.pi)

    prev = snr(fs, es)
    history = [prev]
    converged = False
    sweep = 0
    for sweep in range(1, con.max_sweeps + 1):
        for i in range(cfg.m):
            # the objective is separable, so each coordinate only moves its own term
            if "finesse" in free:
                f_lo, f_hi = con.finesse_bounds
                if coupled:
                    f_hi = min(f_hi, eta_hi / (con.photon_scatter * math.exp(r[i])))
                    f_lo = min(f_lo, f_hi)
                    fs[i], _ = _line_search(lambda f: term(i, f, coupled_eta(i, f)), f_lo, f_hi,
                                            con.grid_points, 1e-12)
                    es[i] = coupled_eta(i, fs[i])
                else:
                    fs[i], _ = _line_search(lambda f: term(i, f, es[i]), f_lo, f_hi, con.grid_points, 1e-12)
            if "eta" in free:
                es[i], _ = _line_search(lambda e: term(i, fs[i], e), con.eta_bounds[0], eta_hi,
                                        con.grid_points, 1e-12)
        new = snr(fs, es)
        history.append(new)
        # the start point may violate the eta budget, so compare successive sweeps
        if abs(new - prev) <= con.tol * abs(prev):
            converged = True
            break
        prev = new
    if not converged:
        warnings.warn(f"optimize_chain did not converge in {con.max_sweeps} sweeps", stacklevel=2)
    out = cfg.with_params(fs, es)
    return OptimizeResult(out, chain_snr(out), converged, sweep, history)
