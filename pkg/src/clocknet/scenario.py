"""Scenario files: parsing, validation, presets and dispatch.

A scenario is a TOML document::

    mode = "chain"            # squeeze | cavity | chain | sequence | epr | protocol
    seed = 1
    name = "my-run"           # optional, used for output file names

    [params]                  # mode-specific, see MODE_PARAMS
    m = 4
    transmission = 0.5

    [probe]                   # optional hardware overrides
    [cavity]
    [sweep]                   # param + values, or param + start/stop/steps
    [tolerances]
    [output]                  # dir, format

Unknown keys anywhere are validation errors.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__, epr, network, optics, sequence
from .spin_core import apply_decoherence, min_detectable_angle, new_css, squeezing_parameter, to_db

SCHEMA_VERSION = 1
OUTPUT_ENV = "CLOCKNET_OUT"
MODES = ("squeeze", "cavity", "chain", "sequence", "epr", "protocol")


class ScenarioError(Exception):
    exit_code = 4


class ScenarioParseError(ScenarioError):
    exit_code = 2


class ScenarioValidationError(ScenarioError):
    exit_code = 3


class ScenarioRuntimeError(ScenarioError):
    exit_code = 4


# --- schema -----------------------------------------------------------------


@dataclass(frozen=True)
class Field:
    kind: type | tuple
    default: Any
    check: Callable[[Any], bool] | None = None
    hint: str = ""


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit_interval(x):
    return 0 < x <= 1


def _choice(*opts):
    return lambda x: x in opts


NUM = (int, float)

PROBE_FIELDS = {
    "n_dr": Field(NUM, 1.0e6, _nonneg, ">= 0"),
    "n_det": Field(NUM, 1.0e6, _nonneg, ">= 0"),
    "gamma": Field(NUM, 7.0e3, _pos, "> 0 (Hz)"),
    "delta": Field(NUM, 6.0e6, lambda x: x != 0, "nonzero (Hz)"),
    "sigma_over_a": Field(NUM, 1.2e-5, _pos, "> 0"),
}

CAVITY_FIELDS = {
    "finesse": Field(NUM, None, lambda x: x > 1, "> 1; sets symmetric mirrors"),
    "t1": Field(NUM, None, lambda x: 0 < x < 1, "in (0, 1)"),
    "t2": Field(NUM, None, lambda x: 0 < x < 1, "in (0, 1)"),
    "loss": Field(NUM, 0.0, _nonneg, ">= 0"),
    "length": Field(NUM, 0.05, _pos, "> 0 (m)"),
    "big_gamma": Field(NUM, 29.0e3, _pos, "> 0 (Hz)"),
    "omega_single": Field(NUM, 16.0e3, _pos, "> 0 (Hz)"),
    "d": Field(NUM, 0.012, _pos, "> 0"),
}

TOLERANCE_FIELDS = {
    "hp_ratio": Field(NUM, 0.1, _pos, "> 0"),
    "cooperativity_rtol": Field(NUM, 0.05, _pos, "> 0"),
    "precision_flag_rtol": Field(NUM, 0.1, _pos, "> 0"),
    "optimizer_tol": Field(NUM, 1e-10, _pos, "> 0"),
    "mc_sigma": Field(NUM, 3.0, _pos, "> 0"),
    "lyapunov_rtol": Field(NUM, 1e-10, _pos, "> 0"),
}

OUTPUT_FIELDS = {
    "dir": Field(str, None),
    "format": Field(str, "both", _choice("csv", "json", "both"), "csv, json or both"),
}

SWEEP_FIELDS = {
    "param": Field(str, None),
    "values": Field(list, None),
    "start": Field(NUM, None),
    "stop": Field(NUM, None),
    "steps": Field(int, None, _pos, ">= 1"),
    "scale": Field(str, "linear", _choice("linear", "log"), "linear or log"),
}

_CONVENTIONS = tuple(c.value for c in network.TransmissionConvention)

MODE_PARAMS: dict[str, dict[str, Field]] = {
    "squeeze": {
        "n_atoms": Field(int, 1000, _pos, ">= 1"),
        "d": Field(NUM, 1000.0, _pos, "> 0"),
        "eta": Field(NUM, 0.5, _nonneg, ">= 0"),
        "inject_noise": Field(bool, False),
    },
    "cavity": {
        "n_atoms": Field(int, 1000, _pos, ">= 1"),
        "omega_collective": Field(NUM, None, _pos, "> 0 (Hz)"),
    },
    "chain": {
        "m": Field(int, 4, _pos, ">= 1"),
        "transmission": Field(NUM, 0.5, _unit_interval, "in (0, 1]"),
        "convention": Field(str, "total_over_M", _choice(*_CONVENTIONS), " | ".join(_CONVENTIONS)),
        "n_atoms": Field(int, 1000, _pos, ">= 1"),
        "d": Field(NUM, 0.012, _pos, "> 0"),
        "f_last": Field(NUM, 1.0e5, _pos, "> 0"),
        "optimize": Field(bool, False),
        "free": Field(list, ["eta"], lambda v: bool(v) and set(v) <= {"eta", "finesse"}, "subset of [eta, finesse]"),
    },
    "sequence": {
        "n_atoms": Field(int, 1000, _pos, ">= 1"),
        "shots": Field(int, 20000, _pos, ">= 1"),
        "precession_angle": Field(NUM, 0.0),
        "pulse_error_rms": Field(NUM, 0.0, _nonneg, ">= 0"),
        "swap_error_rms": Field(NUM, 0.0, _nonneg, ">= 0"),
        "atom_number_jitter_rms": Field(NUM, 0.0, _nonneg, ">= 0"),
        "clock_mode": Field(str, "qnd", _choice("qnd", "css"), "qnd or css"),
        "kappa": Field(NUM, None, _nonneg, ">= 0"),
        "eta": Field(NUM, 0.5, _nonneg, ">= 0"),
        "kappa_model": Field(str, "substituted", _choice("substituted", "literal"), "substituted or literal"),
        "stark_coeff": Field(NUM, 0.0),
        "probe_signs": Field(list, [1, -1], lambda v: len(v) == 2 and all(s in (1, -1) for s in v), "two of +1/-1"),
        "detector_noise_rms": Field(NUM, 0.0, _nonneg, ">= 0"),
        "use_cavity": Field(bool, True),
        "scale_d_with_n": Field(bool, True),
    },
    "epr": {
        "mu": Field(NUM, 1.0 / 3.0, _nonneg, ">= 0"),
        "nu": Field(NUM, 1.0, _nonneg, ">= 0"),
        "mu1": Field(NUM, None, _nonneg, ">= 0"),
        "mu2": Field(NUM, None, _nonneg, ">= 0"),
        "nu1": Field(NUM, None, _nonneg, ">= 0"),
        "nu2": Field(NUM, None, _nonneg, ">= 0"),
        "extra_loss": Field(NUM, 0.0, _nonneg, ">= 0"),
        "j_len": Field(NUM, 1.0, _pos, "> 0"),
        "relax_time": Field(NUM, None, _pos, "> 0; default 20 slowest decay times"),
        "dt": Field(NUM, 0.02, _pos, "> 0"),
    },
    "protocol": {
        "mu": Field(NUM, 1.0 / 3.0, _nonneg, ">= 0"),
        "nu": Field(NUM, 1.0, _nonneg, ">= 0"),
        "extra_loss": Field(NUM, 0.0, _nonneg, ">= 0"),
        "j_len": Field(NUM, 1.0, _pos, "> 0"),
        "rounds": Field(int, 2000, lambda x: x >= 2 * epr.MIN_SIFTED, f">= {2 * epr.MIN_SIFTED}"),
        "eavesdropper": Field(str, "none", _choice("none", "heterodyne", "homodyne"), "none, heterodyne or homodyne"),
        "eve_fraction": Field(NUM, 1.0, lambda x: 0 <= x <= 1, "in [0, 1]"),
        "alpha": Field(NUM, 0.01, lambda x: 0 < x < 1, "in (0, 1)"),
        "trials": Field(int, 0, _nonneg, ">= 0"),
    },
}

SWEEPABLE = {
    "squeeze": ("eta", "d", "n_atoms"),
    "cavity": ("n_atoms", "finesse", "d"),
    "chain": ("m", "transmission", "f_last", "n_atoms"),
    "sequence": ("n_atoms",),
    "epr": ("ratio", "mu", "extra_loss"),
    "protocol": ("ratio", "mu"),
}

UNITS = {
    "precession_angle": "rad", "min_detectable_angle": "rad", "precision_exact": "rad",
    "precision_asymptotic": "rad", "precision_asymptotic_printed": "rad", "mean": "rad", "std": "rad", "std_error_of_mean": "rad",
    "std_error_of_std": "rad", "bias": "rad", "precision_predicted": "rad", "stark_offset": "rad",
    "precision_measured": "rad", "qpn_reference": "rad", "heisenberg_reference": "rad",
    "estimator": "rad", "shot_noise_rms": "rad",
    "omega_collective": "Hz", "omega_from_single_atom": "Hz", "big_gamma": "Hz", "gamma": "Hz",
    "geometric_linewidth": "Hz", "xi_db": "dB", "xi_min_db": "dB",
    "chi2_statistic": "dimensionless",
}


def _unit(name: str) -> str:
    return UNITS.get(name, "dimensionless")


def _check_section(section: str, data: dict, fields: dict[str, Field]) -> dict:
    if not isinstance(data, dict):
        raise ScenarioValidationError(f"[{section}] must be a table")
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ScenarioValidationError(f"unknown key `{section}.{unknown[0]}`" + (f" (allowed: {', '.join(fields)})"))
    out = {}
    for key, spec in fields.items():
        if key not in data:
            out[key] = spec.default
            continue
        val = data[key]
        kinds = spec.kind if isinstance(spec.kind, tuple) else (spec.kind,)
        if isinstance(val, bool) and bool not in kinds:
            raise ScenarioValidationError(f"`{key}` in [{section}] must be a number, got a boolean")
        if not isinstance(val, kinds):
            raise ScenarioValidationError(
                f"`{key}` in [{section}] has type {type(val).__name__}, expected {'/'.join(k.__name__ for k in kinds)}")
        if float in kinds and isinstance(val, int):
            val = float(val)
        if isinstance(val, float) and not math.isfinite(val):
            raise ScenarioValidationError(f"`{key}` in [{section}] must be finite")
        if spec.check is not None and not spec.check(val):
            raise ScenarioValidationError(f"`{key}` in [{section}] = {val!r} is invalid: must be {spec.hint}")
        out[key] = val
    return out


@dataclass
class ScenarioConfig:
    mode: str
    seed: int = 0
    name: str | None = None
    params: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    cavity: dict = field(default_factory=dict)
    sweep: dict | None = None
    tolerances: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Normalized form: defaults filled in, ``None`` entries dropped."""
        def clean(d):
            return {k: v for k, v in d.items() if v is not None}

        out = {"mode": self.mode, "seed": self.seed}
        if self.name is not None:
            out["name"] = self.name
        for key in ("params", "probe", "cavity", "tolerances", "output"):
            sec = clean(getattr(self, key))
            if sec:
                out[key] = sec
        if self.sweep:
            out["sweep"] = clean(self.sweep)
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @property
    def scenario_hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    def sweep_values(self) -> list | None:
        if not self.sweep:
            return None
        sw = self.sweep
        if sw.get("values") is not None:
            return list(sw["values"])
        if sw["scale"] == "log":
            vals = np.geomspace(sw["start"], sw["stop"], sw["steps"])
        else:
            vals = np.linspace(sw["start"], sw["stop"], sw["steps"])
        field_ = MODE_PARAMS[self.mode].get(sw["param"])
        if field_ is not None and field_.kind is int:
            return [int(round(v)) for v in vals]
        return [float(v) for v in vals]

    def make_probe(self) -> optics.ProbePulse:
        return optics.ProbePulse(**self.probe)

    def make_cavity(self, **overrides) -> optics.CavityParams:
        c = {**self.cavity, **overrides}
        finesse = c.pop("finesse", None)
        t1, t2 = c.pop("t1", None), c.pop("t2", None)
        if t1 is None and t2 is None:
            return optics.CavityParams.symmetric(finesse or 1.0e5, **c)
        if t1 is None or t2 is None:
            raise ScenarioValidationError("give both `cavity.t1` and `cavity.t2`, or `cavity.finesse`")
        return optics.CavityParams(t1=t1, t2=t2, **c)


def validate(raw: dict) -> ScenarioConfig:
    """Check a parsed scenario table and apply defaults."""
    allowed = {"mode", "seed", "name", "params", "probe", "cavity", "sweep", "tolerances", "output"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ScenarioValidationError(f"unknown key `{unknown[0]}`")
    mode = raw.get("mode")
    if mode is None:
        raise ScenarioValidationError("missing required key `mode`")
    if mode not in MODES:
        raise ScenarioValidationError(f"`mode` = {mode!r} is invalid: must be one of {', '.join(MODES)}")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ScenarioValidationError("`seed` must be a nonnegative integer")
    name = raw.get("name")
    if name is not None and not isinstance(name, str):
        raise ScenarioValidationError("`name` must be a string")

    cfg = ScenarioConfig(
        mode=mode,
        seed=seed,
        name=name,
        params=_check_section("params", raw.get("params", {}), MODE_PARAMS[mode]),
        probe=_check_section("probe", raw.get("probe", {}), PROBE_FIELDS),
        cavity=_check_section("cavity", raw.get("cavity", {}), CAVITY_FIELDS),
        tolerances=_check_section("tolerances", raw.get("tolerances", {}), TOLERANCE_FIELDS),
        output=_check_section("output", raw.get("output", {}), OUTPUT_FIELDS),
    )
    if "sweep" in raw:
        sw = _check_section("sweep", raw["sweep"], SWEEP_FIELDS)
        if sw["param"] is None:
            raise ScenarioValidationError("`sweep.param` is required")
        if sw["param"] not in SWEEPABLE[mode]:
            raise ScenarioValidationError(
                f"`sweep.param` = {sw['param']!r} is not sweepable in {mode} mode ({', '.join(SWEEPABLE[mode])})")
        if sw["values"] is not None:
            if not sw["values"]:
                raise ScenarioValidationError("`sweep.values` must be nonempty")
            if any(isinstance(v, bool) or not isinstance(v, NUM) for v in sw["values"]):
                raise ScenarioValidationError("`sweep.values` must be numbers")
        elif None in (sw["start"], sw["stop"], sw["steps"]):
            raise ScenarioValidationError("`sweep` needs `values` or all of `start`, `stop`, `steps`")
        elif sw["scale"] == "log" and min(sw["start"], sw["stop"]) <= 0:
            raise ScenarioValidationError("log sweeps need positive `start` and `stop`")
        cfg.sweep = sw

    # build the hardware records once so bad combinations fail at validation time
    try:
        cfg.make_probe()
        cfg.make_cavity()
    except ScenarioValidationError:
        raise
    except ValueError as exc:
        raise ScenarioValidationError(str(exc)) from exc
    return cfg


def parse_text(text: str) -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # message already carries "(at line L, column C)"
        raise ScenarioParseError(f"parse error: {exc}") from exc
    return validate(raw)


def parse_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario file, or a preset given as ``preset:<name>``."""
    path = str(path)
    if path.startswith("preset:"):
        return load_preset(path.split(":", 1)[1])
    p = Path(path)
    if not p.exists():
        if path in PRESETS:
            return load_preset(path)
        raise ScenarioParseError(f"scenario file not found: {path}")
    cfg = parse_text(p.read_text(encoding="utf-8"))
    if cfg.name is None:
        cfg.name = p.stem
    return cfg


# --- presets ----------------------------------------------------------------

PRESETS: dict[str, str] = {
    "paper-chain-4": """
mode = "chain"
name = "paper-chain-4"
[params]
m = 4
transmission = 0.5
convention = "total_over_M"
""",
    "paper-chain-8": """
mode = "chain"
name = "paper-chain-8"
[params]
m = 8
transmission = 0.5
convention = "total_over_M"
""",
    "paper-chain-sweep": """
mode = "chain"
name = "paper-chain-sweep"
[params]
transmission = 0.5
[sweep]
param = "m"
values = [1, 2, 3, 4, 5, 6, 7, 8]
""",
    "paper-cavity-sr": """
mode = "cavity"
name = "paper-cavity-sr"
[params]
n_atoms = 1000
omega_collective = 500e3
[probe]
gamma = 7e3
[cavity]
finesse = 1e5
length = 0.05
big_gamma = 29e3
omega_single = 16e3
d = 0.012
""",
    "paper-free-space": """
mode = "squeeze"
name = "paper-free-space"
[params]
n_atoms = 1000
d = 1000.0
[sweep]
param = "eta"
start = 0.01
stop = 2.0
steps = 200
""",
    "paper-sequence": """
mode = "sequence"
name = "paper-sequence"
seed = 7
[params]
n_atoms = 1000
shots = 20000
""",
    "paper-epr": """
mode = "epr"
name = "paper-epr"
[params]
j_len = 500.0
[sweep]
param = "ratio"
values = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
""",
    "paper-protocol": """
mode = "protocol"
name = "paper-protocol"
seed = 11
[params]
rounds = 2000
eavesdropper = "heterodyne"
""",
}


def load_preset(name: str) -> ScenarioConfig:
    try:
        text = PRESETS[name]
    except KeyError:
        raise ScenarioParseError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None
    return parse_text(text)


# --- runners ----------------------------------------------------------------


def _rates(p: dict, ratio: float | None = None) -> epr.CouplingRates:
    mu, nu = p["mu"], p["nu"]
    if ratio is not None:
        mu = ratio * nu
    return epr.CouplingRates(
        p.get("mu1") if p.get("mu1") is not None else mu,
        p.get("mu2") if p.get("mu2") is not None else mu,
        p.get("nu1") if p.get("nu1") is not None else nu,
        p.get("nu2") if p.get("nu2") is not None else nu,
        p["extra_loss"],
    )


def _squeeze_point(cfg: ScenarioConfig, p: dict) -> dict:
    kappa = optics.kappa_free(p["d"], p["eta"])
    state, _ = optics.qnd_update(new_css(p["n_atoms"]), kappa, 0.0)
    state = apply_decoherence(state, p["eta"], inject_noise=p["inject_noise"])
    xi = squeezing_parameter(state)
    return {
        "n_atoms": p["n_atoms"], "d": p["d"], "eta": p["eta"], "kappa": kappa, "xi": xi,
        "xi_closed_form": optics.xi_qnd(kappa, p["eta"]), "xi_db": to_db(xi),
        "min_detectable_angle": min_detectable_angle(state),
    }


def _run_squeeze(cfg: ScenarioConfig):
    p = cfg.params
    rows = [_squeeze_point(cfg, {**p, cfg.sweep["param"]: v}) for v in cfg.sweep_values()] if cfg.sweep else [_squeeze_point(cfg, p)]
    eta_opt, xi_opt = optics.optimal_eta_scan(p["d"])
    summary = dict(_squeeze_point(cfg, p))
    summary.update(eta_optimal_scan=eta_opt, xi_min_scan=xi_opt, xi_min_2e_over_d=optics.xi_min_free(p["d"]),
                   xi_min_db=to_db(xi_opt))
    return rows, summary


def _cavity_point(cfg: ScenarioConfig, n_atoms: int, cav: optics.CavityParams) -> dict:
    probe = cfg.make_probe()
    tol = cfg.tolerances
    omega = cfg.params["omega_collective"] or optics.collective_rabi(cav.omega_single, n_atoms)
    coop = optics.cooperativity_check(cav, omega, probe.gamma, tol["cooperativity_rtol"])
    f = cav.finesse
    eta_n_opt = math.pi / (2.0 * f)
    k_sub = optics.kappa_cavity_substituted(cav.d, f, 0.5)
    k_lit = optics.kappa_cavity(cav.d, f, eta_n_opt)
    xi_min = optics.xi_min_cavity(cav.d, f)
    sigma_over_a = cav.d / n_atoms
    d_delta = optics.probe_absorption(cav.d, probe.gamma, probe.delta)
    t_exact, t_first = optics.cavity_transmission(cav, d_delta)
    return {
        "n_atoms": n_atoms, "finesse": f, "d": cav.d, "d_times_f": coop.d_times_f,
        "cooperativity": coop.cooperativity, "cooperativity_rel_diff": coop.rel_diff,
        "cooperativity_consistent": coop.consistent, "omega_collective": omega,
        "omega_from_single_atom": optics.collective_rabi(cav.omega_single, n_atoms),
        "xi_min": xi_min, "xi_min_db": to_db(xi_min),
        "xi_min_from_cooperativity": optics.xi_min_cavity(coop.cooperativity / f, f),
        "kappa_cav_substituted": k_sub, "xi_substituted": optics.xi_qnd(k_sub, 0.5),
        "kappa_cav_literal": k_lit, "xi_literal": optics.xi_qnd(k_lit, 0.5),
        "eta_n_optimal": eta_n_opt, "sigma_f_over_a": sigma_over_a * f,
        "hp_valid": optics.hp_validity(sigma_over_a, f),
        "min_detectable_angle": math.sqrt(xi_min / n_atoms),
        "d_delta": d_delta,
        "d_delta_free_optimum": optics.d_delta_at_optimum(n_atoms, probe.n_det) if probe.n_det > 0 else float("inf"),
        "transmission_exact": t_exact, "transmission_first_order": t_first,
        "geometric_linewidth": cav.geometric_linewidth,
    }


def _run_cavity(cfg: ScenarioConfig):
    n = cfg.params["n_atoms"]
    base = _cavity_point(cfg, n, cfg.make_cavity())
    if not cfg.sweep:
        return [base], dict(base)
    rows = []
    for v in cfg.sweep_values():
        par = cfg.sweep["param"]
        if par == "n_atoms":
            rows.append(_cavity_point(cfg, int(v), cfg.make_cavity()))
        elif par == "finesse":
            rows.append(_cavity_point(cfg, n, cfg.make_cavity(finesse=v, t1=None, t2=None)))
        else:
            rows.append(_cavity_point(cfg, n, cfg.make_cavity(d=v)))
    return rows, dict(base)


def _chain_summary(cfg: ScenarioConfig, p: dict) -> tuple[dict, network.ChainConfig]:
    conv = network.TransmissionConvention(p["convention"])
    m, t = p["m"], p["transmission"]
    r = network.per_hop_r(m, t, conv)
    chain = network.uniform_chain(m, r, p["n_atoms"], p["d"], p["f_last"], convention=conv)
    single = network.uniform_chain(1, 0.0, p["n_atoms"], p["d"], p["f_last"])
    prec = network.chain_precision(m, r, p["d"], p["n_atoms"], p["f_last"], cfg.tolerances["precision_flag_rtol"])
    out = {
        "m": m, "transmission": t, "r_per_hop": r,
        "improvement": network.chain_improvement(m, t, conv),
        "improvement_total_over_M": network.chain_improvement(m, t, "total_over_M"),
        "improvement_total_over_M_minus_1": network.chain_improvement(m, t, "total_over_M_minus_1"),
        "snr": network.chain_snr(chain), "snr_single_clock": network.chain_snr(single),
        "snr_ratio": network.chain_snr(chain) / network.chain_snr(single),
        "precision_exact": prec.exact, "precision_asymptotic": prec.asymptotic,
        "precision_asymptotic_printed": prec.asymptotic_printed,
        "asymptotic_flagged": prec.flagged,
    }
    return out, chain


def _run_chain(cfg: ScenarioConfig):
    p = cfg.params
    summary, chain = _chain_summary(cfg, p)
    if p["optimize"]:
        res = network.optimize_chain(chain, p["free"], network.OptimizeConstraints(tol=cfg.tolerances["optimizer_tol"]))
        chain = res.config
        summary.update(optimized_snr=res.snr, optimizer_converged=res.converged, optimizer_sweeps=res.sweeps)
    if cfg.sweep:
        rows = [_chain_summary(cfg, {**p, cfg.sweep["param"]: v})[0] for v in cfg.sweep_values()]
    else:
        rows = network.chain_table(chain)
    return rows, summary


def _sequence_config(cfg: ScenarioConfig, p: dict) -> sequence.SequenceConfig:
    return sequence.SequenceConfig(
        n_atoms=p["n_atoms"], probe=cfg.make_probe(), cavity=cfg.make_cavity() if p["use_cavity"] else None,
        precession_angle=p["precession_angle"], pulse_error_rms=p["pulse_error_rms"],
        swap_error_rms=p["swap_error_rms"],
        atom_number_jitter_rms=p["atom_number_jitter_rms"], shots=p["shots"], seed=cfg.seed,
        mode=p["clock_mode"], kappa=p["kappa"], eta=p["eta"], kappa_model=p["kappa_model"],
        stark_coeff=p["stark_coeff"], probe_signs=tuple(p["probe_signs"]),
        detector_noise_rms=p["detector_noise_rms"],
    )


def _run_sequence(cfg: ScenarioConfig):
    p = cfg.params
    scfg = _sequence_config(cfg, p)
    if cfg.sweep:
        scan = sequence.precision_scan(scfg, cfg.sweep_values(), p["scale_d_with_n"])
        return scan["rows"], {"slope": scan["slope"], "slope_predicted": scan["slope_predicted"]}
    res = sequence.run_sequence(scfg)
    return res.rows(), dict(res.summary)


def _epr_point(cfg: ScenarioConfig, p: dict, ratio=None) -> dict:
    rates = _rates(p, ratio)
    st = epr.steady_state(rates, p["j_len"])
    a, dmat = epr.drift_diffusion(rates)
    value, ent = epr.epr_criterion(st)
    t_relax = p["relax_time"] or 20.0 * epr.relaxation_time(rates)
    relaxed = epr.relax(epr.vacuum(p["j_len"]), rates, t_relax, p["dt"])
    return {
        "ratio": rates.mu1 / rates.nu1 if rates.nu1 else float("nan"),
        "mu": rates.mu1, "nu": rates.nu1, "extra_loss": rates.extra_loss,
        "criterion": value, "criterion_over_2j": value / (2 * p["j_len"]),
        "criterion_closed_form": epr.criterion_closed_form(rates.mu1, rates.nu1, p["j_len"]),
        "entangled": ent,
        "single_party_variance": epr.single_party_variance(st, 1),
        "lyapunov_residual": epr.lyapunov_residual(a, dmat, st.cov4),
        "ode_distance": float(np.linalg.norm(relaxed.cov4 - st.cov4)),
    }


def _run_epr(cfg: ScenarioConfig):
    p = cfg.params
    summary = _epr_point(cfg, p)
    if not cfg.sweep:
        return [summary], dict(summary)
    par = cfg.sweep["param"]
    rows = []
    for v in cfg.sweep_values():
        rows.append(_epr_point(cfg, p, ratio=v) if par == "ratio" else _epr_point(cfg, {**p, par: v}))
    return rows, summary


def _run_protocol(cfg: ScenarioConfig):
    p = cfg.params
    st = epr.steady_state(_rates(p), p["j_len"])
    eve = None if p["eavesdropper"] == "none" else epr.Eavesdropper(p["eavesdropper"], p["eve_fraction"])
    tr = epr.secret_time_protocol(st, p["rounds"], eve, cfg.seed, p["alpha"])
    summary = dict(tr.summary)
    summary["criterion_over_2j"] = epr.epr_criterion(st)[0] / (2 * p["j_len"])
    if p["trials"]:
        clean = epr.detection_rate(st, p["rounds"], p["trials"], None, cfg.seed + 1, p["alpha"])
        summary["false_alarm_rate"] = clean["flag_rate"]
        if eve is not None:
            attacked = epr.detection_rate(st, p["rounds"], p["trials"], eve, cfg.seed + 2, p["alpha"])
            summary["detection_rate"] = attacked["flag_rate"]
    return tr.rounds(), summary, tr


RUNNERS = {
    "squeeze": _run_squeeze, "cavity": _run_cavity, "chain": _run_chain,
    "sequence": _run_sequence, "epr": _run_epr, "protocol": _run_protocol,
}


# --- results ----------------------------------------------------------------


@dataclass
class ResultRecord:
    schema_version: int
    scenario_hash: str
    version: str
    timestamp: str
    mode: str
    seed: int
    outputs: dict
    series: list[dict]
    series_units: dict
    files: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        body = dataclasses.asdict(self)
        body.pop("series")
        return json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n"

    def value(self, name: str):
        return self.outputs[name]["value"]


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def format_value(v) -> str:
    """Locale-independent text that parses back to the same double."""
    v = _plain(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def series_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    cols = list(rows[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([format_value(r[c]) for c in cols])
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run(cfg: ScenarioConfig, out_dir=None, fmt: str | None = None, write: bool = True) -> ResultRecord:
    """Execute a validated scenario and optionally persist its outputs."""
    try:
        out = RUNNERS[cfg.mode](cfg)
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioRuntimeError(f"{cfg.mode} scenario {cfg.name or '<unnamed>'!r} failed: {exc}") from exc
    rows, summary = out[0], out[1]
    outputs = {k: {"value": _plain(v), "unit": _unit(k)} for k, v in summary.items()}
    cols = list(rows[0]) if rows else []
    record = ResultRecord(
        schema_version=SCHEMA_VERSION,
        scenario_hash=cfg.scenario_hash,
        version=f"v{__version__}",
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        mode=cfg.mode,
        seed=cfg.seed,
        outputs=outputs,
        series=rows,
        series_units={c: _unit(c) for c in cols},
    )
    if write:
        fmt = fmt or cfg.output.get("format") or "both"
        base = Path(out_dir or cfg.output.get("dir") or os.environ.get(OUTPUT_ENV) or "results")
        stem = cfg.name or cfg.mode
        if fmt in ("csv", "both") and rows:
            path = base / f"{stem}.csv"
            write_atomic(path, series_to_csv(rows))
            record.files.append(str(path))
        if cfg.mode == "protocol":
            path = base / f"{stem}.jsonl"
            write_atomic(path, out[2].to_jsonl())
            record.files.append(str(path))
        if fmt in ("json", "both"):
            path = base / f"{stem}.json"
            record.files.append(str(path))
            write_atomic(path, record.to_json())
    return record
