"""Faults on the control, flag and memory qubits of the EF circuit.

Fault locations
---------------
Per control (or flag) qubit there are ``2T - 1`` places where a fault is
not trivially harmless: during each of the ``T`` apparatus calls (``mid``)
and in each of the ``T - 1`` gaps between consecutive branches (``post`` of
branch ``t < T-1``). A bit flip before the first or after the last
controlled SWAP only swaps which branch is labelled by which control value
and leaves the output unchanged, so those places are not enumerated. With
``T = 2`` this gives the three locations: during call 0, between the calls,
during call 1. Memory qubits get one location per apparatus call.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .engine import EfConfig, EfResult, FaultSpec, run_exact


@dataclass(frozen=True)
class AncillaNoiseParams:
    """Ancilla error rates.

    ``eps_bf`` and ``eps_pf`` are rates per unit time; one fault location
    lasts ``tau_U`` (the apparatus run time), so the per-location
    probabilities are ``tau_U * eps_bf`` and ``tau_U * eps_pf``.
    ``eps_prime`` overrides the per-location probability used by the
    perturbative expansion when given.
    """

    eps_bf: float = 0.0
    eps_pf: float = 0.0
    eps_prime: float | None = None
    p_m: float = 0.0
    tau_U: float = 1.0

    def __post_init__(self):
        for name in ("eps_bf", "eps_pf", "p_m"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.eps_prime is not None and not 0.0 <= self.eps_prime <= 1.0:
            raise ValueError(f"eps_prime={self.eps_prime} outside [0, 1]")
        if not self.tau_U > 0:
            raise ValueError("tau_U must be positive")

    @property
    def bitflip_per_location(self) -> float:
        return self.tau_U * self.eps_bf

    @property
    def phaseflip_per_location(self) -> float:
        return self.tau_U * self.eps_pf

    def per_location(self, pauli: str) -> float:
        if self.eps_prime is not None:
            return self.eps_prime
        return self.bitflip_per_location if pauli in ("X", "Y") else self.phaseflip_per_location


def fault_locations(config: EfConfig, pauli: str = "X", include_memory: bool = True) -> list[FaultSpec]:
    """Enumerate fault templates in a fixed order: control, flag, then memory qubits."""
    if config.log_T < 1:
        raise ValueError("fault locations need at least one control qubit")
    T = config.T
    out: list[FaultSpec] = []
    segments = ["control"] + (["flag"] if config.flag_qubits else [])
    for seg in segments:
        for q in range(config.log_T):
            for t in range(T):
                out.append(FaultSpec("mid", t, seg, q, pauli))
                if t < T - 1:
                    out.append(FaultSpec("post", t, seg, q, pauli))
    if include_memory:
        for q in range(config.memory_qubits):
            for t in range(T):
                out.append(FaultSpec("mid", t, "memory", q, pauli))
    return out


def control_location_count(T: int) -> int:
    return (2 * T - 1) * int(math.log2(T))


@dataclass(frozen=True)
class PerturbationTerm:
    fault: FaultSpec
    weight: float
    numerator: float
    success_prob: float

    @property
    def location_id(self) -> str:
        return self.fault.label


@dataclass(frozen=True)
class PerturbativeReport:
    """First-order expansion in the per-location fault probability.

    The accepted state's overlap with the target (``numerator``) and its
    trace (``success_prob``) are both linear in the fault probabilities, so
    their first-order expansions are taken separately and the fidelity is
    their ratio.
    """

    infidelity_first_order: float
    fail_prob_first_order: float
    n_locations: int
    per_location_terms: tuple[PerturbationTerm, ...]
    base_numerator: float
    base_success_prob: float
    infidelity_linear: float

    @property
    def base_infidelity(self) -> float:
        return 1 - self.base_numerator / self.base_success_prob

    @property
    def base_fail_prob(self) -> float:
        return 1 - self.base_success_prob

    def at(self, eps_prime: float) -> tuple[float, float]:
        """Re-evaluate ``(infidelity, fail_prob)`` with every location weight set to ``eps_prime``."""
        terms = [PerturbationTerm(t.fault, eps_prime, t.numerator, t.success_prob) for t in self.per_location_terms]
        return _combine(self.base_numerator, self.base_success_prob, terms)[:2]

    def deltas(self) -> list[tuple[str, str, float, float]]:
        """Per-location first-order derivatives ``(location, pauli, dInfidelity/dw, dP/dw)``."""
        n0, d0 = self.base_numerator, self.base_success_prob
        f0 = n0 / d0
        rows = []
        for t in self.per_location_terms:
            d_inf = -((t.numerator - n0) - f0 * (t.success_prob - d0)) / d0
            rows.append((t.location_id, t.fault.pauli, d_inf, t.success_prob - d0))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["location_id", "pauli", "delta_F", "delta_P"])
        for loc, pauli, d_inf, d_p in self.deltas():
            # delta_F is the change of fidelity per unit fault probability
            w.writerow([loc, pauli, f"{-d_inf:.12e}", f"{d_p:.12e}"])
        return buf.getvalue()


def _combine(num0: float, den0: float, terms: Sequence[PerturbationTerm]) -> tuple[float, float, float]:
    wsum = sum(t.weight for t in terms)
    num = (1 - wsum) * num0 + sum(t.weight * t.numerator for t in terms)
    den = (1 - wsum) * den0 + sum(t.weight * t.success_prob for t in terms)
    infid = 1 - num / den if den > 0 else float("nan")
    # literal per-location form: (1 - w) (1-F)^(0) + sum_eta w (1-F)^(eta); a location
    # whose fault is always rejected contributes its no-fault value
    f0 = num0 / den0
    lin = (1 - wsum) * (1 - f0)
    for t in terms:
        f_eta = t.numerator / t.success_prob if t.success_prob > 1e-14 else f0
        lin += t.weight * (1 - f_eta)
    return infid, 1 - den, lin


def _numerator(res: EfResult, config: EfConfig) -> float:
    return res.rho_unnormalized.expectation(config.target)


def perturbative_expansion(
    config: EfConfig,
    noise: AncillaNoiseParams,
    paulis: Iterable[str] = ("X",),
    include_memory: bool = False,
    threads: int = 1,
) -> PerturbativeReport:
    """Combine one fault-free and one single-fault exact run per location.

    Control and flag locations use ``noise.per_location(pauli)``; memory
    locations (when included) use ``noise.p_m``.
    """
    base_cfg = config.with_(faults=(), backend="exact")
    base = run_exact(base_cfg)
    num0, den0 = _numerator(base, base_cfg), base.success_prob
    jobs: list[tuple[FaultSpec, float]] = []
    for pauli in paulis:
        for f in fault_locations(base_cfg, pauli, include_memory):
            w = noise.p_m if f.segment == "memory" else noise.per_location(pauli)
            jobs.append((f, w))
    wsum = sum(w for _, w in jobs)
    if wsum > 0.2:
        warnings.warn(f"total fault weight {wsum:.3f} is large for a first-order expansion", RuntimeWarning)

    def one(job):
        f, w = job
        cfg = base_cfg.with_(faults=(f,))
        r = run_exact(cfg)
        return PerturbationTerm(f, w, _numerator(r, cfg), r.success_prob)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            terms = tuple(pool.map(one, jobs))
    else:
        terms = tuple(one(j) for j in jobs)
    infid, fail, lin = _combine(num0, den0, terms)
    return PerturbativeReport(infid, fail, len(terms), terms, num0, den0, lin)


def full_fault_simulation(
    config: EfConfig,
    probability: float,
    paulis: Iterable[str] = ("X",),
    include_memory: bool = False,
    memory_probability: float | None = None,
) -> EfResult:
    """Exact simulation with a Pauli channel of the given probability at every fault location."""
    faults = []
    for pauli in paulis:
        for f in fault_locations(config, pauli, include_memory):
            p = memory_probability if (f.segment == "memory" and memory_probability is not None) else probability
            faults.append(f.with_(probability=p))
    return run_exact(config.with_(faults=tuple(faults), backend="exact"))


# -- phenomenological models ---------------------------------------------------


def _log2T(T: int) -> int:
    k = int(T).bit_length() - 1
    if T < 1 or 2**k != T:
        raise ValueError(f"T={T} must be a power of two")
    return k


def infidelity_model(F0: float, T: int, noise: AncillaNoiseParams) -> float:
    """``(1-F0)/T + tau_U eps_bf T log2 T``; ``T = 1`` is the bare apparatus."""
    k = _log2T(T)
    if T == 1:
        return 1 - F0
    return (1 - F0) / T + noise.tau_U * noise.eps_bf * T * k


def hierarchy_ratio_bound(T: int) -> float:
    """Largest ``tau_U eps_bf / (1-F0)`` for which ``T`` branches still beat the bare apparatus: ``(T-1)/(T^2 log2 T)``."""
    k = _log2T(T)
    if T < 2:
        raise ValueError("T must be at least 2")
    return (T - 1) / (T**2 * k)


def optimal_T(F0: float, noise: AncillaNoiseParams, T_max: int) -> tuple[int, dict[int, float]]:
    """Minimize :func:`infidelity_model` over ``T = 1, 2, 4, ..., T_max``; ties go to the smaller ``T``."""
    _log2T(T_max)
    curve = {}
    T = 1
    while T <= T_max:
        curve[T] = infidelity_model(F0, T, noise)
        T *= 2
    best = min(curve, key=lambda t: (curve[t], t))
    return best, curve


def phase_flip_penalty(T: int, noise: AncillaNoiseParams) -> float:
    """First-order loss of success probability from control phase flips, ``tau_U eps_pf T log2 T``."""
    k = _log2T(T)
    if T < 2:
        raise ValueError("T must be at least 2")
    return noise.tau_U * noise.eps_pf * T * k


def single_control_threshold(F0: float, C: int) -> float:
    """Per-location bit-flip probability below which one control qubit still helps: ``(1-F0)/(2C)``."""
    if C < 1:
        raise ValueError("C must be at least 1")
    return (1 - F0) / (2 * C)


def single_control_model(F0: float, C: int, eps_prime: float) -> float:
    """Conservative model ``(1 - C eps') (1-F0)/2 + C eps'`` behind :func:`single_control_threshold`."""
    return (1 - C * eps_prime) * (1 - F0) / 2 + C * eps_prime


def ef_advantage(curve: dict[int, float]) -> dict[int, bool]:
    """For each ``T`` after the first, whether doubling from ``T/2`` lowered the infidelity."""
    Ts = sorted(curve)
    return {b: curve[b] < curve[a] for a, b in zip(Ts, Ts[1:])}


def fit_power_law(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares fit of ``log y = a log x + b``; returns ``(a, b)``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    a, b = np.polyfit(lx, ly, 1)
    return float(a), float(b)
