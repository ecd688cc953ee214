"""Closed-form evaluators for error filtration outputs, bounds and limits.

Everything here is computed from the Kraus operators directly; nothing calls
the circuit simulator except the explicit cross-checks
(:func:`coherent_invariance_check`), so the two routes stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channels import (
    KrausChannel,
    TwoUnitaryModel,
    commuting,
    dominant_kraus_decomposition,
    overlap_angles,
    pseudo_vacuum_check,
    unitary_channel,
)
from .linalg import DensityMatrix, PureState

ENUMERATION_LIMIT = 10**6


class EnumerationGuardError(ValueError):
    pass


class NoPseudoVacuumError(ValueError):
    pass


def _ket(v) -> np.ndarray:
    if isinstance(v, PureState):
        return v.amplitudes
    return np.asarray(v, dtype=complex).reshape(-1)


def _rho_phi(phi) -> np.ndarray:
    if isinstance(phi, DensityMatrix):
        return phi.entries
    if isinstance(phi, np.ndarray) and phi.ndim == 2 and phi.shape[0] == phi.shape[1] > 1:
        return phi.astype(complex)
    v = _ket(phi)
    return np.outer(v, v.conj())


def _check_dims(channel: KrausChannel, *vecs) -> None:
    for v in vecs:
        if v.shape[0] != channel.dim:
            raise ValueError(f"state of dim {v.shape[0]} does not match channel dim {channel.dim}")


def _unnormalized(m: np.ndarray) -> DensityMatrix:
    return DensityMatrix((m + m.conj().T) / 2, normalized=False)


def fidelity_of(rho: np.ndarray | DensityMatrix, target) -> float:
    m = rho.entries if isinstance(rho, DensityMatrix) else rho
    t = _ket(target)
    return float(np.vdot(t, m @ t).real / np.trace(m).real)


def channel_output(channel: KrausChannel, psi) -> np.ndarray:
    v = _ket(psi)
    return sum(np.outer(k @ v, (k @ v).conj()) for k in channel.ops)


# -- T = 2 ------------------------------------------------------------------


def t2_output_state(channel: KrausChannel, psi, phi, U=None) -> tuple[DensityMatrix, float]:
    """Unnormalized post-selected memory state with one control qubit, and its trace.

    ``rho_1 = 1/2 E(psi) + 1/2 sum_ij K_i psi psi^dag K_j^dag Tr(rho_phi K_i^dag K_j)``.
    ``phi`` may be a vector or a :class:`DensityMatrix`. ``U`` is unused and
    accepted for signature symmetry with the other evaluators.
    """
    v = _ket(psi)
    rp = _rho_phi(phi)
    _check_dims(channel, v, rp)
    kv = [k @ v for k in channel.ops]
    rho = 0.5 * channel_output(channel, v)
    for i, ki in enumerate(channel.ops):
        for j, kj in enumerate(channel.ops):
            w = np.trace(rp @ ki.conj().T @ kj)
            rho = rho + 0.5 * w * np.outer(kv[i], kv[j].conj())
    out = _unnormalized(rho)
    return out, out.trace()


@dataclass(frozen=True)
class TwoUnitaryApprox:
    """First-order expressions for one control qubit next to their exact values."""

    one_minus_P: float
    overlap: float
    infidelity: float
    exact_one_minus_P: float
    exact_overlap: float
    exact_infidelity: float
    F0: float

    @property
    def residuals(self) -> dict[str, float]:
        return {
            "one_minus_P": self.exact_one_minus_P - self.one_minus_P,
            "overlap": self.exact_overlap - self.overlap,
            "infidelity": self.exact_infidelity - self.infidelity,
        }


def t2_two_unitary_approximations(model: TwoUnitaryModel, psi, phi) -> TwoUnitaryApprox:
    """Order-``p`` expressions for ``1 - P``, ``<U psi|rho_1|U psi>`` and ``(1-F)_1``.

    With ``c = Re{<psi|U^dag V|psi> Tr(rho_phi V^dag U)}``:
    ``1 - P ~ p (1 - c)``, overlap ``~ F0/2 + 1/2 - p (1 - c)``,
    ``(1-F)_1 ~ (1-F)_0 / 2``.
    """
    v = _ket(psi)
    rp = _rho_phi(phi)
    U, V, p = model.U, model.V, model.p
    c = (np.vdot(v, U.conj().T @ V @ v) * np.trace(rp @ V.conj().T @ U)).real
    ch = model.to_channel()
    target = U @ v
    F0 = float(np.vdot(target, channel_output(ch, v) @ target).real)
    rho1, P = t2_output_state(ch, v, rp)
    overlap = rho1.expectation(target)
    return TwoUnitaryApprox(
        one_minus_P=p * (1 - c),
        overlap=0.5 * F0 + 0.5 - p * (1 - c),
        infidelity=0.5 * (1 - F0),
        exact_one_minus_P=1 - P,
        exact_overlap=overlap,
        exact_infidelity=1 - overlap / P,
        F0=F0,
    )


def two_unitary_exact_fail(model: TwoUnitaryModel, psi, phi) -> float:
    """Exact ``1 - P`` for one control qubit: ``p (1-p) (1 - c)``."""
    v = _ket(psi)
    rp = _rho_phi(phi)
    c = (np.vdot(v, model.U.conj().T @ model.V @ v) * np.trace(rp @ model.V.conj().T @ model.U)).real
    return model.p * (1 - model.p) * (1 - c)


# -- general T ----------------------------------------------------------------


def general_t_output_state(channel: KrausChannel, psi, phi, U=None, T: int = 2) -> tuple[DensityMatrix, float]:
    """Unnormalized post-selected memory state for ``T`` branches, by summing over Kraus index vectors.

    ``rho = (1/T) E(psi) + (1/T^2) sum_i sum_t sum_{q != t}
    K_{i_t} psi psi^dag K_{i_q}^dag Tr(rho_phi Kbar_{i_q}^dag Kbar_{i_t})``
    where ``Kbar_{i_t}`` is the time-ordered product of all slots except ``t``.
    """
    if T < 1:
        raise ValueError("T must be positive")
    v = _ket(psi)
    rp = _rho_phi(phi)
    _check_dims(channel, v, rp)
    ops = np.stack(channel.ops)
    r, d = ops.shape[0], ops.shape[1]
    if r**T > ENUMERATION_LIMIT:
        raise EnumerationGuardError(f"{r}^{T} Kraus index vectors exceed the limit {ENUMERATION_LIMIT}")
    if T == 1:
        out = _unnormalized(channel_output(channel, v))
        return out, out.trace()
    n = r**T
    digits = np.stack(np.unravel_index(np.arange(n), (r,) * T), axis=1)  # slot 0 first
    evals, evecs = np.linalg.eigh((rp + rp.conj().T) / 2)
    kpsi = np.einsum("kab,b->ka", ops, v)[digits]  # (n, T, d): K_{i_t} psi
    rho = np.zeros((d, d), dtype=complex)
    for w, phi_vec in zip(evals, evecs.T):
        if w <= 1e-15:
            continue
        # prefix[t] = K_{i_{t-1}} ... K_{i_0} phi ; skip[t] = Kbar_{i_t} phi
        prefix = [np.broadcast_to(phi_vec, (n, d))]
        for t in range(T - 1):
            prefix.append(np.einsum("nab,nb->na", ops[digits[:, t]], prefix[-1]))
        skip = []
        for t in range(T):
            x = prefix[t]
            for s in range(t + 1, T):
                x = np.einsum("nab,nb->na", ops[digits[:, s]], x)
            skip.append(x)
        skip = np.stack(skip, axis=1)  # (n, T, d)
        gram = np.einsum("nqa,nta->nqt", skip.conj(), skip)  # <Kbar_q phi|Kbar_t phi>
        gram[:, np.arange(T), np.arange(T)] = 0.0
        rho += w * np.einsum("nta,nqb,nqt->ab", kpsi, kpsi.conj(), gram) / T**2
    rho += channel_output(channel, v) / T
    out = _unnormalized(rho)
    return out, out.trace()


# -- success bounds -----------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    bound_value: float
    achieved_value: float | None
    satisfied: bool | None
    regime: str
    epsilon: float
    epsilon_convention: str = "error_weight"
    applicable: bool = True
    alternative_bound: float | None = None
    notes: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def ps_lower_bound(T: int, epsilon: float, achieved: float | None = None,
                   convention: str = "error_weight") -> BoundReport:
    """Worst-case bound ``P >= 1 - T eps``."""
    if not 0 <= epsilon <= 1 or T < 1:
        raise ValueError("need eps in [0, 1] and T >= 1")
    bound = 1 - T * epsilon
    sat = None if achieved is None else bool(achieved >= bound - 1e-12)
    return BoundReport(bound, achieved, sat, "worst_case", epsilon, convention)


def ps_favorable_bound(T: int, epsilon: float, conditions_met: bool, achieved: float | None = None,
                       convention: str = "error_weight") -> BoundReport:
    """Constant bound ``P >= 1 - 4 eps + eps/T`` under a favourable condition.

    The longer derivation gives ``1 - 4 eps + 4 eps/T``; that value is kept in
    ``alternative_bound`` and the smaller of the two is the one asserted.
    """
    if not 0 <= epsilon <= 1 or T < 1:
        raise ValueError("need eps in [0, 1] and T >= 1")
    weak = 1 - 4 * epsilon + epsilon / T
    strong = 1 - 4 * epsilon + 4 * epsilon / T
    if not conditions_met:
        return BoundReport(weak, achieved, None, "favorable", epsilon, convention, applicable=False,
                           alternative_bound=strong, notes="no favourable condition holds")
    sat = None if achieved is None else bool(achieved >= weak - 1e-12)
    return BoundReport(weak, achieved, sat, "favorable", epsilon, convention, alternative_bound=strong)


@dataclass(frozen=True)
class FavorableConditions:
    commuting_kraus: bool
    stationary_phi: bool
    bias_preserving: bool

    @property
    def any(self) -> bool:
        return self.commuting_kraus or self.stationary_phi or self.bias_preserving


def favorable_conditions(channel: KrausChannel, phi, bias_preserving: bool = False) -> FavorableConditions:
    """Check which favourable condition holds. Bias preservation is a circuit property and must be declared."""
    return FavorableConditions(commuting(channel, 1e-10), pseudo_vacuum_check(channel, phi).valid, bias_preserving)


def error_weight(channel: KrausChannel, U) -> float:
    """``1 - lambda_min(K0^dag K0)`` for the dominant Kraus operator.

    For a mixture ``(1-p) U + sum p_i V_i`` this is ``p``, the error
    probability that the main-text bounds are written in.
    """
    dec = dominant_kraus_decomposition(channel, U)
    k0 = channel.ops[dec.index]
    return float(1 - np.linalg.eigvalsh(k0.conj().T @ k0).min())


# -- single control qubit with phi = psi ------------------------------------


@dataclass(frozen=True)
class GuaranteeReport:
    F0: float
    F1: float
    improved: bool
    purity: float


def single_control_guarantee(channel: KrausChannel, psi, U) -> GuaranteeReport:
    """``F1 = (F0 + <U psi|rho0^2|U psi>) / (1 + Tr rho0^2)`` with ``phi = psi``."""
    v = _ket(psi)
    target = np.asarray(U, dtype=complex) @ v
    rho0 = channel_output(channel, v)
    sq = rho0 @ rho0
    F0 = float(np.vdot(target, rho0 @ target).real)
    purity = float(np.trace(sq).real)
    F1 = (F0 + float(np.vdot(target, sq @ target).real)) / (1 + purity)
    return GuaranteeReport(F0, F1, F1 > F0, purity)


# -- T -> infinity ----------------------------------------------------------------


@dataclass(frozen=True)
class LimitStateReport:
    psi_infinity: PureState
    F_infinity: float
    F_infinity_pessimistic: float
    success_condition: bool
    condition_kind: str
    success_prob_infinity: float
    F0: float
    details: dict = field(default_factory=dict)


def f_infinity_two_unitary(p: float, theta: float, nu: float) -> float:
    """Limit fidelity of the two-unitary model, ``|a|^2 / (|a|^2 + p^2 sin^2 theta)`` with ``a = 1-p+p e^{i nu} cos theta``."""
    a = abs(1 - p + p * np.exp(1j * nu) * np.cos(theta)) ** 2
    return float(a / (a + p**2 * np.sin(theta) ** 2))


def f_infinity_pessimistic(p: float, weights: Sequence[float], thetas: Sequence[float],
                           a0: float | None = None, b0: float = 0.0) -> float:
    """Limit fidelity with every error term aligned destructively (``nu_i = pi``, parallel perpendicular parts).

    ``weights`` are the error weights ``lambda_i`` (summing to one) and
    ``a0``, ``b0`` the parallel and perpendicular coefficients of the
    dominant term (``1-p`` and 0 by default).
    """
    w = np.asarray(weights, dtype=float)
    th = np.asarray(thetas, dtype=float)
    a = (1 - p if a0 is None else a0) - p * np.sum(w * np.cos(th))
    b = b0 + p * np.sum(w * np.sin(th))
    return float(a**2 / (a**2 + b**2))


def region_conditions(p: float, F0: float) -> tuple[bool, str]:
    """Single-parameter success test for the two-unitary model."""
    if p < 0.25:
        return True, "p_lt_quarter"
    ok = 0.25 < p < 0.5 and 1 - p < F0 < 1 / (4 * p)
    return ok, "region2"


def limit_state(channel: KrausChannel, psi, phi, U, tol: float = 1e-9) -> LimitStateReport:
    """Pure state approached as ``T -> infinity`` when ``phi`` is a pseudo-vacuum.

    With ``K_i |phi> = lambda_i |phi>`` the post-selected state tends to
    ``|psi_inf> = sum_i conj(lambda_i) K_i |psi>``, whose squared norm is the
    limiting success probability. For ``K_0 = sqrt(1-p) U`` and
    ``K_1 = sqrt(p) V`` acting trivially on ``phi`` this is
    ``(1-p) U|psi> + p V|psi>``.
    """
    cert = pseudo_vacuum_check(channel, phi, tol)
    if not cert.valid:
        raise NoPseudoVacuumError(f"phi is not a pseudo-vacuum (max residual {max(cert.residuals):.3e})")
    v = _ket(psi)
    U = np.asarray(U, dtype=complex)
    target = U @ v
    lam = np.array(cert.eigenvalues)
    kv = [k @ v for k in channel.ops]
    psi_inf = sum(np.conj(l) * x for l, x in zip(lam, kv))
    norm2 = float(np.vdot(psi_inf, psi_inf).real)
    F_inf = float(abs(np.vdot(target, psi_inf)) ** 2 / norm2) if norm2 > 0 else float("nan")
    F0 = float(sum(abs(np.vdot(target, x)) ** 2 for x in kv))

    dec = dominant_kraus_decomposition(channel, U)
    i0 = dec.index
    q = np.array(cert.probs)
    others = [i for i in range(len(channel.ops)) if i != i0 and q[i] > 0]
    p = float(1 - q[i0])
    # angles of each normalized K_i psi (with the phase picked up on phi removed)
    angles = {}
    for i in range(len(channel.ops)):
        nrm = np.linalg.norm(kv[i])
        if nrm > 0:
            ph = lam[i] / abs(lam[i]) if abs(lam[i]) > 0 else 1.0
            angles[i] = overlap_angles(target, np.conj(ph) * kv[i] / nrm)
    theta0 = angles.get(i0, (np.pi / 2, 0.0))[0]
    mixed = channel.is_mixed_unitary()
    weights = [q[i] / p for i in others] if p > 0 else []
    thetas = [angles[i][0] for i in others]
    # the dominant operator's own perpendicular part is aligned with the error terms
    F_pess = f_infinity_pessimistic(p, weights, thetas, q[i0] * np.cos(theta0), q[i0] * np.sin(theta0))

    details = {"p": p, "theta0": float(theta0), "q_phi": tuple(float(x) for x in q),
               "angles": {int(i): (float(t), float(n)) for i, (t, n) in angles.items()}}
    if mixed and theta0 < 1e-9:
        if len(others) <= 1:
            ok, kind = region_conditions(p, F0)
        else:
            ok, kind = p < 0.25, "p_lt_quarter"
    elif mixed:
        ok, kind = (1 - p) * np.cos(theta0) ** 2 > 0.75, "cos2_theta0"
    else:
        ok, kind = bool(q[i0] > 3 / (4 * np.cos(theta0) ** 2)) if np.cos(theta0) > 0 else False, "q_phi"
        details["q_psi0"] = float(np.vdot(kv[i0], kv[i0]).real)
    return LimitStateReport(
        psi_infinity=PureState(psi_inf, normalized=False),
        F_infinity=F_inf,
        F_infinity_pessimistic=F_pess,
        success_condition=bool(ok),
        condition_kind=kind,
        success_prob_infinity=norm2,
        F0=F0,
        details=details,
    )


def floor_expansion(epsilon: float, theta: float) -> float:
    """Small-error form of the limit fidelity with ``epsilon = 2p``: ``1 - sin^2(theta) eps^2 / 4``."""
    return 1 - 0.25 * np.sin(theta) ** 2 * epsilon**2


# -- unitary errors ------------------------------------------------------------


@dataclass(frozen=True)
class CoherentReport:
    F0: float
    fidelities: dict[int, float]
    success_probs: dict[int, float]
    max_deviation: float
    passed: bool


def coherent_invariance_check(V, psi, T_list: Sequence[int], U=None, phi=None, tol: float = 1e-10) -> CoherentReport:
    """Simulate EF around the unitary channel ``{V}`` and compare each ``F_T`` with ``F_0``."""
    from .engine import EfConfig, run_exact

    V = np.asarray(V, dtype=complex)
    v = _ket(psi)
    U = np.eye(V.shape[0], dtype=complex) if U is None else np.asarray(U, dtype=complex)
    phi_v = v if phi is None else _ket(phi)
    ch = unitary_channel(V)
    F0 = float(abs(np.vdot(U @ v, V @ v)) ** 2)
    fids, probs = {}, {}
    for T in T_list:
        log_T = int(T).bit_length() - 1
        if 2**log_T != T:
            raise ValueError(f"T={T} is not a power of two")
        res = run_exact(EfConfig(log_T, v, phi_v, U, ch))
        fids[T], probs[T] = res.fidelity, res.success_prob
    dev = max((abs(f - F0) for f in fids.values()), default=0.0)
    return CoherentReport(F0, fids, probs, dev, dev <= tol)
