"""Kraus channels: construction, CPTP checks, dominant-Kraus decomposition and lifting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Sequence

import numpy as np

from .linalg import (
    I2,
    X,
    Y,
    Z,
    DensityMatrix,
    LayoutError,
    Operator,
    PureState,
    QubitLayout,
    is_unitary,
    op_norm,
)

CPTP_TOL = 1e-9


class ChannelError(ValueError):
    pass


def _as_matrix(op) -> np.ndarray:
    if isinstance(op, Operator):
        return op.matrix
    return np.asarray(op, dtype=complex)


@dataclass(frozen=True)
class KrausChannel:
    """Ordered Kraus operators ``K_0 ... K_R`` acting on a ``dim``-dimensional system.

    Completeness is checked on construction unless ``check=False``; the
    unchecked form exists so that :func:`validate_cptp` can report on
    arbitrary operator sets.
    """

    ops: tuple[np.ndarray, ...]
    dominant_index: int = 0
    check: bool = field(default=True, compare=False, repr=False)
    # (kind, params) used for text serialization; None for explicit channels.
    spec: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.ops) == 0:
            raise ChannelError("channel needs at least one Kraus operator")
        mats = []
        for k in self.ops:
            m = np.array(_as_matrix(k), dtype=complex)
            m.setflags(write=False)
            mats.append(m)
        d = mats[0].shape[0]
        for m in mats:
            if m.shape != (d, d):
                raise ChannelError(f"Kraus operators must all be {d}x{d}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ChannelError("Kraus operator has non-finite entries")
        if not 0 <= self.dominant_index < len(mats):
            raise ChannelError(f"dominant_index {self.dominant_index} out of range")
        object.__setattr__(self, "ops", tuple(mats))
        if self.check:
            dev = completeness_deviation(mats)
            if dev > CPTP_TOL:
                raise ChannelError(f"Kraus operators are not complete: deviation {dev:.3e}")

    @property
    def dim(self) -> int:
        return self.ops[0].shape[0]

    @property
    def num_qubits(self) -> int:
        return int(round(np.log2(self.dim)))

    def __len__(self) -> int:
        return len(self.ops)

    def superoperator(self) -> np.ndarray:
        """Matrix ``S`` with ``vec(E(rho)) = S vec(rho)`` for row-major ``vec``."""
        return sum(np.kron(k, k.conj()) for k in self.ops)

    def is_mixed_unitary(self, tol: float = 1e-9) -> bool:
        """True when every Kraus operator is a scalar multiple of a unitary."""
        for k in self.ops:
            g = k.conj().T @ k
            q = np.trace(g).real / self.dim
            if np.abs(g - q * np.eye(self.dim)).max() > tol:
                return False
        return True

    def is_unitary_channel(self, tol: float = 1e-9) -> bool:
        """True when the channel is a single unitary (up to zero-weight Kraus terms)."""
        nonzero = [k for k in self.ops if np.abs(k).max() > tol]
        return len(nonzero) == 1 and is_unitary(nonzero[0], tol)

    def compose_after(self, unitary: np.ndarray) -> "KrausChannel":
        """Channel ``rho -> E(U rho U^dag)`` (noise acting after the ideal unitary)."""
        u = _as_matrix(unitary)
        return KrausChannel(tuple(k @ u for k in self.ops), self.dominant_index)

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        if self.spec is not None:
            kind, params = self.spec
            return {"kind": kind, "params": _jsonable(params)}
        return {
            "kind": "explicit",
            "dominant_index": self.dominant_index,
            "ops": [[[float(z.real), float(z.imag)] for z in k.reshape(-1)] for k in self.ops],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "KrausChannel":
        kind = data["kind"]
        if kind == "explicit":
            ops = []
            for flat in data["ops"]:
                v = np.array([complex(re, im) for re, im in flat])
                d = int(round(np.sqrt(v.size)))
                ops.append(v.reshape(d, d))
            return cls(tuple(ops), int(data.get("dominant_index", 0)))
        return make_standard_channel(kind, **_unjson(data.get("params", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "KrausChannel":
        return cls.from_dict(json.loads(text))


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, np.ndarray) or (isinstance(v, (list, tuple)) and v and isinstance(v[0], np.ndarray)):
            arrs = [v] if isinstance(v, np.ndarray) else list(v)
            out[k] = {
                "matrices": [[[float(z.real), float(z.imag)] for z in a.reshape(-1)] for a in arrs],
                "single": isinstance(v, np.ndarray),
            }
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def _unjson(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, dict) and "matrices" in v:
            mats = []
            for flat in v["matrices"]:
                a = np.array([complex(re, im) for re, im in flat])
                d = int(round(np.sqrt(a.size)))
                mats.append(a.reshape(d, d))
            out[k] = mats[0] if v.get("single") else mats
        else:
            out[k] = v
    return out


def completeness_deviation(ops: Sequence[np.ndarray]) -> float:
    mats = [_as_matrix(k) for k in ops]
    d = mats[0].shape[0]
    s = sum(k.conj().T @ k for k in mats)
    return op_norm(s - np.eye(d))


@dataclass(frozen=True)
class CptpReport:
    deviation: float
    tol: float
    passed: bool


def validate_cptp(channel: KrausChannel | Sequence, tol: float = 1e-10) -> CptpReport:
    """Report ``||sum K^dag K - I||_op`` and whether it is within ``tol``."""
    ops = channel.ops if isinstance(channel, KrausChannel) else channel
    dev = completeness_deviation(ops)
    return CptpReport(dev, tol, dev <= tol)


def _check_prob(p: float, name: str = "p") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0 or not np.isfinite(p):
        raise ChannelError(f"{name}={p} is not a probability")
    return p


def _tensor_channel(single: Sequence[np.ndarray], num_qubits: int) -> list[np.ndarray]:
    """Independent copies of a single-qubit channel on each of ``num_qubits`` qubits."""
    ops = [np.eye(1, dtype=complex)]
    for _ in range(num_qubits):
        ops = [np.kron(a, b) for a in ops for b in single]
    return ops


def make_standard_channel(kind: str, **params) -> KrausChannel:
    """Build a named channel.

    Kinds and parameters:

    * ``identity`` (``num_qubits``)
    * ``unitary`` (``unitary``)
    * ``dephasing`` / ``bitflip`` / ``depolarizing`` (``p``, ``num_qubits``)
    * ``amplitude_damping`` (``gamma``, ``num_qubits``)
    * ``mixed_unitary`` (``weights``, ``unitaries``)
    * ``two_unitary`` (``p``, ``U``, ``V``): ``K0 = sqrt(1-p) U, K1 = sqrt(p) V``

    Every kind except the unitary mixtures also accepts ``ideal``: a unitary
    applied before the noise, so the channel approximates that unitary.

    Depolarizing uses ``rho -> (1-p) rho + p/3 (X rho X + Y rho Y + Z rho Z)`` per qubit.
    """
    spec = (kind, dict(params))
    params = dict(params)
    ideal = params.pop("ideal", None)
    nq = int(params.pop("num_qubits", 1))

    if kind == "identity":
        ops = [np.eye(2**nq, dtype=complex)]
    elif kind == "unitary":
        u = _as_matrix(params.pop("unitary"))
        if not is_unitary(u, 1e-9):
            raise ChannelError("unitary channel needs a unitary matrix")
        ops = [u]
    elif kind in ("dephasing", "bitflip"):
        p = _check_prob(params.pop("p"))
        pauli = Z if kind == "dephasing" else X
        single = [np.sqrt(1 - p) * I2, np.sqrt(p) * pauli] if p > 0 else [I2]
        ops = _tensor_channel(single, nq)
    elif kind == "depolarizing":
        p = _check_prob(params.pop("p"))
        single = [np.sqrt(1 - p) * I2] + ([np.sqrt(p / 3) * P for P in (X, Y, Z)] if p > 0 else [])
        ops = _tensor_channel(single, nq)
    elif kind == "amplitude_damping":
        g = _check_prob(params.pop("gamma"), "gamma")
        single = [
            np.array([[1, 0], [0, np.sqrt(1 - g)]], dtype=complex),
            np.array([[0, np.sqrt(g)], [0, 0]], dtype=complex),
        ]
        ops = _tensor_channel(single, nq)
    elif kind == "mixed_unitary":
        weights = [_check_prob(w, "weight") for w in params.pop("weights")]
        unitaries = [_as_matrix(u) for u in params.pop("unitaries")]
        if len(weights) != len(unitaries):
            raise ChannelError("weights and unitaries must have the same length")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ChannelError(f"mixed-unitary weights sum to {sum(weights)}, not 1")
        for u in unitaries:
            if not is_unitary(u, 1e-9):
                raise ChannelError("mixed_unitary factor is not unitary")
        ops = [np.sqrt(w) * u for w, u in zip(weights, unitaries)]
    elif kind == "two_unitary":
        return TwoUnitaryModel(params.pop("p"), params.pop("U"), params.pop("V")).to_channel()
    else:
        raise ChannelError(f"unknown channel kind {kind!r}")
    if params:
        raise ChannelError(f"unexpected parameters for {kind}: {sorted(params)}")
    if ideal is not None:
        u = _as_matrix(ideal)
        if not is_unitary(u, 1e-9):
            raise ChannelError("ideal must be unitary")
        ops = [k @ u for k in ops]
    return KrausChannel(tuple(ops), spec=spec)


def identity_channel(num_qubits: int = 1) -> KrausChannel:
    return make_standard_channel("identity", num_qubits=num_qubits)


def unitary_channel(u) -> KrausChannel:
    return make_standard_channel("unitary", unitary=_as_matrix(u))


def _apply_kraus(ops: Sequence[np.ndarray], rho: np.ndarray) -> np.ndarray:
    return sum(k @ rho @ k.conj().T for k in ops)


def apply_channel(channel: KrausChannel, rho: DensityMatrix) -> DensityMatrix:
    if rho.dim != channel.dim:
        raise LayoutError(f"channel of dim {channel.dim} cannot act on state of dim {rho.dim}")
    out = _apply_kraus(channel.ops, rho.entries)
    return DensityMatrix((out + out.conj().T) / 2, rho.layout, rho.normalized)


def _ket(psi: PureState | np.ndarray) -> np.ndarray:
    return psi.amplitudes if isinstance(psi, PureState) else np.asarray(psi, dtype=complex).reshape(-1)


def channel_fidelity(channel: KrausChannel, U, psi: PureState | np.ndarray) -> float:
    """Base fidelity ``<U psi| E(|psi><psi|) |U psi>``."""
    v = _ket(psi)
    target = _as_matrix(U) @ v
    return float(sum(abs(np.vdot(target, k @ v)) ** 2 for k in channel.ops))


@dataclass(frozen=True)
class DominantDecomposition:
    """``K_dominant = U - epsilon * xi`` with ``||xi||_op = 1`` (or ``xi = 0`` when exact)."""

    index: int
    epsilon: float
    xi: np.ndarray
    ideal: np.ndarray
    norm: str = "operator"

    def reconstruct(self) -> np.ndarray:
        return self.ideal - self.epsilon * self.xi


def dominant_kraus_decomposition(channel: KrausChannel, U) -> DominantDecomposition:
    """Select ``argmax_i |Tr(U^dag K_i)|`` (lowest index on ties) and split off the ideal part."""
    u = _as_matrix(U)
    if not is_unitary(u, 1e-9):
        raise ChannelError("ideal operator must be unitary")
    overlaps = [abs(np.trace(u.conj().T @ k)) for k in channel.ops]
    best = max(overlaps)
    idx = next(i for i, o in enumerate(overlaps) if o >= best - 1e-12)
    diff = u - channel.ops[idx]
    eps = op_norm(diff)
    xi = diff / eps if eps > 0 else np.zeros_like(diff)
    return DominantDecomposition(idx, eps, xi, u)


def lift_to_system(channel: KrausChannel, layout: QubitLayout, apparatus_segment: str) -> KrausChannel:
    """Embed the channel as ``I_rest (x) K_i`` on ``apparatus_segment`` of ``layout``."""
    qubits = layout.indices(apparatus_segment)
    if 2 ** len(qubits) != channel.dim:
        raise LayoutError(
            f"segment {apparatus_segment!r} has {len(qubits)} qubits; channel acts on dim {channel.dim}"
        )
    before = 2 ** (qubits[0] if qubits else 0)
    after = 2 ** (layout.total_qubits - (qubits[-1] + 1 if qubits else 0))
    ops = tuple(np.kron(np.kron(np.eye(before), k), np.eye(after)) for k in channel.ops)
    return KrausChannel(ops, channel.dominant_index)


@dataclass(frozen=True)
class PseudoVacuumCertificate:
    """Result of testing ``K_i |phi> = lambda_i |phi>`` for every Kraus operator."""

    phi: np.ndarray
    probs: tuple[float, ...]
    residuals: tuple[float, ...]
    eigenvalues: tuple[complex, ...]
    valid: bool

    @property
    def phases(self) -> tuple[float, ...]:
        return tuple(float(np.angle(l)) if abs(l) > 0 else 0.0 for l in self.eigenvalues)


def pseudo_vacuum_check(channel: KrausChannel, phi, tol: float = 1e-9) -> PseudoVacuumCertificate:
    """Check that every ``K_i`` maps ``phi`` to a multiple of itself.

    ``probs`` are ``q_i = <phi|K_i^dag K_i|phi>``; ``eigenvalues`` keep the
    complex factor ``lambda_i = <phi|K_i|phi>`` including its phase.
    """
    v = _ket(phi)
    v = v / np.linalg.norm(v)
    probs, residuals, lams = [], [], []
    for k in channel.ops:
        w = k @ v
        lam = np.vdot(v, w)
        probs.append(float(np.vdot(w, w).real))
        residuals.append(float(np.linalg.norm(w - lam * v)))
        lams.append(complex(lam))
    valid = max(residuals) <= tol and abs(sum(probs) - 1.0) <= 1e-9
    return PseudoVacuumCertificate(v, tuple(probs), tuple(residuals), tuple(lams), valid)


@dataclass(frozen=True)
class TwoUnitaryModel:
    """``K0 = sqrt(1-p) U``, ``K1 = sqrt(p) V`` with unitary ``U`` (ideal) and ``V`` (error)."""

    p: float
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        _check_prob(self.p)
        for name in ("U", "V"):
            m = _as_matrix(getattr(self, name))
            if not is_unitary(m, 1e-9):
                raise ChannelError(f"{name} must be unitary")
            object.__setattr__(self, name, m)

    def to_channel(self) -> KrausChannel:
        ops = (np.sqrt(1 - self.p) * self.U, np.sqrt(self.p) * self.V)
        return KrausChannel(ops, spec=("two_unitary", {"p": self.p, "U": self.U, "V": self.V}))

    def angles(self, psi) -> tuple[float, float]:
        """``(theta, nu)`` with ``V|psi> = e^{i nu} cos(theta) |U psi> + sin(theta) |U psi_perp>``."""
        return overlap_angles(self.U @ _ket(psi), self.V @ _ket(psi))


def overlap_angles(target: np.ndarray, image: np.ndarray, tol: float = 1e-12) -> tuple[float, float]:
    """Angles of a unit vector ``image`` relative to a unit ``target``.

    ``theta`` is in ``[0, pi/2]``; ``nu`` is the phase of the overlap, set to 0
    when ``theta`` is 0 or ``pi/2``.
    """
    c = np.vdot(target, image)
    perp = float(np.linalg.norm(image - c * target))
    theta = float(np.arctan2(perp, abs(c)))
    if abs(c) < tol or perp < tol:
        return theta, 0.0
    return theta, float(np.angle(c))


def commuting(channel: KrausChannel, tol: float = 1e-12) -> bool:
    """True when all Kraus operators mutually commute."""
    ops = channel.ops
    for i in range(len(ops)):
        for j in range(i + 1, len(ops)):
            if np.abs(ops[i] @ ops[j] - ops[j] @ ops[i]).max() > tol:
                return False
    return True


def kraus_from_superoperator(s: np.ndarray, tol: float = 1e-12) -> KrausChannel:
    """Kraus form of a superoperator (row-major ``vec`` convention) via its Choi matrix."""
    d = int(round(np.sqrt(s.shape[0])))
    # S[(a,b),(c,e)] = sum_k K[a,c] conj(K[b,e]); Choi[(a,c),(b,e)] = same.
    choi = s.reshape(d, d, d, d).transpose(0, 2, 1, 3).reshape(d * d, d * d)
    choi = (choi + choi.conj().T) / 2
    w, v = np.linalg.eigh(choi)
    ops = []
    for val, vec in sorted(zip(w, v.T), key=lambda t: -t[0]):
        if val > tol:
            ops.append(np.sqrt(val) * vec.reshape(d, d))
    return KrausChannel(tuple(ops))


def compose(*channels: KrausChannel) -> KrausChannel:
    """Sequential composition; the first argument acts first."""
    def _two(a: KrausChannel, b: KrausChannel) -> KrausChannel:
        return KrausChannel(tuple(kb @ ka for ka in a.ops for kb in b.ops))

    return reduce(_two, channels)


def random_mixed_unitary(dim: int, rng: np.random.Generator, error_prob: float, n_errors: int = 1,
                         ideal=None) -> KrausChannel:
    """``(1-p) U + sum_i p_i V_i U`` with Haar-random ``V_i`` and random ``p_i`` summing to ``p``."""
    from .linalg import random_unitary

    p = _check_prob(error_prob, "error_prob")
    u = np.eye(dim, dtype=complex) if ideal is None else _as_matrix(ideal)
    split = rng.dirichlet(np.ones(n_errors)) * p if n_errors > 1 else np.array([p])
    weights = [1 - p] + [float(s) for s in split]
    unitaries = [u] + [random_unitary(dim, rng) @ u for _ in range(n_errors)]
    return make_standard_channel("mixed_unitary", weights=weights, unitaries=unitaries)


def random_channel(dim: int, rng: np.random.Generator, strength: float, env_dim: int = 2,
                   ideal=None) -> KrausChannel:
    """Generic channel ``K_i = <i|exp(-i s G)|0>_env`` from a random Hermitian ``G`` on system and environment.

    ``strength = 0`` gives the ideal unitary; larger values move the channel
    away from it. The environment dimension bounds the Kraus rank.
    """
    n = dim * env_dim
    g = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    g = (g + g.conj().T) / (2 * np.sqrt(n))
    w, v = np.linalg.eigh(g)
    big = (v * np.exp(-1j * strength * w)) @ v.conj().T
    # system index is the slow one: big[(s, e), (s', e')]
    blocks = big.reshape(dim, env_dim, dim, env_dim)[:, :, :, 0]
    ops = [blocks[:, i, :] for i in range(env_dim)]
    if ideal is not None:
        u = _as_matrix(ideal)
        ops = [k @ u for k in ops]
    return KrausChannel(tuple(ops))
