"""Bucket-brigade QRAM with per-timestep depolarizing noise, used as the EF apparatus.

Qubit order inside the QRAM: address ``a_0 .. a_{n-1}`` (``a_0`` most
significant), one bus qubit, then ``2^n - 1`` routers in heap order (router
``(k, j)`` at level ``k``, position ``j``, has index ``2^k - 1 + j``).

Schedule (``2n + 1`` timesteps):

* level ``k = 0 .. n-1``: every router at level ``k`` whose ancestors all
  point towards it copies ``a_k`` (``r ^= a_k``);
* retrieval: for each cell with ``x_a = 1``, flip the bus if every router on
  the path to leaf ``a`` points along ``a``;
* the router layers again in reverse order, which returns routers to ``|0>``.

Depolarizing noise (X, Y, Z each with ``p_dep / 3``) hits every address,
bus and router qubit after every timestep. Routers are discarded after each
query, so every EF branch gets a fresh tree.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .ancilla import AncillaNoiseParams, fit_power_law, perturbative_expansion
from .channels import KrausChannel, kraus_from_superoperator
from .engine import EfConfig, run

QRAM_MAX_DEPTH = 3
EXACT_CHANNEL_MAX_DEPTH = 2
CSV_FIELDS = (
    "experiment_id", "n", "p_dep", "log_T", "samples", "seed",
    "infidelity", "infidelity_err", "fail_prob", "fail_prob_err",
)


def default_data(n: int) -> tuple[int, ...]:
    """Fixed non-trivial data pattern: parity of the address bits."""
    return tuple(bin(a).count("1") % 2 for a in range(2**n))


@dataclass(frozen=True)
class QramSpec:
    n: int
    data: tuple[int, ...] = ()
    p_dep: float = 0.0

    def __post_init__(self):
        if not 1 <= self.n <= QRAM_MAX_DEPTH:
            raise ValueError(f"QRAM depth must be in [1, {QRAM_MAX_DEPTH}], got {self.n}")
        data = tuple(int(x) for x in (self.data or default_data(self.n)))
        if len(data) != 2**self.n or any(x not in (0, 1) for x in data):
            raise ValueError(f"data must be {2**self.n} bits")
        if not 0.0 <= self.p_dep <= 1.0:
            raise ValueError(f"p_dep={self.p_dep} outside [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def N(self) -> int:
        return 2**self.n

    @property
    def timesteps(self) -> int:
        return 2 * self.n + 1

    @property
    def n_routers(self) -> int:
        return 2**self.n - 1

    @property
    def query_qubits(self) -> int:
        """Address plus bus: the register the apparatus acts on."""
        return self.n + 1


def router_index(k: int, j: int) -> int:
    return 2**k - 1 + j


@dataclass(frozen=True)
class QramCircuit:
    """Layered schedule. Each layer is a list of ``(target, [(control, value), ...])`` controlled flips."""

    spec: QramSpec
    layers: tuple[tuple[tuple[int, tuple[tuple[int, int], ...]], ...], ...]

    @property
    def num_qubits(self) -> int:
        return self.spec.query_qubits + self.spec.n_routers

    def address_qubit(self, k: int) -> int:
        return k

    @cached_property
    def permutations(self) -> tuple[np.ndarray, ...]:
        """Basis permutation of each layer (all gates are classical reversible)."""
        nq = self.num_qubits
        idx = np.arange(2**nq)
        bit = lambda q: (idx >> (nq - 1 - q)) & 1
        perms = []
        for layer in self.layers:
            out = idx.copy()
            for target, controls in layer:
                fire = np.ones(idx.size, dtype=bool)
                for c, v in controls:
                    fire &= bit(c) == v
                out = out ^ (fire.astype(np.int64) << (nq - 1 - target))
            # gates inside a layer act on disjoint targets whose controls are untouched by the layer
            perms.append(out)
        return tuple(perms)

    def ideal_unitary_full(self) -> np.ndarray:
        nq = self.num_qubits
        u = np.eye(2**nq, dtype=complex)
        for perm in self.permutations:
            u = u[perm]
        return u


def build_bucket_brigade(spec: QramSpec) -> QramCircuit:
    n = spec.n
    bus = n
    router = lambda k, j: n + 1 + router_index(k, j)

    def path(k: int, j: int) -> tuple[tuple[int, int], ...]:
        # ancestors of node (k, j) and the direction each must point
        conds = []
        for kk in range(k):
            anc = j >> (k - kk)
            direction = (j >> (k - kk - 1)) & 1
            conds.append((router(kk, anc), direction))
        return tuple(conds)

    fan_in = []
    for k in range(n):
        fan_in.append(tuple((router(k, j), ((k, 1),) + path(k, j)) for j in range(2**k)))
    retrieve = []
    for a, x in enumerate(spec.data):
        if x:
            conds = path(n, a)
            retrieve.append((bus, conds))
    # retrieval flips the same bus once per matching leaf; at most one leaf matches per basis state
    layers = tuple(fan_in) + (tuple(retrieve),) + tuple(reversed(fan_in))
    return QramCircuit(spec, layers)


def query_unitary(spec: QramSpec) -> np.ndarray:
    """Ideal query ``|a>|b> -> |a>|b XOR x_a>`` on address plus bus."""
    d = 2 ** spec.query_qubits
    u = np.zeros((d, d), dtype=complex)
    for a in range(spec.N):
        for b in (0, 1):
            u[(a << 1) | (b ^ spec.data[a]), (a << 1) | b] = 1.0
    return u


def address_input(spec: QramSpec, address=None) -> np.ndarray:
    """``|address> |0>_bus``; the default address state is the uniform superposition."""
    if address is None:
        address = np.full(spec.N, 1 / np.sqrt(spec.N), dtype=complex)
    address = np.asarray(address, dtype=complex)
    return np.kron(address, np.array([1, 0], dtype=complex))


def _depolarize(rho: np.ndarray, q: int, nq: int, p: float) -> np.ndarray:
    """``rho -> (1 - 4p/3) rho + (2p/3) I_q (x) Tr_q rho`` on a batch of density matrices."""
    lead = rho.shape[:-2]
    a, b = 2**q, 2 ** (nq - q - 1)
    r = rho.reshape(lead + (a, 2, b, a, 2, b))
    tr = np.einsum("...xiyziw->...xyzw", r)
    eye = np.eye(2)
    mixed = np.einsum("...xyzw,ij->...xiyzjw", tr, eye)
    out = (1 - 4 * p / 3) * r + (2 * p / 3) * mixed
    return out.reshape(rho.shape)


def _evolve_density(circuit: QramCircuit, rho: np.ndarray) -> np.ndarray:
    """Noisy QRAM on a (batched) density matrix over address, bus and routers."""
    nq = circuit.num_qubits
    p = circuit.spec.p_dep
    for perm in circuit.permutations:
        rho = rho[..., perm, :][..., :, perm]
        if p > 0:
            for q in range(nq):
                rho = _depolarize(rho, q, nq, p)
    return rho


def base_fidelity_exact(spec: QramSpec, address=None) -> float:
    """``<U psi| E(psi) |U psi>`` for the noisy query with fresh routers, by density-matrix evolution."""
    circuit = build_bucket_brigade(spec)
    psi = address_input(spec, address)
    full = np.kron(psi, np.eye(2**spec.n_routers, dtype=complex)[0])
    rho = _evolve_density(circuit, np.outer(full, full.conj()))
    d, r = psi.size, 2**spec.n_routers
    rho_q = np.einsum("arbr->ab", rho.reshape(d, r, d, r))
    target = query_unitary(spec) @ psi
    return float(np.vdot(target, rho_q @ target).real)


class QramApparatus:
    """Noisy QRAM query as an EF apparatus acting on address plus bus.

    Sampled use: :meth:`apply_sampled` runs one Pauli-noise trajectory per
    state with a fresh router tree and then measures (discards) the routers.
    Exact use: :meth:`exact_channel` returns the Kraus form (depth at most 2).
    """

    def __init__(self, spec: QramSpec):
        self.spec = spec
        self.circuit = build_bucket_brigade(spec)
        self.dim = 2**spec.query_qubits
        self.internal_dim = 2**spec.n_routers
        self._nq = self.circuit.num_qubits

    def ideal_unitary(self) -> np.ndarray:
        return query_unitary(self.spec)

    def apply_sampled(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        B, a, d, b = states.shape
        if b != 1:
            raise ValueError("the QRAM apparatus expects the active register to be the last segment")
        R = self.internal_dim
        psi = np.zeros((B, a, d * R), dtype=complex)
        psi[:, :, ::R] = states[:, :, :, 0]
        nq = self._nq
        local = np.arange(d * R)
        p = self.spec.p_dep
        for perm in self.circuit.permutations:
            psi = psi[:, :, perm]
            if p > 0:
                psi = self._pauli_layer(psi, local, nq, p, rng)
        # discard routers by measuring them
        psi = psi.reshape(B, a, d, R)
        probs = np.einsum("xadr,xadr->xr", psi, psi.conj()).real
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(B) * cdf[:, -1]
        pick = np.minimum((u[:, None] > cdf).sum(axis=1), R - 1)
        out = psi[np.arange(B), :, :, pick]
        norm = np.sqrt(probs[np.arange(B), pick])
        return (out / norm[:, None, None])[..., None]

    @staticmethod
    def _pauli_layer(psi, local, nq, p, rng):
        B = psi.shape[0]
        kinds = rng.choice(4, size=(B, nq), p=[1 - p, p / 3, p / 3, p / 3])  # I, X, Y, Z
        if not kinds.any():
            return psi
        weights = 1 << (nq - 1 - np.arange(nq))
        xmask = ((kinds == 1) | (kinds == 2)) @ weights
        zmask = ((kinds == 3) | (kinds == 2)) @ weights
        hit = np.nonzero(xmask | zmask)[0]
        sub = psi[hit]
        if xmask[hit].any():
            idx = local[None, :] ^ xmask[hit, None]
            sub = np.take_along_axis(sub, np.broadcast_to(idx[:, None, :], sub.shape), axis=2)
        par = _parity(local[None, :] & zmask[hit, None])
        # Y = i X Z; the factor i is a global phase of the trajectory
        sub = sub * (1 - 2 * par)[:, None, :]
        psi[hit] = sub
        return psi

    def exact_channel(self) -> KrausChannel:
        return self._exact

    @cached_property
    def _exact(self) -> KrausChannel:
        if self.spec.n > EXACT_CHANNEL_MAX_DEPTH:
            raise ValueError(f"exact QRAM channel is limited to depth {EXACT_CHANNEL_MAX_DEPTH}")
        d, R = self.dim, self.internal_dim
        # evolve |i><j| (x) |0><0|_routers for all i, j at once
        basis = np.zeros((d, d, d * R, d * R), dtype=complex)
        for i in range(d):
            for j in range(d):
                basis[i, j, i * R, j * R] = 1.0
        out = _evolve_density(self.circuit, basis.reshape(d * d, d * R, d * R))
        reduced = np.einsum("narbr->nab", out.reshape(d * d, d, R, d, R))
        # superoperator column (i, j) is vec(E(|i><j|))
        s = reduced.reshape(d * d, d * d).T
        return kraus_from_superoperator(s)


def _parity(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    out = np.zeros_like(x)
    while np.any(x):
        out ^= x & 1
        x >>= 1
    return out


def noisy_query_channel(spec: QramSpec) -> QramApparatus:
    return QramApparatus(spec)


def ideal_query_fidelity(spec: QramSpec, psi_address=None) -> float:
    """Fidelity of the noiseless circuit's output (routers discarded) with the ideal query."""
    ideal = QramSpec(spec.n, spec.data, 0.0)
    circuit = build_bucket_brigade(ideal)
    psi = address_input(ideal, psi_address)
    full = np.kron(psi, np.eye(2**ideal.n_routers, dtype=complex)[0])
    out = full
    for perm in circuit.permutations:
        out = out[perm]
    d, r = psi.size, 2**ideal.n_routers
    m = out.reshape(d, r)
    rho = m @ m.conj().T
    target = query_unitary(ideal) @ psi
    return float(np.vdot(target, rho @ target).real)


def qram_ef_config(spec: QramSpec, log_T: int, samples: int = 10_000, seed: int = 0,
                   backend: str = "trajectory", threads: int = 1) -> EfConfig:
    app = QramApparatus(spec)
    psi = address_input(spec)
    phi = np.zeros(app.dim, dtype=complex)
    phi[0] = 1.0
    return EfConfig(log_T, psi, phi, app.ideal_unitary(), app, backend=backend,
                    trajectory_samples=samples, seed=seed, threads=threads)


@dataclass(frozen=True)
class QramRow:
    experiment_id: str
    n: int
    p_dep: float
    log_T: int
    samples: int
    seed: int
    infidelity: float
    infidelity_err: float
    fail_prob: float
    fail_prob_err: float

    def as_list(self) -> list[str]:
        return [self.experiment_id, str(self.n), repr(self.p_dep), str(self.log_T), str(self.samples),
                str(self.seed), f"{self.infidelity:.10e}", f"{self.infidelity_err:.10e}",
                f"{self.fail_prob:.10e}", f"{self.fail_prob_err:.10e}"]


def qram_ef_experiment(spec: QramSpec, log_T_list, samples: int, seed: int, backend: str = "trajectory",
                       threads: int = 1, experiment_id: str = "qram_ef") -> list[QramRow]:
    rows = []
    for log_T in log_T_list:
        cfg = qram_ef_config(spec, log_T, samples, seed, backend, threads)
        res = run(cfg)
        rows.append(QramRow(
            experiment_id, spec.n, spec.p_dep, log_T,
            samples if backend == "trajectory" else 0, seed,
            res.infidelity, res.stat_error or 0.0,
            res.fail_prob, res.success_err or 0.0,
        ))
    return rows


def rows_to_csv(rows) -> str:
    """CSV text for :class:`QramRow` or :class:`AncillaRow` lists."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANCILLA_CSV_FIELDS if rows and isinstance(rows[0], AncillaRow) else CSV_FIELDS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def loglog_slope(rows) -> float:
    """Slope of ``log2(1-F)`` against ``log_T``."""
    xs = [2.0**r.log_T for r in rows]
    ys = [r.infidelity for r in rows]
    return fit_power_law(xs, ys)[0]


ANCILLA_CSV_FIELDS = (
    "experiment_id", "n", "p_dep", "log_T", "eps_prime", "pauli", "n_locations",
    "infidelity", "fail_prob", "infidelity_no_ancilla_error", "fail_prob_no_ancilla_error",
)


@dataclass(frozen=True)
class AncillaRow:
    experiment_id: str
    n: int
    p_dep: float
    log_T: int
    eps_prime: float
    pauli: str
    n_locations: int
    infidelity: float
    fail_prob: float
    infidelity_no_ancilla_error: float
    fail_prob_no_ancilla_error: float

    def as_list(self) -> list[str]:
        return [self.experiment_id, str(self.n), repr(self.p_dep), str(self.log_T), repr(self.eps_prime),
                self.pauli, str(self.n_locations), f"{self.infidelity:.10e}", f"{self.fail_prob:.10e}",
                f"{self.infidelity_no_ancilla_error:.10e}", f"{self.fail_prob_no_ancilla_error:.10e}"]


def qram_ancilla_error_experiment(spec: QramSpec, log_T_list, eps_prime: float, pauli: str = "X",
                                  threads: int = 1, experiment_id: str = "qram_ancilla",
                                  reports: dict | None = None) -> list[AncillaRow]:
    """First-order ancilla-fault expansion around the exact EF-wrapped QRAM (depth at most 2).

    When ``reports`` is a dict, the full :class:`PerturbativeReport` of each
    ``log_T >= 1`` is stored in it under that key.
    """
    if pauli not in ("X", "Z"):
        raise ValueError("pauli must be X or Z")
    noise = AncillaNoiseParams(eps_prime=eps_prime)
    rows = []
    for log_T in log_T_list:
        cfg = qram_ef_config(spec, log_T, backend="exact")
        if log_T == 0:
            res = run(cfg)
            rows.append(AncillaRow(experiment_id, spec.n, spec.p_dep, 0, eps_prime, pauli, 0,
                                   res.infidelity, res.fail_prob, res.infidelity, res.fail_prob))
            continue
        rep = perturbative_expansion(cfg, noise, (pauli,), threads=threads)
        if reports is not None:
            reports[log_T] = rep
        rows.append(AncillaRow(experiment_id, spec.n, spec.p_dep, log_T, eps_prime, pauli, rep.n_locations,
                               rep.infidelity_first_order, rep.fail_prob_first_order,
                               rep.base_infidelity, rep.base_fail_prob))
    return rows
