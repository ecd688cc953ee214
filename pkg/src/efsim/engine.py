"""Gate-based error filtration circuit: construction and simulation.

The register order is control | flag | memory | active, control qubit 0 being
the most significant bit. Branch ``t`` is selected by the control register
holding the binary encoding of ``t``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .channels import KrausChannel
from .linalg import H, PAULIS, DensityMatrix, LayoutError, PureState, QubitLayout

EXACT_MAX_QUBITS = 12
FAULT_KINDS = ("pre", "mid", "post")
FAULT_SEGMENTS = ("control", "flag", "memory")
BACKENDS = ("exact", "trajectory")


class NoAcceptanceError(RuntimeError):
    """Raised when no sampled trajectory survives post-selection."""


@runtime_checkable
class TrajectoryApparatus(Protocol):
    """An apparatus that can only be sampled, not written as an explicit channel.

    ``apply_sampled`` receives normalized states of shape ``(B, a, d, b)``
    where ``d`` is the active-register dimension and must return states of
    the same shape, normalized, after one sampled realization of the noisy
    apparatus per row.
    """

    dim: int

    def apply_sampled(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class FaultSpec:
    """A Pauli fault at a fixed place in the circuit.

    ``kind`` is ``pre``/``mid``/``post`` relative to branch ``branch``: just
    before its first controlled SWAP, during the apparatus call, or just after
    its second controlled SWAP. ``probability`` below 1 inserts a Pauli
    channel instead of a deterministic Pauli.
    """

    kind: str
    branch: int
    segment: str = "control"
    index: int = 0
    pauli: str = "X"
    probability: float = 1.0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"fault kind must be one of {FAULT_KINDS}, got {self.kind!r}")
        if self.segment not in FAULT_SEGMENTS:
            raise ValueError(f"faults live on {FAULT_SEGMENTS}, not {self.segment!r}")
        if self.pauli not in ("X", "Y", "Z"):
            raise ValueError(f"unknown Pauli {self.pauli!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"fault probability {self.probability} outside [0, 1]")
        if self.branch < 0 or self.index < 0:
            raise ValueError("fault branch and index must be non-negative")

    @property
    def label(self) -> str:
        return f"{self.segment}[{self.index}]:{self.kind}({self.branch})"

    def with_(self, **kw) -> "FaultSpec":
        return replace(self, **kw)


def _vector(state, name: str) -> np.ndarray:
    v = state.amplitudes if isinstance(state, PureState) else np.asarray(state, dtype=complex).reshape(-1)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or abs(n - 1.0) > 1e-10:
        raise ValueError(f"{name} must be a normalized state (norm {n})")
    return np.array(v, dtype=complex)


@dataclass(frozen=True)
class EfConfig:
    """One EF run. ``log_T = 0`` means the bare apparatus without EF."""

    log_T: int
    psi: np.ndarray
    phi: np.ndarray
    ideal_U: np.ndarray
    channel: KrausChannel | TrajectoryApparatus
    backend: str = "exact"
    trajectory_samples: int = 10_000
    seed: int = 0
    flag_qubits: bool = False
    faults: tuple[FaultSpec, ...] = ()
    threads: int = 1

    def __post_init__(self):
        psi = _vector(self.psi, "psi")
        phi = _vector(self.phi, "phi")
        u = np.asarray(self.ideal_U.matrix if hasattr(self.ideal_U, "matrix") else self.ideal_U, dtype=complex)
        d = self.channel.dim
        if psi.size != d or phi.size != d or u.shape != (d, d):
            raise LayoutError(f"psi, phi and ideal_U must match the apparatus dimension {d}")
        if self.log_T < 0:
            raise ValueError("log_T must be non-negative")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.trajectory_samples < 1:
            raise ValueError("trajectory_samples must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "ideal_U", u)
        object.__setattr__(self, "faults", tuple(self.faults))
        layout = self.layout
        for f in self.faults:
            if f.branch >= self.T:
                raise ValueError(f"fault {f.label}: branch must be below T={self.T}")
            if f.index >= _count(layout, f.segment):
                raise ValueError(f"fault {f.label}: no such qubit in segment {f.segment!r}")

    @property
    def T(self) -> int:
        return 2**self.log_T

    @property
    def memory_qubits(self) -> int:
        return int(self.channel.dim).bit_length() - 1

    @property
    def layout(self) -> QubitLayout:
        m = self.memory_qubits
        if self.log_T == 0:
            return QubitLayout.build(memory=m)
        return QubitLayout.build(
            control=self.log_T,
            flag=self.log_T if self.flag_qubits else 0,
            memory=m,
            active=m,
        )

    @property
    def target(self) -> np.ndarray:
        return self.ideal_U @ self.psi

    def with_(self, **kw) -> "EfConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class EfResult:
    rho_unnormalized: DensityMatrix
    success_prob: float
    fidelity: float
    stat_error: float | None = None
    flag_reject_prob: float | None = None
    success_err: float | None = None
    samples: int | None = None
    backend: str = "exact"

    @property
    def infidelity(self) -> float:
        return 1.0 - self.fidelity

    @property
    def fail_prob(self) -> float:
        return max(0.0, 1.0 - self.success_prob)


# -- gate list -------------------------------------------------------------


@dataclass(frozen=True)
class Gate:
    """One circuit element. ``attrs`` holds name-specific parameters as sorted pairs."""

    name: str
    targets: tuple[int, ...]
    controls: tuple[int, ...] = ()
    attrs: tuple[tuple[str, object], ...] = ()

    def attr(self, key: str, default=None):
        return dict(self.attrs).get(key, default)

    def to_line(self) -> str:
        parts = [self.name, "targets=" + ",".join(map(str, self.targets))]
        if self.controls:
            parts.append("controls=" + ",".join(map(str, self.controls)))
        parts += [f"{k}={v}" for k, v in self.attrs]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "Gate":
        name, *fields_ = line.split()
        kv = dict(f.split("=", 1) for f in fields_)
        ints = lambda s: tuple(int(x) for x in s.split(",")) if s else ()
        targets = ints(kv.pop("targets", ""))
        controls = ints(kv.pop("controls", ""))
        attrs = []
        for k, v in sorted(kv.items()):
            attrs.append((k, _parse_scalar(v)))
        return cls(name, targets, controls, tuple(attrs))


def _parse_scalar(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def _gate(name, targets, controls=(), **attrs) -> Gate:
    return Gate(name, tuple(targets), tuple(controls), tuple(sorted(attrs.items())))


@dataclass(frozen=True)
class GateList:
    layout: QubitLayout
    gates: tuple[Gate, ...]

    def __iter__(self):
        return iter(self.gates)

    def __len__(self) -> int:
        return len(self.gates)

    def count(self, name: str) -> int:
        return sum(g.name == name for g in self.gates)

    def dumps(self) -> str:
        header = "# layout " + " ".join(f"{n}={c}" for n, c in self.layout.segments)
        return "\n".join([header] + [g.to_line() for g in self.gates]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "GateList":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# layout"):
            raise ValueError("gate list text must start with a '# layout' header")
        counts = dict(tok.split("=") for tok in lines[0].split()[2:])
        layout = QubitLayout(tuple((k, int(v)) for k, v in counts.items()))
        return cls(layout, tuple(Gate.from_line(ln) for ln in lines[1:] if not ln.startswith("#")))


def _fault_gates(faults: Sequence[FaultSpec], layout: QubitLayout, kind: str, t: int) -> list[Gate]:
    out = []
    for f in faults:
        if f.kind == kind and f.branch == t:
            q = layout.indices(f.segment)[f.index]
            out.append(_gate("PAULI", [q], pauli=f.pauli, prob=float(f.probability)))
    return out


def build_ef_circuit(config: EfConfig) -> GateList:
    layout = config.layout
    if layout.total_qubits > 24:
        raise LayoutError(f"circuit needs {layout.total_qubits} qubits; cap is 24")
    faults = config.faults
    if config.log_T == 0:
        mem = layout.indices("memory")
        gates = _fault_gates(faults, layout, "pre", 0)
        gates.append(_gate("CHANNEL", mem, slot=0))
        gates += _fault_gates(faults, layout, "mid", 0) + _fault_gates(faults, layout, "post", 0)
        return GateList(layout, tuple(gates))

    ctrl = layout.indices("control")
    flags = layout.indices("flag")
    mem = layout.indices("memory")
    act = layout.indices("active")
    gates = [_gate("H", [c]) for c in ctrl]
    gates += [_gate("CNOT", [f], [c]) for c, f in zip(ctrl, flags)]
    for t in range(config.T):
        gates += _fault_gates(faults, layout, "pre", t)
        gates.append(_gate("MCSWAP", mem + act, ctrl, ctrl_state=t))
        gates.append(_gate("CHANNEL", act, slot=t))
        gates += _fault_gates(faults, layout, "mid", t)
        gates.append(_gate("MCSWAP", mem + act, ctrl, ctrl_state=t))
        gates += _fault_gates(faults, layout, "post", t)
    gates += [_gate("CNOT", [f], [c]) for c, f in zip(ctrl, flags)]
    gates += [_gate("H", [c]) for c in ctrl]
    gates.append(_gate("POSTSELECT", ctrl + flags, value=0))
    return GateList(layout, tuple(gates))


# -- permutations shared by both backends -----------------------------------


@lru_cache(maxsize=256)
def _permutation(n: int, name: str, targets: tuple[int, ...], controls: tuple[int, ...], ctrl_state: int) -> np.ndarray:
    """Basis-index permutation for CNOT or a multi-controlled register SWAP."""
    idx = np.arange(2**n)
    bits = lambda q: (idx >> (n - 1 - q)) & 1
    if name == "CNOT":
        (c,), (t,) = controls, targets
        return idx ^ (bits(c) << (n - 1 - t))
    half = len(targets) // 2
    active = np.ones(2**n, dtype=bool)
    for k, c in enumerate(controls):
        want = (ctrl_state >> (len(controls) - 1 - k)) & 1
        active &= bits(c) == want
    out = idx.copy()
    for a, b in zip(targets[:half], targets[half:]):
        ba, bb = bits(a), bits(b)
        diff = (ba ^ bb) & active
        out ^= (diff << (n - 1 - a)) | (diff << (n - 1 - b))
    return out


def _count(layout: QubitLayout, name: str) -> int:
    return dict(layout.segments).get(name, 0)


def _perm_for(gate: Gate, n: int) -> np.ndarray:
    return _permutation(n, gate.name, gate.targets, gate.controls, int(gate.attr("ctrl_state", 0)))


def _apparatus_channel(config: EfConfig) -> KrausChannel:
    ch = config.channel
    if isinstance(ch, KrausChannel):
        return ch
    exact = getattr(ch, "exact_channel", None)
    if exact is None:
        raise ValueError("exact backend needs a Kraus channel; this apparatus can only be sampled")
    return exact()


# -- exact backend --------------------------------------------------------


def _rho_1q(rho: np.ndarray, g: np.ndarray, q: int, n: int) -> np.ndarray:
    a, b = 2**q, 2 ** (n - q - 1)
    r = rho.reshape(a, 2, b, a, 2, b)
    r = np.einsum("ij,xjyzwv->xiyzwv", g, r)
    r = np.einsum("xiyzwv,kw->xiyzkv", r, g.conj())
    return r.reshape(rho.shape)


def _rho_channel(rho: np.ndarray, ch: KrausChannel, lo: int, hi: int, n: int) -> np.ndarray:
    a, d, b = 2**lo, 2 ** (hi - lo), 2 ** (n - hi)
    r = rho.reshape(a, d, b, a, d, b)
    if len(ch.ops) > d:
        s = ch.superoperator().reshape(d, d, d, d)
        out = np.einsum("ijkl,xkyzlw->xiyzjw", s, r)
    else:
        out = np.zeros_like(r)
        for k in ch.ops:
            t = np.einsum("ij,xjyzwv->xiyzwv", k, r)
            out += np.einsum("xiyzwv,kw->xiyzkv", t, k.conj())
    return out.reshape(rho.shape)


def _contiguous(qubits: Sequence[int]) -> tuple[int, int]:
    lo, hi = min(qubits), max(qubits) + 1
    if tuple(qubits) != tuple(range(lo, hi)):
        raise LayoutError("apparatus targets must be contiguous")
    return lo, hi


def run_exact(config: EfConfig) -> EfResult:
    """Full density-matrix simulation with exact post-selection."""
    circuit = build_ef_circuit(config)
    layout = circuit.layout
    n = layout.total_qubits
    if n > EXACT_MAX_QUBITS:
        raise LayoutError(f"exact backend is capped at {EXACT_MAX_QUBITS} qubits; circuit needs {n}")
    ch = _apparatus_channel(config)
    init = np.zeros(1, dtype=complex)
    init[0] = 1.0
    for name, count in layout.segments:
        if name == "memory":
            init = np.kron(init, config.psi)
        elif name == "active":
            init = np.kron(init, config.phi)
        else:
            z = np.zeros(2**count, dtype=complex)
            z[0] = 1.0
            init = np.kron(init, z)
    rho = np.outer(init, init.conj())
    post_qubits: tuple[int, ...] = ()
    for g in circuit:
        if g.name == "H":
            rho = _rho_1q(rho, H, g.targets[0], n)
        elif g.name in ("CNOT", "MCSWAP"):
            p = _perm_for(g, n)
            rho = rho[np.ix_(p, p)]
        elif g.name == "CHANNEL":
            lo, hi = _contiguous(g.targets)
            rho = _rho_channel(rho, ch, lo, hi, n)
        elif g.name == "PAULI":
            prob = float(g.attr("prob"))
            flipped = _rho_1q(rho, PAULIS[g.attr("pauli")], g.targets[0], n)
            rho = flipped if prob == 1.0 else (1 - prob) * rho + prob * flipped
        elif g.name == "POSTSELECT":
            post_qubits = g.targets
        else:
            raise ValueError(f"unknown gate {g.name}")
    return _finish_exact(rho, layout, post_qubits, config)


def _finish_exact(rho: np.ndarray, layout: QubitLayout, post_qubits, config: EfConfig) -> EfResult:
    dc = 2 ** (_count(layout, "control") + _count(layout, "flag"))
    dm = 2 ** _count(layout, "memory")
    da = 2 ** _count(layout, "active")
    r = rho.reshape(dc, dm, da, dc, dm, da)
    rho_mem = np.einsum("akbk->ab", r[0, :, :, 0, :, :])
    rho_mem = (rho_mem + rho_mem.conj().T) / 2
    flag_reject = None
    if _count(layout, "flag"):
        nf = _count(layout, "flag")
        diag = np.real(np.diagonal(rho)).reshape(2 ** _count(layout, "control"), 2**nf, dm * da)
        flag_reject = float(diag[:, 1:, :].sum())
    return _result(rho_mem, config, flag_reject)


def _result(rho_mem: np.ndarray, config: EfConfig, flag_reject=None, **extra) -> EfResult:
    p = float(np.trace(rho_mem).real)
    target = config.target
    num = float(np.vdot(target, rho_mem @ target).real)
    fid = num / p if p > 1e-300 else float("nan")
    mem_layout = QubitLayout.build(memory=config.memory_qubits)
    return EfResult(DensityMatrix(rho_mem, mem_layout, normalized=False), p, fid, flag_reject_prob=flag_reject, **extra)


# -- trajectory backend ------------------------------------------------------


def _psi_1q(psi: np.ndarray, g: np.ndarray, q: int, n: int) -> np.ndarray:
    bsz = psi.shape[0]
    r = psi.reshape(bsz, 2**q, 2, 2 ** (n - q - 1))
    return np.einsum("ij,xajb->xaib", g, r).reshape(psi.shape)


def sample_kraus(ch: KrausChannel, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Quantum-trajectory step: pick ``K_i`` with probability ``||K_i psi||^2`` and renormalize.

    ``states`` has shape ``(B, a, d, b)``.
    """
    branches = np.stack([np.einsum("ij,xajb->xaib", k, states) for k in ch.ops])
    weights = np.einsum("rxajb,rxajb->rx", branches, branches.conj()).real
    total = weights.sum(axis=0)
    cdf = np.cumsum(weights, axis=0) / total
    u = rng.random(states.shape[0])
    pick = np.minimum((u[None, :] > cdf).sum(axis=0), len(ch.ops) - 1)
    chosen = branches[pick, np.arange(states.shape[0])]
    return chosen / np.sqrt(weights[pick, np.arange(states.shape[0])])[:, None, None, None]


def _block_size(dim: int) -> int:
    # Fixed by the problem size only, so results never depend on worker count.
    return int(max(16, min(1024, 2**21 // max(dim, 1))))


@dataclass
class _Tally:
    """Running means and centered (co)moments of the per-trajectory numerator and denominator.

    Blocks are combined with the pairwise update of Chan et al., which keeps
    the variance accurate when it is tiny compared to the mean.
    """

    n: int = 0
    mean_num: float = 0.0
    mean_den: float = 0.0
    m2_num: float = 0.0
    m2_den: float = 0.0
    c_numden: float = 0.0
    rej: float = 0.0
    rho: np.ndarray | None = None

    @classmethod
    def from_samples(cls, num: np.ndarray, den: np.ndarray, rej: float, rho: np.ndarray) -> "_Tally":
        mn, md = float(num.mean()), float(den.mean())
        dn, dd = num - mn, den - md
        return cls(num.size, mn, md, float(dn @ dn), float(dd @ dd), float(dn @ dd), rej, rho)

    def merge(self, o: "_Tally") -> None:
        if self.n == 0:
            self.__dict__.update(o.__dict__)
            self.rho = o.rho.copy()
            return
        n = self.n + o.n
        dn = o.mean_num - self.mean_num
        dd = o.mean_den - self.mean_den
        w = self.n * o.n / n
        self.m2_num += o.m2_num + dn * dn * w
        self.m2_den += o.m2_den + dd * dd * w
        self.c_numden += o.c_numden + dn * dd * w
        self.mean_num += dn * o.n / n
        self.mean_den += dd * o.n / n
        self.n = n
        self.rej += o.rej
        self.rho = self.rho + o.rho


def _run_block(config: EfConfig, circuit: GateList, init: np.ndarray, size: int, block: int) -> _Tally:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(config.seed), block])))
    layout = circuit.layout
    n = layout.total_qubits
    psi = np.repeat(init[None, :], size, axis=0)
    post: tuple[int, ...] = ()
    ch = config.channel
    for g in circuit:
        if g.name == "H":
            psi = _psi_1q(psi, H, g.targets[0], n)
        elif g.name in ("CNOT", "MCSWAP"):
            psi = psi[:, _perm_for(g, n)]
        elif g.name == "CHANNEL":
            lo, hi = _contiguous(g.targets)
            shaped = psi.reshape(size, 2**lo, 2 ** (hi - lo), 2 ** (n - hi))
            if isinstance(ch, KrausChannel):
                shaped = sample_kraus(ch, shaped, rng)
            else:
                shaped = ch.apply_sampled(shaped, rng)
            psi = shaped.reshape(size, -1)
        elif g.name == "PAULI":
            prob = float(g.attr("prob"))
            hit = rng.random(size) < prob
            if hit.any():
                psi[hit] = _psi_1q(psi[hit], PAULIS[g.attr("pauli")], g.targets[0], n)
        elif g.name == "POSTSELECT":
            post = g.targets
    nc = _count(layout, "control")
    nf = _count(layout, "flag")
    dm = 2 ** _count(layout, "memory")
    da = 2 ** _count(layout, "active")
    r = psi.reshape(size, 2**nc, 2**nf, dm, da)
    kept = r[:, 0, 0]
    target = config.target
    overlap = np.einsum("m,xma->xa", target.conj(), kept)
    num = np.einsum("xa,xa->x", overlap, overlap.conj()).real
    den = np.einsum("xma,xma->x", kept, kept.conj()).real
    rej = float(np.einsum("xcfma,xcfma->", r[:, :, 1:], r[:, :, 1:].conj()).real) if nf else 0.0
    return _Tally.from_samples(num, den, rej, np.einsum("xma,xna->mn", kept, kept.conj()))


def run_trajectories(config: EfConfig) -> EfResult:
    """Monte-Carlo simulation with a ratio estimator for the post-selected fidelity.

    Post-selection is applied by projection, so each trajectory contributes
    a weight (its accepted norm) rather than a sampled accept/reject bit.
    Blocks of trajectories draw from streams keyed by ``(seed, block index)``
    and are merged in block order, so the output is identical for any
    number of worker threads.
    """
    circuit = build_ef_circuit(config)
    layout = circuit.layout
    init = np.zeros(1, dtype=complex)
    init[0] = 1.0
    for name, count in layout.segments:
        vec = {"memory": config.psi, "active": config.phi}.get(name)
        if vec is None:
            vec = np.zeros(2**count, dtype=complex)
            vec[0] = 1.0
        init = np.kron(init, vec)
    total = config.trajectory_samples
    bs = _block_size(layout.dim * getattr(config.channel, "internal_dim", 1))
    sizes = [min(bs, total - s) for s in range(0, total, bs)]
    work = lambda k: _run_block(config, circuit, init, sizes[k], k)
    threads = min(config.threads, len(sizes))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            tallies = list(pool.map(work, range(len(sizes))))
    else:
        tallies = [work(k) for k in range(len(sizes))]
    tot = _Tally()
    for t in tallies:
        tot.merge(t)
    if tot.mean_den <= 0.0:
        raise NoAcceptanceError(f"no trajectory survived post-selection ({tot.n} samples)")
    n = tot.n
    mean_den = tot.mean_den
    fid = tot.mean_num / mean_den  # equals the fidelity of the averaged accepted state
    ddof = max(n - 1, 1)
    var_num = tot.m2_num / ddof
    var_den = tot.m2_den / ddof
    cov = tot.c_numden / ddof
    var_f = (var_num - 2 * fid * cov + fid**2 * var_den) / (n * mean_den**2)
    rho_mem = tot.rho / n
    flag_reject = tot.rej / n if _count(layout, "flag") else None
    return _result(
        (rho_mem + rho_mem.conj().T) / 2,
        config,
        flag_reject,
        stat_error=float(np.sqrt(max(var_f, 0.0))),
        success_err=float(np.sqrt(max(var_den, 0.0) / n)),
        samples=n,
        backend="trajectory",
    )


def run(config: EfConfig) -> EfResult:
    return run_exact(config) if config.backend == "exact" else run_trajectories(config)


def run_with_faults(config: EfConfig, faults: Sequence[FaultSpec] | None = None) -> EfResult:
    """Run with the given faults (or those already in ``config``) on the configured backend."""
    if faults is not None:
        config = config.with_(faults=tuple(faults))
    return run(config)


def run_flagged(config: EfConfig) -> EfResult:
    """Run the flag-qubit variant: each control qubit gets a parity partner."""
    if config.log_T == 0:
        raise ValueError("flagged runs need at least one control qubit")
    return run(config.with_(flag_qubits=True))


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)
