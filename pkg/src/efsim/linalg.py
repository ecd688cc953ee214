"""Dense complex linear algebra over multi-qubit registers.

Ordering convention used everywhere in the package: registers are laid out
as ``control | flag | memory | active | apparatus`` and qubit 0 is the most
significant bit of a basis index (Kronecker products take the left factor as
most significant).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

MAX_QUBITS = 24

HERMITIAN_TOL = 1e-10
PSD_TOL = -1e-9
NORM_TOL = 1e-10
UNITARY_TOL = 1e-10

SEGMENT_ORDER = ("control", "flag", "memory", "active", "apparatus")


class LayoutError(ValueError):
    """Raised for unknown segments, overlapping targets or oversized layouts."""


@dataclass(frozen=True)
class QubitLayout:
    """Named, disjoint register segments covering ``[0, total_qubits)``."""

    segments: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [name for name, _ in self.segments]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate segment names in {names}")
        for name, count in self.segments:
            if count < 0:
                raise LayoutError(f"segment {name!r} has negative size")
        if self.total_qubits > MAX_QUBITS:
            raise LayoutError(
                f"{self.total_qubits} qubits exceeds the dense-simulation cap of {MAX_QUBITS}"
            )

    @classmethod
    def build(cls, **counts: int) -> "QubitLayout":
        """Build a layout from keyword counts, ordered by the global convention.

        Unknown names are appended after the standard segments in keyword order.
        Zero-sized segments are kept so that lookups by name always succeed.
        """
        ordered = [(name, counts[name]) for name in SEGMENT_ORDER if name in counts]
        ordered += [(k, v) for k, v in counts.items() if k not in SEGMENT_ORDER]
        return cls(tuple(ordered))

    @property
    def total_qubits(self) -> int:
        return sum(count for _, count in self.segments)

    @property
    def dim(self) -> int:
        return 2**self.total_qubits

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.segments)

    def size(self, name: str) -> int:
        return len(self.indices(name))

    def indices(self, name: str) -> tuple[int, ...]:
        start = 0
        for seg, count in self.segments:
            if seg == name:
                return tuple(range(start, start + count))
            start += count
        raise LayoutError(f"unknown segment {name!r}; layout has {self.names}")

    def qubits(self, names: Iterable[str]) -> tuple[int, ...]:
        out: list[int] = []
        for name in names:
            out.extend(self.indices(name))
        return tuple(out)

    def sub(self, names: Iterable[str]) -> "QubitLayout":
        keep = set(names)
        for name in keep:
            self.indices(name)
        return QubitLayout(tuple((n, c) for n, c in self.segments if n in keep))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Operator:
    """Square complex matrix, optionally flagged unitary."""

    matrix: np.ndarray
    unitary: bool = False

    def __post_init__(self):
        m = _frozen(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"operator must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("operator has non-finite entries")
        if self.unitary and not is_unitary(m):
            raise ValueError("operator flagged unitary but U^dag U != I")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_qubits(self) -> int:
        return _num_qubits(self.dim)

    @property
    def dag(self) -> "Operator":
        return Operator(self.matrix.conj().T, self.unitary)

    def __matmul__(self, other: "Operator") -> "Operator":
        return Operator(self.matrix @ other.matrix, self.unitary and other.unitary)


@dataclass(frozen=True)
class PureState:
    """State vector over a layout. ``normalized`` marks a unit-norm state."""

    amplitudes: np.ndarray
    layout: QubitLayout | None = None
    normalized: bool = True

    def __post_init__(self):
        a = _frozen(self.amplitudes).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise ValueError("state has non-finite amplitudes")
        layout = self.layout or QubitLayout((("memory", _num_qubits(a.size)),))
        if layout.dim != a.size:
            raise LayoutError(f"{a.size} amplitudes do not fit layout of dim {layout.dim}")
        if self.normalized and abs(np.vdot(a, a).real - 1.0) > NORM_TOL:
            raise ValueError(f"state flagged normalized has norm^2 {np.vdot(a, a).real}")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "layout", layout)

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalize(self) -> "PureState":
        n = self.norm()
        if n == 0:
            raise ValueError("cannot normalize the zero vector")
        return PureState(self.amplitudes / n, self.layout, True)

    def projector(self) -> "DensityMatrix":
        a = self.amplitudes
        return DensityMatrix(np.outer(a, a.conj()), self.layout, self.normalized)


@dataclass(frozen=True)
class DensityMatrix:
    """Density matrix over a layout; unnormalized states are allowed (``normalized=False``)."""

    entries: np.ndarray
    layout: QubitLayout | None = None
    normalized: bool = True

    def __post_init__(self):
        m = _frozen(self.entries)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"density matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("density matrix has non-finite entries")
        layout = self.layout or QubitLayout((("memory", _num_qubits(m.shape[0])),))
        if layout.dim != m.shape[0]:
            raise LayoutError(f"matrix of dim {m.shape[0]} does not fit layout of dim {layout.dim}")
        scale = max(1.0, float(np.abs(m).max(initial=0.0)))
        if np.abs(m - m.conj().T).max(initial=0.0) > HERMITIAN_TOL * scale:
            raise ValueError("density matrix is not Hermitian")
        if self.normalized and abs(np.trace(m).real - 1.0) > NORM_TOL:
            raise ValueError(f"density matrix flagged normalized has trace {np.trace(m).real}")
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "layout", layout)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def trace(self) -> float:
        return float(np.trace(self.entries).real)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries).min())

    def is_psd(self) -> bool:
        return self.min_eigenvalue() >= PSD_TOL

    def normalize(self) -> "DensityMatrix":
        tr = self.trace()
        if tr <= 0:
            raise ValueError("cannot normalize a zero-trace density matrix")
        return DensityMatrix(self.entries / tr, self.layout, True)

    def expectation(self, state: PureState | np.ndarray) -> float:
        """Return ``<v|rho|v>`` for a vector ``v`` (not divided by the trace)."""
        v = state.amplitudes if isinstance(state, PureState) else np.asarray(state, dtype=complex)
        return float(np.vdot(v, self.entries @ v).real)

    def fidelity(self, state: PureState | np.ndarray) -> float:
        """Fidelity of the normalized state with a pure target, ``<v|rho|v> / Tr rho``."""
        return self.expectation(state) / self.trace()


def _num_qubits(dim: int) -> int:
    n = int(dim).bit_length() - 1
    if dim < 1 or 2**n != dim:
        raise LayoutError(f"dimension {dim} is not a power of two")
    return n


def is_unitary(m: np.ndarray, tol: float = UNITARY_TOL) -> bool:
    m = np.asarray(m)
    return bool(np.linalg.norm(m.conj().T @ m - np.eye(m.shape[0]), ord=2) <= tol)


def op_norm(m: np.ndarray) -> float:
    """Spectral (operator) norm."""
    return float(np.linalg.norm(np.asarray(m), ord=2))


Element = Union[Operator, PureState, DensityMatrix]


def _concat_layouts(a: QubitLayout, b: QubitLayout) -> QubitLayout:
    names_a = set(a.names)
    segs = list(a.segments)
    for name, count in b.segments:
        segs.append((name if name not in names_a else f"{name}_2", count))
    return QubitLayout(tuple(segs))


def tensor_product(a: Element, b: Element) -> Element:
    """Kronecker product with the left factor as the most significant qubits."""
    if type(a) is not type(b):
        raise TypeError(f"cannot tensor {type(a).__name__} with {type(b).__name__}")
    if isinstance(a, Operator):
        if a.num_qubits + b.num_qubits > MAX_QUBITS:
            raise LayoutError("tensor product exceeds the dense-simulation cap")
        return Operator(np.kron(a.matrix, b.matrix), a.unitary and b.unitary)
    layout = _concat_layouts(a.layout, b.layout)
    if isinstance(a, PureState):
        return PureState(np.kron(a.amplitudes, b.amplitudes), layout, a.normalized and b.normalized)
    return DensityMatrix(np.kron(a.entries, b.entries), layout, a.normalized and b.normalized)


def partial_trace(rho: DensityMatrix, keep: Sequence[str]) -> DensityMatrix:
    """Trace out every segment not listed in ``keep``."""
    layout = rho.layout
    keep_q = layout.qubits(keep)
    out = trace_out(rho.entries, layout.total_qubits, keep_q)
    sub = QubitLayout(tuple((n, c) for n, c in layout.segments if n in set(keep)))
    return DensityMatrix(out, sub, rho.normalized)


def trace_out(rho: np.ndarray, n: int, keep: Sequence[int]) -> np.ndarray:
    """Reduce a ``2^n x 2^n`` matrix to the qubits in ``keep`` (kept in ascending order)."""
    keep = sorted(keep)
    drop = [q for q in range(n) if q not in keep]
    t = rho.reshape((2,) * (2 * n))
    perm = keep + drop + [n + q for q in keep] + [n + q for q in drop]
    t = t.transpose(perm)
    dk, dd = 2 ** len(keep), 2 ** len(drop)
    t = t.reshape(dk, dd, dk, dd)
    return np.einsum("ajbj->ab", t)


def apply_to_axes(tensor: np.ndarray, matrix: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Contract ``matrix`` (acting on ``len(axes)`` qubits) into the given tensor axes.

    ``tensor`` has one axis of size 2 per qubit, possibly after leading batch
    axes; the result keeps the axis order of the input.
    """
    k = len(axes)
    m = matrix.reshape((2,) * (2 * k))
    out = np.tensordot(m, tensor, axes=(list(range(k, 2 * k)), list(axes)))
    return np.moveaxis(out, list(range(k)), list(axes))


def _check_targets(targets: Sequence[int], n: int) -> None:
    if len(set(targets)) != len(targets):
        raise LayoutError(f"overlapping targets {list(targets)}")
    for q in targets:
        if not 0 <= q < n:
            raise LayoutError(f"target qubit {q} outside register of {n} qubits")


def apply_on_subsystem(op: Operator | np.ndarray, target, state):
    """Apply ``op`` to the qubits ``target`` (segment name(s) or qubit indices).

    Works on ``PureState`` (``op |v>``) and ``DensityMatrix`` (``op rho op^dag``).
    """
    m = op.matrix if isinstance(op, Operator) else np.asarray(op, dtype=complex)
    layout = state.layout
    n = layout.total_qubits
    if isinstance(target, str):
        targets = layout.indices(target)
    elif target and isinstance(target[0], str):
        targets = layout.qubits(target)
    else:
        targets = tuple(int(q) for q in target)
    _check_targets(targets, n)
    if m.shape != (2 ** len(targets),) * 2:
        raise LayoutError(f"operator of dim {m.shape[0]} does not match {len(targets)} target qubits")
    if isinstance(state, PureState):
        t = apply_to_axes(state.amplitudes.reshape((2,) * n), m, targets)
        return PureState(t.reshape(-1), layout, state.normalized)
    t = state.entries.reshape((2,) * (2 * n))
    t = apply_to_axes(t, m, targets)
    t = apply_to_axes(t, m.conj(), [n + q for q in targets])
    return DensityMatrix(t.reshape(state.dim, state.dim), layout, state.normalized)


def basis_state(bits: str, layout: QubitLayout | None = None) -> PureState:
    v = np.zeros(2 ** len(bits), dtype=complex)
    v[int(bits, 2)] = 1.0
    return PureState(v, layout)


# Common single-qubit matrices.
I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
PAULIS = {"I": I2, "X": X, "Y": Y, "Z": Z}

KET0 = np.array([1, 0], dtype=complex)
KET1 = np.array([0, 1], dtype=complex)
KET_PLUS = np.array([1, 1], dtype=complex) / np.sqrt(2)
KET_MINUS = np.array([1, -1], dtype=complex) / np.sqrt(2)

STATE_PRESETS = {
    "0": KET0,
    "1": KET1,
    "+": KET_PLUS,
    "-": KET_MINUS,
    "+i": np.array([1, 1j], dtype=complex) / np.sqrt(2),
    "-i": np.array([1, -1j], dtype=complex) / np.sqrt(2),
}


def preset_state(name: str, num_qubits: int = 1) -> PureState:
    """Product state of ``num_qubits`` copies of a named single-qubit preset."""
    if name not in STATE_PRESETS:
        raise KeyError(f"unknown state preset {name!r}; choose from {sorted(STATE_PRESETS)}")
    v = np.ones(1, dtype=complex)
    for _ in range(num_qubits):
        v = np.kron(v, STATE_PRESETS[name])
    return PureState(v)


def random_state(dim: int, rng: np.random.Generator) -> PureState:
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return PureState(v / np.linalg.norm(v))


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary via QR with phase correction."""
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_density(num_qubits: int, rng: np.random.Generator) -> DensityMatrix:
    d = 2**num_qubits
    g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = g @ g.conj().T
    return DensityMatrix(rho / np.trace(rho).real, QubitLayout((("memory", num_qubits),)))
