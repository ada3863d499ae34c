"""Exact statevector simulation of the RY-encoded CRZ-block circuit.

Qubit 0 is the most significant bit of a basis-state index. All simulation
routines run on a stack of ``R`` independent rows at once (shape
``(R, 2, ..., 2)``), which is how parameter-shift evaluations and whole data
batches stay cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

RY, CRZ, H, SDG = "RY", "CRZ", "H", "SDG"
GATE_KINDS = (RY, CRZ, H, SDG)
PARAMETRIC = (RY, CRZ)
MAX_QUBITS = 12

# Two-term rule is exact for RY (generator eigenvalues +-1/2). CRZ has
# eigenvalues {0, +-1/2}, which needs the four-term rule.
_C_PLUS = (math.sqrt(2) + 1) / (4 * math.sqrt(2))
_C_MINUS = (math.sqrt(2) - 1) / (4 * math.sqrt(2))
SHIFT_RULES = {
    RY: ((math.pi / 2, 0.5), (-math.pi / 2, -0.5)),
    CRZ: (
        (math.pi / 2, _C_PLUS),
        (-math.pi / 2, -_C_PLUS),
        (3 * math.pi / 2, -_C_MINUS),
        (-3 * math.pi / 2, _C_MINUS),
    ),
}


class CircuitError(ValueError):
    pass


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Gate:
    kind: str
    target: int
    control: int | None = None
    angle: float = 0.0
    param_slot: int | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise CircuitError(f"unknown gate kind {self.kind!r}")
        if self.kind == CRZ:
            if self.control is None:
                raise CircuitError("CRZ needs a control qubit")
            if self.control == self.target:
                raise CircuitError(f"CRZ control and target are both {self.target}")
        elif self.control is not None:
            raise CircuitError(f"{self.kind} does not take a control qubit")
        if self.kind not in PARAMETRIC and self.param_slot is not None:
            raise CircuitError(f"{self.kind} has no angle to bind")
        object.__setattr__(self, "angle", float(self.angle))


@dataclass(frozen=True)
class Circuit:
    num_qubits: int
    gates: tuple[Gate, ...] = ()
    measure_z: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        object.__setattr__(self, "measure_z", tuple(int(q) for q in self.measure_z))
        if not 1 <= self.num_qubits <= MAX_QUBITS:
            raise CircuitError(f"num_qubits must be in [1, {MAX_QUBITS}], got {self.num_qubits}")
        for g in self.gates:
            for q in (g.target, g.control):
                if q is not None and not 0 <= q < self.num_qubits:
                    raise CircuitError(f"qubit {q} out of range for {self.num_qubits} qubits")
        for q in self.measure_z:
            if not 0 <= q < self.num_qubits:
                raise CircuitError(f"measured qubit {q} out of range")

    def slots(self) -> list[int]:
        return sorted({g.param_slot for g in self.gates if g.param_slot is not None})

    def bind(self, values: Sequence[float]) -> "Circuit":
        """Copy with every slot-bound angle replaced by ``values[slot]``."""
        gates = [
            replace(g, angle=float(values[g.param_slot])) if g.param_slot is not None else g
            for g in self.gates
        ]
        return replace(self, gates=tuple(gates))


# -- state handling ---------------------------------------------------------

def zero_state(num_qubits: int) -> np.ndarray:
    psi = np.zeros(2**num_qubits, dtype=np.complex128)
    psi[0] = 1.0
    return psi


def _num_qubits_of(state: np.ndarray) -> int:
    n = int(round(math.log2(state.size)))
    if 2**n != state.size:
        raise CircuitError(f"state length {state.size} is not a power of two")
    return n


def _index(n: int, fixed: dict[int, int]) -> tuple:
    return (slice(None),) + tuple(fixed.get(k, slice(None)) for k in range(n))


def _apply_rows(rows: np.ndarray, kind: str, target: int, control: int | None, angles) -> np.ndarray:
    """Apply one gate to every row of ``rows`` (shape ``(R, 2, ..., 2)``).

    ``angles`` is a scalar or a length-``R`` array.
    """
    R, n = rows.shape[0], rows.ndim - 1
    theta = np.broadcast_to(np.asarray(angles, dtype=np.float64), (R,))
    if kind == CRZ:
        out = rows.copy()
        t = theta.reshape((R,) + (1,) * (n - 2))
        out[_index(n, {control: 1, target: 0})] *= np.exp(-0.5j * t)
        out[_index(n, {control: 1, target: 1})] *= np.exp(0.5j * t)
        return out
    v = np.moveaxis(rows, 1 + target, 1)
    a0, a1 = v[:, 0], v[:, 1]
    if kind == RY:
        t = theta.reshape((R,) + (1,) * (n - 1))
        c, s = np.cos(t / 2), np.sin(t / 2)
        out = np.stack([c * a0 - s * a1, s * a0 + c * a1], axis=1)
    elif kind == H:
        r = 1 / math.sqrt(2)
        out = np.stack([r * (a0 + a1), r * (a0 - a1)], axis=1)
    elif kind == SDG:
        out = np.stack([a0, -1j * a1], axis=1)
    else:
        raise CircuitError(f"unknown gate kind {kind!r}")
    return np.moveaxis(out, 1, 1 + target)


def apply_gate(state: np.ndarray, gate: Gate) -> np.ndarray:
    """Return the state after ``gate``; the input array is left untouched."""
    state = np.asarray(state, dtype=np.complex128)
    n = _num_qubits_of(state)
    for q in (gate.target, gate.control):
        if q is not None and not 0 <= q < n:
            raise CircuitError(f"qubit {q} out of range for {n} qubits")
    rows = state.reshape((1,) + (2,) * n)
    return _apply_rows(rows, gate.kind, gate.target, gate.control, gate.angle).reshape(-1)


def _z_rows(rows: np.ndarray, qubits: Sequence[int]) -> np.ndarray:
    probs = np.abs(rows) ** 2
    n = rows.ndim - 1
    out = np.empty((rows.shape[0], len(qubits)))
    for m, q in enumerate(qubits):
        axes = tuple(1 + k for k in range(n) if k != q)
        pq = probs.sum(axis=axes) if axes else probs
        out[:, m] = pq[:, 0] - pq[:, 1]
    return out


def expectation_z(state: np.ndarray, qubit: int) -> float:
    state = np.asarray(state, dtype=np.complex128)
    n = _num_qubits_of(state)
    if not 0 <= qubit < n:
        raise CircuitError(f"qubit {qubit} out of range for {n} qubits")
    return float(_z_rows(state.reshape((1,) + (2,) * n), [qubit])[0, 0])


# -- circuit evaluation -----------------------------------------------------

def simulate_rows(circuit: Circuit, angles: np.ndarray) -> np.ndarray:
    """Run ``circuit`` once per row of ``angles`` (shape ``(R, len(gates))``).

    Column ``g`` overrides the angle of gate ``g``; non-parametric columns are
    ignored. Returns final states with shape ``(R, 2**Q)``.
    """
    n = circuit.num_qubits
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    R = angles.shape[0]
    rows = np.zeros((R, 2**n), dtype=np.complex128)
    rows[:, 0] = 1.0
    rows = rows.reshape((R,) + (2,) * n)
    for g, gate in enumerate(circuit.gates):
        rows = _apply_rows(rows, gate.kind, gate.target, gate.control, angles[:, g])
    return rows.reshape(R, 2**n)


def _gate_angles(circuit: Circuit) -> np.ndarray:
    return np.array([g.angle for g in circuit.gates], dtype=np.float64)


def expectations_rows(circuit: Circuit, angles: np.ndarray) -> np.ndarray:
    states = simulate_rows(circuit, angles)
    return _z_rows(states.reshape((states.shape[0],) + (2,) * circuit.num_qubits), circuit.measure_z)


def run_circuit(circuit: Circuit) -> np.ndarray:
    """<Z> of every measured qubit, starting from ``|0...0>``."""
    if not circuit.gates:
        return np.ones(len(circuit.measure_z))
    return expectations_rows(circuit, _gate_angles(circuit)[None, :])[0]


def final_state(circuit: Circuit) -> np.ndarray:
    if not circuit.gates:
        return zero_state(circuit.num_qubits)
    return simulate_rows(circuit, _gate_angles(circuit)[None, :])[0]


def param_shift_grad(circuit: Circuit, slot: int) -> np.ndarray:
    """d<Z_q>/d(slot) for every measured qubit via the parameter-shift rule.

    Gates sharing the slot contribute additively (product rule).
    """
    bound = [g for g, gate in enumerate(circuit.gates) if gate.param_slot == slot]
    if not bound:
        raise ParameterError(f"no gate is bound to slot {slot}")
    base = _gate_angles(circuit)
    rows, coeffs = [], []
    for g in bound:
        for shift, c in SHIFT_RULES[circuit.gates[g].kind]:
            row = base.copy()
            row[g] += shift
            rows.append(row)
            coeffs.append(c)
    values = expectations_rows(circuit, np.array(rows))
    return np.asarray(coeffs) @ values


def slot_jacobian(circuit: Circuit, slot_values: np.ndarray, slots: Sequence[int] | None = None):
    """Batched expectations and their parameter-shift Jacobian.

    ``slot_values`` has shape ``(B, S)``; row ``b`` binds slot ``s`` to
    ``slot_values[b, s]``. Returns ``E`` with shape ``(B, M)`` and ``J`` with
    shape ``(B, M, len(slots))`` where ``M`` is the number of measured qubits.
    """
    slot_values = np.atleast_2d(np.asarray(slot_values, dtype=np.float64))
    B = slot_values.shape[0]
    if slots is None:
        slots = list(range(slot_values.shape[1]))
    G = len(circuit.gates)
    base = np.tile(_gate_angles(circuit), (B, 1))
    gate_slot = [g.param_slot for g in circuit.gates]
    for g, s in enumerate(gate_slot):
        if s is not None:
            base[:, g] = slot_values[:, s]

    # Row plan: one unshifted row plus every (slot, gate, shift) combination.
    plan: list[tuple[int, int, float, float]] = []
    for si, s in enumerate(slots):
        bound = [g for g in range(G) if gate_slot[g] == s]
        if not bound:
            raise ParameterError(f"no gate is bound to slot {s}")
        for g in bound:
            for shift, c in SHIFT_RULES[circuit.gates[g].kind]:
                plan.append((si, g, shift, c))
    K = 1 + len(plan)
    angles = np.repeat(base[:, None, :], K, axis=1)
    for k, (_, g, shift, _) in enumerate(plan, start=1):
        angles[:, k, g] += shift
    values = expectations_rows(circuit, angles.reshape(B * K, G)).reshape(B, K, -1)
    E = values[:, 0, :]
    J = np.zeros((B, E.shape[1], len(slots)))
    for k, (si, _, _, c) in enumerate(plan, start=1):
        J[:, :, si] += c * values[:, k, :]
    return E, J


# -- the adapter's circuit --------------------------------------------------

def qwthn_theta_size(num_qubits: int, blocks: int) -> int:
    return blocks * 2 * num_qubits


def build_qwthn_circuit(input_angles: Sequence[float], theta: Sequence[float], Q: int, L: int) -> Circuit:
    """RY encoding followed by ``L`` blocks of trainable RYs and a CRZ ring.

    Slots ``0..Q-1`` bind the encoding angles and slots ``Q..Q+2QL-1`` bind
    ``theta`` in gate order: per block, ``Q`` RY angles then ``Q`` CRZ angles
    (``Q-1`` nearest-neighbour links plus the closing ``Q-1 -> 0`` link).
    """
    input_angles = np.asarray(input_angles, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if L > 0 and Q < 2:
        raise CircuitError("CRZ blocks need at least two qubits")
    if input_angles.shape != (Q,):
        raise CircuitError(f"expected {Q} input angles, got shape {input_angles.shape}")
    if theta.shape != (qwthn_theta_size(Q, L),):
        raise CircuitError(f"expected {qwthn_theta_size(Q, L)} trainable angles, got shape {theta.shape}")
    gates = [Gate(RY, q, angle=input_angles[q], param_slot=q) for q in range(Q)]
    t = 0
    for _ in range(L):
        for q in range(Q):
            gates.append(Gate(RY, q, angle=theta[t], param_slot=Q + t))
            t += 1
        links = [(q, q + 1) for q in range(Q - 1)] + [(Q - 1, 0)]
        for c, tgt in links:
            gates.append(Gate(CRZ, tgt, control=c, angle=theta[t], param_slot=Q + t))
            t += 1
    return Circuit(Q, tuple(gates), tuple(range(Q)))


def qnn_forward_jacobian(input_angles: np.ndarray, theta: np.ndarray, Q: int, L: int):
    """Batched QNN outputs with Jacobians for encoding angles and ``theta``.

    Returns ``(E, J_in, J_theta)`` with shapes ``(B, Q)``, ``(B, Q, Q)`` and
    ``(B, Q, P)``.
    """
    input_angles = np.atleast_2d(input_angles)
    B = input_angles.shape[0]
    template = build_qwthn_circuit(np.zeros(Q), np.zeros(qwthn_theta_size(Q, L)), Q, L)
    values = np.concatenate([input_angles, np.tile(theta, (B, 1))], axis=1)
    E, J = slot_jacobian(template, values)
    return E, J[:, :, :Q], J[:, :, Q:]


def qnn_forward(input_angles: np.ndarray, theta: np.ndarray, Q: int, L: int) -> np.ndarray:
    input_angles = np.atleast_2d(input_angles)
    B = input_angles.shape[0]
    template = build_qwthn_circuit(np.zeros(Q), np.zeros(qwthn_theta_size(Q, L)), Q, L)
    angles = np.concatenate([input_angles, np.tile(theta, (B, 1))], axis=1)
    return expectations_rows(template, angles)


# -- shots ------------------------------------------------------------------

def sample_shots(state: np.ndarray, shots: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial outcome counts, indexed by basis state."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    probs = np.abs(np.asarray(state)) ** 2
    probs = probs / probs.sum()
    return rng.multinomial(shots, probs)


def z_from_counts(counts: np.ndarray, qubit: int) -> float:
    counts = np.asarray(counts)
    n = _num_qubits_of(counts)
    c = counts.reshape((2,) * n)
    axes = tuple(k for k in range(n) if k != qubit)
    per = c.sum(axis=axes) if axes else c
    return float((per[0] - per[1]) / counts.sum())


# -- textual IR -------------------------------------------------------------

def _fmt_angle(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, min_digits=6)


def to_ir(circuit: Circuit) -> str:
    lines = [f"QUBITS {circuit.num_qubits}"]
    for g in circuit.gates:
        if g.kind == RY:
            line = f"RY {g.target} {_fmt_angle(g.angle)}"
        elif g.kind == CRZ:
            line = f"CRZ {g.control} {g.target} {_fmt_angle(g.angle)}"
        else:
            line = f"{g.kind} {g.target}"
        if g.param_slot is not None:
            line += f" @{g.param_slot}"
        lines.append(line)
    lines.extend(f"MEASZ {q}" for q in circuit.measure_z)
    return "\n".join(lines) + "\n"


def from_ir(text: str) -> Circuit:
    num_qubits = None
    gates: list[Gate] = []
    measure: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        slot = None
        if parts[-1].startswith("@"):
            slot = int(parts.pop()[1:])
        op, args = parts[0].upper(), parts[1:]
        try:
            if op == "QUBITS":
                (num_qubits,) = (int(a) for a in args)
            elif op == RY:
                q, ang = args
                gates.append(Gate(RY, int(q), angle=float(ang), param_slot=slot))
            elif op == CRZ:
                c, t, ang = args
                gates.append(Gate(CRZ, int(t), control=int(c), angle=float(ang), param_slot=slot))
            elif op in (H, SDG):
                (q,) = args
                gates.append(Gate(op, int(q)))
            elif op == "MEASZ":
                (q,) = args
                measure.append(int(q))
            else:
                raise CircuitError(f"unknown instruction {op!r}")
        except ValueError as exc:
            raise CircuitError(f"line {lineno}: cannot parse {raw!r}: {exc}") from exc
        if op != "QUBITS" and num_qubits is None:
            raise CircuitError(f"line {lineno}: QUBITS must come first")
    if num_qubits is None:
        raise CircuitError("missing QUBITS header")
    return Circuit(num_qubits, tuple(gates), tuple(measure))


def iter_norms(circuit: Circuit) -> Iterable[float]:
    """Yield the state norm after each gate (unitarity diagnostics)."""
    psi = zero_state(circuit.num_qubits)
    for gate in circuit.gates:
        psi = apply_gate(psi, gate)
        yield float(np.vdot(psi, psi).real)


_PAULI = {
    "I": np.eye(2, dtype=np.complex128),
    "X": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "Z": np.diag([1.0, -1.0]).astype(np.complex128),
}


def expectation_pauli(state: np.ndarray, paulis: str) -> float:
    """<psi| P_0 x P_1 x ... |psi> for a Pauli string such as ``"XI"``.

    Works directly with the 2x2 matrices, independently of the gate kernels.
    """
    state = np.asarray(state, dtype=np.complex128)
    n = _num_qubits_of(state)
    if len(paulis) != n:
        raise CircuitError(f"Pauli string {paulis!r} does not match {n} qubits")
    phi = state.reshape((2,) * n)
    for q, p in enumerate(paulis.upper()):
        if p not in _PAULI:
            raise CircuitError(f"unknown Pauli {p!r}")
        phi = np.moveaxis(np.tensordot(_PAULI[p], phi, axes=([1], [q])), 0, q)
    return float(np.vdot(state, phi.reshape(-1)).real)
