"""Numerical self-checks behind ``qwthn qcheck`` and ``qwthn gradcheck``.

Each check returns a :class:`CheckResult` with the measured value and the
tolerance it was held to; a :class:`Suite` passes only if every check does.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import qcloud, vqc
from .adapter import LoraAdapter, QwthnAdapter
from .mpo import MpoLayer, MpoSpec
from .qcloud import BackendConfig, LocalExactBackend, MockCloudBackend
from .tensor import make_rng
from .train import AdapterRegressionModel, DenseRegressionModel, grad_check
from .vqc import Circuit, Gate


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def __post_init__(self):
        self.passed, self.value, self.tolerance = bool(self.passed), float(self.value), float(self.tolerance)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{tag} {self.name}: {self.value:.3e} vs {self.tolerance:.1e}{extra}"


@dataclass
class Suite:
    name: str
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"suite": self.name, "passed": self.passed, "results": [asdict(r) for r in self.results]}


def _timed(fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    res.seconds = time.perf_counter() - t0
    return res


def random_qwthn_circuit(rng: np.random.Generator, Q: int, L: int) -> Circuit:
    return vqc.build_qwthn_circuit(rng.uniform(-np.pi, np.pi, Q),
                                   rng.uniform(-np.pi, np.pi, vqc.qwthn_theta_size(Q, L)), Q, L)


def _random_shape(rng: np.random.Generator, max_q: int = 4, max_l: int = 3) -> tuple[int, int]:
    Q = int(rng.integers(1, max_q + 1))
    L = 0 if Q == 1 else int(rng.integers(1, max_l + 1))
    return Q, L


# -- simulator ----------------------------------------------------------------

def check_norm_drift(seed: int, count: int = 1000, tol: float = 1e-10) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        c = random_qwthn_circuit(rng, *_random_shape(rng))
        worst = max(worst, max((abs(v - 1.0) for v in vqc.iter_norms(c)), default=0.0))
    return CheckResult("statevector norm drift", worst <= tol, worst, tol, f"{count} circuits")


def check_ry_cosine(points: int = 100, tol: float = 1e-12) -> CheckResult:
    grid = np.linspace(-2 * np.pi, 2 * np.pi, points)
    c = Circuit(1, (Gate(vqc.RY, 0, param_slot=0),), (0,))
    got = vqc.expectations_rows(c, grid[:, None])[:, 0]
    err = float(np.max(np.abs(got - np.cos(grid))))
    return CheckResult("<Z> of RY(t)|0> equals cos t", err <= tol, err, tol, f"{points} angles")


# -- gradients ------------------------------------------------------------------

def _slot_values(circuit: Circuit) -> list[float]:
    vals: dict[int, float] = {}
    for g in circuit.gates:
        if g.param_slot is not None:
            vals.setdefault(g.param_slot, g.angle)
    return [vals[s] for s in sorted(vals)]


def check_param_shift(seed: int, count: int = 20, h: float = 1e-6, tol: float = 1e-7) -> CheckResult:
    """Parameter-shift gradients against central differences on every slot."""
    rng = make_rng(seed)
    worst, slots = 0.0, 0
    for _ in range(count):
        Q = int(rng.integers(2, 5))
        c = random_qwthn_circuit(rng, Q, int(rng.integers(1, 4)))
        base = np.array(_slot_values(c))
        for s in range(base.size):
            up, dn = base.copy(), base.copy()
            up[s] += h
            dn[s] -= h
            fd = (vqc.run_circuit(c.bind(up)) - vqc.run_circuit(c.bind(dn))) / (2 * h)
            worst = max(worst, float(np.max(np.abs(vqc.param_shift_grad(c, s) - fd))))
            slots += 1
    return CheckResult("parameter shift vs finite differences", worst <= tol, worst, tol,
                       f"{count} circuits, {slots} slots")


def check_grad_dense(seed: int, tol: float = 1e-8) -> CheckResult:
    # Quadratic loss: central differences carry no truncation error, so a
    # larger step only shrinks the rounding term.
    err = grad_check(DenseRegressionModel(12, 10, make_rng(seed)), epsilon=1e-4)
    return CheckResult("grad_check dense", err <= tol, err, tol)


def check_grad_mpo(seed: int, tol: float = 1e-6) -> CheckResult:
    rng = make_rng(seed)
    layer = MpoLayer.init(MpoSpec.uniform((2, 4, 2), (4, 2, 2), 3), rng)
    x, y = rng.normal(size=(6, 16)), rng.normal(size=(6, 16))
    err = grad_check(AdapterRegressionModel(layer, x, y))
    return CheckResult("grad_check MPO", err <= tol, err, tol)


def check_grad_qwthn(seed: int, tol: float = 1e-4) -> CheckResult:
    """Full adapter on the small configuration 16 -> 8 -> 2 qubits (L=1) -> 8 -> 16."""
    rng = make_rng(seed)
    a = QwthnAdapter.create(16, 16, rng, mpo_out=8, qubits=2, mlp_out=8, blocks=1, zero_init=False)
    x, y = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    err = grad_check(AdapterRegressionModel(a, x, y))
    n = sum(p.size for p in a.parameters().values())
    return CheckResult("grad_check QWTHN adapter", err <= tol, err, tol, f"{n} parameters")


def check_grad_lora(seed: int, tol: float = 1e-6) -> CheckResult:
    rng = make_rng(seed)
    a = LoraAdapter.create(16, 16, rng, rank=4)
    a.B[:] = rng.normal(size=a.B.shape)
    x, y = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    err = grad_check(AdapterRegressionModel(a, x, y))
    return CheckResult("grad_check LoRA", err <= tol, err, tol)


# -- cloud protocol ---------------------------------------------------------------

def _batch(rng: np.random.Generator, B: int, Q: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    return rng.uniform(-np.pi, np.pi, (B, Q)), rng.uniform(-np.pi, np.pi, vqc.qwthn_theta_size(Q, L))


def check_accounting(seed: int, kind: str = "mock_cloud", B: int = 8, Q: int = 4, L: int = 2,
                     group_limit: int = 10) -> CheckResult:
    """Per-observable readout runs exactly ``B * Q`` circuits in ceil(T / limit) groups."""
    rng = make_rng(seed)
    angles, theta = _batch(rng, B, Q, L)
    backend = qcloud.make_backend(BackendConfig(kind, group_limit=group_limit, seed=seed))
    out = qcloud.run_qnn_batch(backend, angles, theta, Q, L, mode="per_observable")
    T = B * Q
    groups = [row["size"] for row in backend.ledger()]
    expect = qcloud.group_sizes(T, group_limit)
    exact = vqc.qnn_forward(angles, theta, Q, L)
    ok = backend.circuits_executed == T and groups == expect and out.shape == (B, Q) and np.allclose(out, exact)
    return CheckResult("T = B x Q circuit accounting", ok, float(backend.circuits_executed), float(T),
                       f"B={B} Q={Q} groups={groups}")


def check_exact_agreement(seed: int, kind: str = "mock_cloud", B: int = 8, Q: int = 4, L: int = 2,
                          group_limit: int = 10, tol: float = 1e-9) -> CheckResult:
    """Backend results match local exact simulation under reversed completion order."""
    rng = make_rng(seed)
    angles, theta = _batch(rng, B, Q, L)
    local = qcloud.run_qnn_batch(LocalExactBackend(BackendConfig("local_exact", seed=seed)), angles, theta, Q, L,
                                 mode="per_observable")
    n_groups = len(qcloud.group_sizes(B * Q, group_limit))
    cfg = BackendConfig(kind, group_limit=group_limit, seed=seed)
    if kind == "mock_cloud":
        backend = MockCloudBackend(cfg, completion_order=list(range(n_groups))[::-1])
    else:
        backend = qcloud.make_backend(cfg)
    remote = qcloud.run_qnn_batch(backend, angles, theta, Q, L, mode="per_observable")
    err = float(np.max(np.abs(remote - local)))
    detail = f"{kind}"
    ok = err <= tol
    if kind == "mock_cloud":
        detail += f", completion order {backend.completed}"
        ok = ok and backend.completed == list(range(n_groups))[::-1]
    return CheckResult("exact-mode agreement with local simulation", ok, err, tol, detail)


def check_shots(seed: int, shots: int, samples: int = 64, Q: int = 4, L: int = 2,
                min_fraction: float = 0.99) -> CheckResult:
    """Shot estimates stay within 3/sqrt(shots) of the exact values for most entries."""
    rng = make_rng(seed)
    angles, theta = _batch(rng, samples, Q, L)
    backend = MockCloudBackend(BackendConfig("mock_cloud", shots=shots, seed=seed))
    est = qcloud.run_qnn_batch(backend, angles, theta, Q, L)
    dev = np.abs(est - vqc.qnn_forward(angles, theta, Q, L))
    tol = qcloud.shot_tolerance(shots)
    frac = float(np.mean(dev <= tol))
    return CheckResult("shot deviation within 3/sqrt(shots)", frac >= min_fraction, frac, min_fraction,
                       f"shots={shots}, {dev.size} entries, max dev {dev.max():.2e}, bound {tol:.2e}")


def _random_prep(rng: np.random.Generator, Q: int) -> Circuit:
    gates = []
    for q in range(Q):
        gates += [Gate(vqc.RY, q, angle=rng.uniform(-np.pi, np.pi)), Gate(vqc.H, q)]
        if rng.random() < 0.5:
            gates.append(Gate(vqc.SDG, q))
        gates.append(Gate(vqc.RY, q, angle=rng.uniform(-np.pi, np.pi)))
    if Q == 2:
        gates.append(Gate(vqc.CRZ, 1, control=0, angle=rng.uniform(-np.pi, np.pi)))
        gates.append(Gate(vqc.RY, 1, angle=rng.uniform(-np.pi, np.pi)))
    return Circuit(Q, tuple(gates), tuple(range(Q)))


def check_basis_transform(seed: int, count: int = 50, tol: float = 1e-12) -> CheckResult:
    """Rotated-basis <Z> against direct Pauli expectations on 1- and 2-qubit states."""
    rng = make_rng(seed)
    worst = 0.0
    for i in range(count):
        Q = 1 + i % 2
        prep = _random_prep(rng, Q)
        psi = vqc.final_state(prep)
        for obs in np.ndindex(*(3,) * Q):
            paulis = ["XYZ"[k] for k in obs]
            got = vqc.run_circuit(qcloud.basis_transform(prep, paulis))
            for q in range(Q):
                direct = vqc.expectation_pauli(psi, "".join(paulis[q] if k == q else "I" for k in range(Q)))
                worst = max(worst, abs(got[q] - direct))
    return CheckResult("basis transformation vs direct <X>/<Y>", worst <= tol, worst, tol,
                       f"{count} states")


# -- suites -------------------------------------------------------------------

def qcheck(backend: str = "mock_cloud", shots: int | None = 1_000_000, seed: int = 7) -> Suite:
    """Backend equivalence, protocol accounting, basis rotation and circuit gradients."""
    if backend not in ("local_exact", "mock_cloud"):
        raise ValueError(f"unknown backend {backend!r}")
    suite = Suite("qcheck")
    suite.results += [
        _timed(check_accounting, seed, backend),
        _timed(check_exact_agreement, seed, backend),
    ]
    if shots is not None and backend == "mock_cloud":
        suite.results.append(_timed(check_shots, seed, shots))
    suite.results += [
        _timed(check_basis_transform, seed),
        _timed(check_norm_drift, seed),
        _timed(check_ry_cosine),
        _timed(check_param_shift, seed),
    ]
    return suite


def gradcheck(seed: int = 7) -> Suite:
    """Analytic gradients of every trainable stage against central differences."""
    suite = Suite("gradcheck")
    suite.results += [
        _timed(check_grad_dense, seed),
        _timed(check_grad_mpo, seed),
        _timed(check_grad_lora, seed),
        _timed(check_grad_qwthn, seed),
        _timed(check_param_shift, seed),
    ]
    return suite
