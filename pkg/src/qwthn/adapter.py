"""QWTHN and LoRA adapters plus frozen-layer injection.

The QWTHN path is::

    x -> MPO_A -> affine -> pi*tanh -> QNN -> fuse -> affine -> MPO_B

where ``fuse(w_q, a) = w_q * a + a`` mixes the circuit readout back into the
encoding angles. Every stage has an explicit backward, so gradients for the
whole chain are assembled by hand; the QNN contributes parameter-shift
Jacobians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import vqc
from .mpo import MpoLayer, MpoSpec, factorize_dims, mpo_backward, mpo_forward, mpo_from_flat, mpo_param_count
from .qcloud import run_qnn_batch
from .tensor import ShapeError, elementwise, kaiming_uniform_init


class ConfigError(ValueError):
    """Dimension chain or hyperparameter problem; names the offending stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def fuse(w_q: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Quantum-weighted residual: ``w_q * a + a``."""
    return elementwise(elementwise(w_q, a, "mul"), a, "add")


def stage_mpo_spec(stage: str, mc, n_in: int, n_out: int) -> MpoSpec:
    """MPO spec for one adapter stage from its config section.

    ``mc`` carries ``sites``, ``bond_dim`` and optional explicit ``in_dims`` /
    ``out_dims``; missing factor lists come from :func:`factorize_dims`.
    """
    in_dims = tuple(mc.in_dims) if mc.in_dims is not None else factorize_dims(n_in, mc.sites)
    out_dims = tuple(mc.out_dims) if mc.out_dims is not None else factorize_dims(n_out, mc.sites)
    if len(in_dims) != len(out_dims):
        raise ConfigError(stage, f"in_dims {in_dims} and out_dims {out_dims} need the same number of sites")
    if int(np.prod(in_dims)) != n_in:
        raise ConfigError(stage, f"product of in_dims {in_dims} is {int(np.prod(in_dims))}, expected {n_in}")
    if int(np.prod(out_dims)) != n_out:
        raise ConfigError(stage, f"product of out_dims {out_dims} is {int(np.prod(out_dims))}, expected {n_out}")
    return MpoSpec.uniform(in_dims, out_dims, mc.bond_dim)


def _as_rows(x, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != width:
        raise ShapeError(f"{what} expects inputs of length {width}, got shape {x.shape}")
    return x2, single


@dataclass
class QwthnAdapter:
    mpo_a: MpoLayer
    w_a: np.ndarray
    b_a: np.ndarray
    theta: np.ndarray
    w_b: np.ndarray
    b_b: np.ndarray
    mpo_b: MpoLayer
    qubits: int
    blocks: int

    def __post_init__(self):
        m1, q = self.w_a.shape
        if self.mpo_a.spec.n_y != m1:
            raise ConfigError("mlp_a", f"input width {m1} does not match MPO_A output {self.mpo_a.spec.n_y}")
        if q != self.qubits or self.b_a.shape != (q,):
            raise ConfigError("mlp_a", f"output width must equal the qubit count {self.qubits}")
        if self.theta.shape != (vqc.qwthn_theta_size(self.qubits, self.blocks),):
            raise ConfigError("qnn", f"theta has shape {self.theta.shape}, expected {vqc.qwthn_theta_size(self.qubits, self.blocks)} angles")
        if self.w_b.shape[0] != q:
            raise ConfigError("mlp_b", f"input width {self.w_b.shape[0]} does not match qubit count {q}")
        m2 = self.w_b.shape[1]
        if self.b_b.shape != (m2,):
            raise ConfigError("mlp_b", "bias length differs from output width")
        if self.mpo_b.spec.n_x != m2:
            raise ConfigError("mpo_b", f"input length {self.mpo_b.spec.n_x} does not match MLP_B output {m2}")

    @classmethod
    def create(
        cls,
        n_x: int,
        n_y: int,
        rng: np.random.Generator,
        *,
        mpo_out: int = 128,
        qubits: int = 4,
        mlp_out: int = 128,
        bond_dim: int = 2,
        sites: int = 3,
        blocks: int = 2,
        mpo_a_spec: MpoSpec | None = None,
        mpo_b_spec: MpoSpec | None = None,
        zero_init: bool = True,
    ) -> "QwthnAdapter":
        """Fresh adapter; with ``zero_init`` the last MPO_B site starts at zero."""
        if qubits < 2 and blocks > 0:
            raise ConfigError("qnn", "CRZ blocks need at least two qubits")
        spec_a = mpo_a_spec or MpoSpec.uniform(factorize_dims(n_x, sites), factorize_dims(mpo_out, sites), bond_dim)
        spec_b = mpo_b_spec or MpoSpec.uniform(factorize_dims(mlp_out, sites), factorize_dims(n_y, sites), bond_dim)
        if spec_a.n_x != n_x:
            raise ConfigError("mpo_a", f"product of input factors {spec_a.in_dims} is {spec_a.n_x}, expected N_x={n_x}")
        if spec_b.n_y != n_y:
            raise ConfigError("mpo_b", f"product of output factors {spec_b.out_dims} is {spec_b.n_y}, expected N_y={n_y}")
        mpo_a = MpoLayer.init(spec_a, rng)
        m1 = spec_a.n_y
        w_a = kaiming_uniform_init((m1, qubits), m1, rng)
        theta = rng.uniform(-np.pi, np.pi, size=vqc.qwthn_theta_size(qubits, blocks))
        m2 = spec_b.n_x
        w_b = kaiming_uniform_init((qubits, m2), qubits, rng)
        mpo_b = MpoLayer.init(spec_b, rng, zero_last=zero_init)
        return cls(mpo_a, w_a, np.zeros(qubits), theta, w_b, np.zeros(m2), mpo_b, qubits, blocks)

    @property
    def n_x(self) -> int:
        return self.mpo_a.spec.n_x

    @property
    def n_y(self) -> int:
        return self.mpo_b.spec.n_y

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are live views for in-place updates."""
        params = {f"mpo_a.{k}": t for k, t in enumerate(self.mpo_a.tensors)}
        params.update({"mlp_a.weight": self.w_a, "mlp_a.bias": self.b_a, "qnn.theta": self.theta,
                       "mlp_b.weight": self.w_b, "mlp_b.bias": self.b_b})
        params.update({f"mpo_b.{k}": t for k, t in enumerate(self.mpo_b.tensors)})
        return params

    def stage_counts(self) -> dict[str, int]:
        return {
            "mpo_a": mpo_param_count(self.mpo_a.spec),
            "mlp_a": self.w_a.size + self.b_a.size,
            "qnn": self.theta.size,
            "mlp_b": self.w_b.size + self.b_b.size,
            "mpo_b": mpo_param_count(self.mpo_b.spec),
        }

    def forward(self, x, backend=None, readout: str = "combined") -> np.ndarray:
        return qwthn_forward(self, x, backend=backend, readout=readout)

    def encode(self, x) -> np.ndarray:
        """Encoding angles ``pi * tanh(MLP_A(MPO_A(x)))``, one row of ``q`` per input."""
        x2, single = _as_rows(x, self.n_x, "QWTHN adapter")
        a = np.pi * np.tanh(mpo_forward(self.mpo_a, x2) @ self.w_a + self.b_a)
        return a[0] if single else a

    def circuit(self, angles) -> vqc.Circuit:
        return vqc.build_qwthn_circuit(angles, self.theta, self.qubits, self.blocks)

    def forward_cache(self, x):
        x2, single = _as_rows(x, self.n_x, "QWTHN adapter")
        y1 = mpo_forward(self.mpo_a, x2)
        z = y1 @ self.w_a + self.b_a
        t = np.tanh(z)
        a = np.pi * t
        w_q, j_in, j_theta = vqc.qnn_forward_jacobian(a, self.theta, self.qubits, self.blocks)
        f = fuse(w_q, a)
        y2 = f @ self.w_b + self.b_b
        out = mpo_forward(self.mpo_b, y2)
        cache = dict(x=x2, y1=y1, t=t, a=a, w_q=w_q, j_in=j_in, j_theta=j_theta, f=f, y2=y2, single=single)
        return (out[0] if single else out), cache

    def backward(self, cache, grad_out) -> tuple[dict[str, np.ndarray], np.ndarray]:
        g, _ = _as_rows(grad_out, self.n_y, "QWTHN backward")
        grads: dict[str, np.ndarray] = {}
        g_mpo_b, g_y2 = mpo_backward(self.mpo_b, cache["y2"], g)
        grads.update({f"mpo_b.{k}": gk for k, gk in enumerate(g_mpo_b)})
        grads["mlp_b.weight"] = cache["f"].T @ g_y2
        grads["mlp_b.bias"] = g_y2.sum(axis=0)
        g_f = g_y2 @ self.w_b.T
        g_wq = g_f * cache["a"]
        g_a = g_f * (cache["w_q"] + 1.0) + np.einsum("bm,bmq->bq", g_wq, cache["j_in"])
        grads["qnn.theta"] = np.einsum("bm,bmp->p", g_wq, cache["j_theta"])
        g_z = g_a * np.pi * (1.0 - cache["t"] ** 2)
        grads["mlp_a.weight"] = cache["y1"].T @ g_z
        grads["mlp_a.bias"] = g_z.sum(axis=0)
        g_y1 = g_z @ self.w_a.T
        g_mpo_a, g_x = mpo_backward(self.mpo_a, cache["x"], g_y1)
        grads.update({f"mpo_a.{k}": gk for k, gk in enumerate(g_mpo_a)})
        return grads, (g_x[0] if cache["single"] else g_x)


def qwthn_forward(adapter: QwthnAdapter, x, backend=None, readout: str = "combined") -> np.ndarray:
    """Adapter output for a vector or a ``(batch, N_x)`` array.

    With ``backend`` set, circuit readout goes through that execution backend
    (see :mod:`qwthn.qcloud`) instead of the in-process simulator.
    """
    x2, single = _as_rows(x, adapter.n_x, "QWTHN adapter")
    a = adapter.encode(x2)
    if backend is None:
        w_q = vqc.qnn_forward(a, adapter.theta, adapter.qubits, adapter.blocks)
    else:
        w_q = run_qnn_batch(backend, a, adapter.theta, adapter.qubits, adapter.blocks, mode=readout)
    y2 = fuse(w_q, a) @ adapter.w_b + adapter.b_b
    out = mpo_forward(adapter.mpo_b, y2)
    return out[0] if single else out


@dataclass
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if self.A.shape[0] != self.B.shape[1]:
            raise ConfigError("lora", f"rank mismatch between A {self.A.shape} and B {self.B.shape}")

    @classmethod
    def create(cls, n_x: int, n_y: int, rng: np.random.Generator, rank: int = 4, scale: float = 1.0) -> "LoraAdapter":
        return cls(kaiming_uniform_init((rank, n_x), n_x, rng), np.zeros((n_y, rank)), scale)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_y(self) -> int:
        return self.B.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"lora.A": self.A, "lora.B": self.B}

    def stage_counts(self) -> dict[str, int]:
        return {"lora.A": self.A.size, "lora.B": self.B.size}

    def forward(self, x, backend=None) -> np.ndarray:
        return lora_forward(self, x)

    def forward_cache(self, x):
        x2, single = _as_rows(x, self.n_x, "LoRA adapter")
        h = x2 @ self.A.T
        out = self.scale * (h @ self.B.T)
        return (out[0] if single else out), {"x": x2, "h": h, "single": single}

    def backward(self, cache, grad_out):
        g, _ = _as_rows(grad_out, self.n_y, "LoRA backward")
        g = self.scale * g
        g_h = g @ self.B
        grads = {"lora.B": g.T @ cache["h"], "lora.A": g_h.T @ cache["x"]}
        g_x = g_h @ self.A
        return grads, (g_x[0] if cache["single"] else g_x)


def lora_forward(adapter: LoraAdapter, x) -> np.ndarray:
    """``scale * B (A x)`` for a vector or a batch of row vectors."""
    return adapter.forward_cache(x)[0]


Adapter = Union[QwthnAdapter, LoraAdapter]


@dataclass
class InjectedLayer:
    """Frozen dense layer plus a trainable additive adapter path."""

    frozen_weight: np.ndarray
    adapter: Adapter | None = None
    scale: float = 1.0
    bias: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.frozen_weight = np.array(self.frozen_weight, dtype=np.float64)
        self.frozen_weight.setflags(write=False)
        if self.adapter is not None and (self.adapter.n_x, self.adapter.n_y) != (self.n_x, self.n_y):
            raise ShapeError(
                f"adapter maps {self.adapter.n_x}->{self.adapter.n_y}, frozen layer maps {self.n_x}->{self.n_y}"
            )

    @property
    def n_x(self) -> int:
        return self.frozen_weight.shape[1]

    @property
    def n_y(self) -> int:
        return self.frozen_weight.shape[0]

    def frozen_forward(self, x) -> np.ndarray:
        y = np.asarray(x, dtype=np.float64) @ self.frozen_weight.T
        return y if self.bias is None else y + self.bias

    def forward(self, x) -> np.ndarray:
        y = self.frozen_forward(x)
        if self.adapter is None or self.scale == 0.0:
            return y
        return y + self.scale * self.adapter.forward(x)

    def forward_cache(self, x):
        y = self.frozen_forward(x)
        if self.adapter is None or self.scale == 0.0:
            return y, {"adapter": None}
        delta, cache = self.adapter.forward_cache(x)
        return y + self.scale * delta, {"adapter": cache}

    def backward(self, cache, grad_out):
        """Adapter gradients and ``dL/dx``; the frozen weight gets none."""
        g = np.asarray(grad_out, dtype=np.float64)
        g_x = g @ self.frozen_weight
        if cache["adapter"] is None:
            grads = {k: np.zeros_like(v) for k, v in self.adapter.parameters().items()} if self.adapter else {}
            return grads, g_x
        grads, g_xa = self.adapter.backward(cache["adapter"], self.scale * g)
        return grads, g_x + g_xa


def injected_forward(layer: InjectedLayer, x) -> np.ndarray:
    """``W x + scale * adapter(x)``."""
    return layer.forward(x)


@dataclass
class ParamReport:
    kind: str
    stages: dict[str, int]
    total: int
    lora_rank: int
    lora_total: int
    ratio: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stages": dict(self.stages), "total": self.total,
                "lora_rank": self.lora_rank, "lora_total": self.lora_total, "ratio": self.ratio}


def lora_param_count(n_x: int, n_y: int, rank: int = 4) -> int:
    return rank * (n_x + n_y)


def count_params(adapter: Adapter, lora_rank: int = 4) -> ParamReport:
    stages = adapter.stage_counts()
    total = sum(stages.values())
    enumerated = sum(p.size for p in adapter.parameters().values())
    if total != enumerated:
        raise RuntimeError(f"stage counts sum to {total} but the adapter holds {enumerated} scalars")
    lora_total = lora_param_count(adapter.n_x, adapter.n_y, lora_rank)
    kind = "qwthn" if isinstance(adapter, QwthnAdapter) else "lora"
    return ParamReport(kind, stages, total, lora_rank, lora_total, total / lora_total)


# -- checkpoints ------------------------------------------------------------

def adapter_manifest(adapter: Adapter) -> dict:
    if isinstance(adapter, QwthnAdapter):
        return {
            "kind": "qwthn",
            "mpo_a": adapter.mpo_a.spec.to_dict(),
            "mpo_b": adapter.mpo_b.spec.to_dict(),
            "mlp_a": list(adapter.w_a.shape),
            "mlp_b": list(adapter.w_b.shape),
            "qubits": adapter.qubits,
            "blocks": adapter.blocks,
            "n_x": adapter.n_x,
            "n_y": adapter.n_y,
        }
    return {"kind": "lora", "rank": adapter.rank, "scale": adapter.scale, "n_x": adapter.n_x, "n_y": adapter.n_y}


def save_adapter(adapter: Adapter, path) -> None:
    doc = {
        "manifest": adapter_manifest(adapter),
        "params": {name: {"shape": list(p.shape), "data": p.ravel().tolist()}
                   for name, p in adapter.parameters().items()},
    }
    Path(path).write_text(json.dumps(doc))


def _array(entry: dict) -> np.ndarray:
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def load_adapter(path) -> Adapter:
    doc = json.loads(Path(path).read_text())
    man, params = doc["manifest"], doc["params"]
    if man["kind"] == "lora":
        return LoraAdapter(_array(params["lora.A"]), _array(params["lora.B"]), man["scale"])
    spec_a, spec_b = MpoSpec.from_dict(man["mpo_a"]), MpoSpec.from_dict(man["mpo_b"])

    def site_flat(prefix, spec):
        return np.concatenate([_array(params[f"{prefix}.{k}"]).ravel() for k in range(spec.n)])

    return QwthnAdapter(
        mpo_from_flat(spec_a, site_flat("mpo_a", spec_a)),
        _array(params["mlp_a.weight"]), _array(params["mlp_a.bias"]), _array(params["qnn.theta"]),
        _array(params["mlp_b.weight"]), _array(params["mlp_b.bias"]),
        mpo_from_flat(spec_b, site_flat("mpo_b", spec_b)),
        man["qubits"], man["blocks"],
    )
