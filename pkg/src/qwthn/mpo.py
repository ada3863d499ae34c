"""Matrix product operator (MPO) linear layers.

A weight matrix ``W`` of shape ``(N_y, N_x)`` is stored as a chain of site
tensors ``w[k]`` with shape ``(D_{k-1}, J_k, I_k, D_k)``. Input and output
indices are split into row-major digits ``(i_1..i_n)`` and ``(j_1..j_n)``; the
boundary bonds are fixed to one (open chain), so the matrix entry is a plain
product of the ``w[k][:, j_k, i_k, :]`` slices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError, check_finite, kaiming_uniform_init, reshape_hierarchical

log = logging.getLogger(__name__)

DENSE_LIMIT = 2**26


def factorize_dims(N: int, n: int) -> tuple[int, ...]:
    """Split ``N`` into ``n`` ascending integer factors, as balanced as possible.

    Balance is decided by comparing the factors from largest to smallest, so the
    largest factor is minimised first, then the second largest, and so on. The
    search is exhaustive over ordered factorizations, which is cheap for layer
    widths.
    """
    if N < 1 or n < 1:
        raise ValueError(f"need N >= 1 and n >= 1, got N={N}, n={n}")

    best: tuple[int, ...] | None = None
    best_key: tuple[int, ...] | None = None

    def search(remaining: int, slots: int, lo: int, acc: list[int]) -> None:
        nonlocal best, best_key
        if slots == 1:
            if remaining >= lo:
                cand = tuple(acc + [remaining])
                key = tuple(sorted(cand, reverse=True))
                if best_key is None or key < best_key:
                    best, best_key = cand, key
            return
        f = lo
        while f ** slots <= remaining:
            if remaining % f == 0:
                search(remaining // f, slots - 1, f, acc + [f])
            f += 1

    search(N, n, 1, [])
    assert best is not None
    if n > 1 and 1 in best and N > 1:
        log.warning("factorize_dims(%d, %d) -> %s contains unit factors", N, n, best)
    return best


@dataclass(frozen=True)
class MpoSpec:
    in_dims: tuple[int, ...]
    out_dims: tuple[int, ...]
    bond_dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "in_dims", tuple(int(d) for d in self.in_dims))
        object.__setattr__(self, "out_dims", tuple(int(d) for d in self.out_dims))
        object.__setattr__(self, "bond_dims", tuple(int(d) for d in self.bond_dims))
        n = len(self.in_dims)
        if n < 1 or len(self.out_dims) != n:
            raise ShapeError(f"in_dims {self.in_dims} and out_dims {self.out_dims} must have equal non-zero length")
        if len(self.bond_dims) != n + 1:
            raise ShapeError(f"need {n + 1} bond dims, got {len(self.bond_dims)}")
        if self.bond_dims[0] != 1 or self.bond_dims[-1] != 1:
            raise ShapeError(f"boundary bonds must be 1, got {self.bond_dims}")
        if min(self.in_dims + self.out_dims + self.bond_dims) < 1:
            raise ShapeError("all MPO dimensions must be positive")

    @classmethod
    def uniform(cls, in_dims: Sequence[int], out_dims: Sequence[int], bond_dim: int) -> "MpoSpec":
        n = len(in_dims)
        return cls(tuple(in_dims), tuple(out_dims), (1,) + (bond_dim,) * (n - 1) + (1,))

    @classmethod
    def balanced(cls, n_x: int, n_y: int, sites: int, bond_dim: int) -> "MpoSpec":
        return cls.uniform(factorize_dims(n_x, sites), factorize_dims(n_y, sites), bond_dim)

    @property
    def n(self) -> int:
        return len(self.in_dims)

    @property
    def n_x(self) -> int:
        return int(np.prod(self.in_dims))

    @property
    def n_y(self) -> int:
        return int(np.prod(self.out_dims))

    def site_shape(self, k: int) -> tuple[int, int, int, int]:
        return (self.bond_dims[k], self.out_dims[k], self.in_dims[k], self.bond_dims[k + 1])

    def to_dict(self) -> dict:
        return {"in_dims": list(self.in_dims), "out_dims": list(self.out_dims), "bond_dims": list(self.bond_dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "MpoSpec":
        return cls(tuple(d["in_dims"]), tuple(d["out_dims"]), tuple(d["bond_dims"]))


def mpo_param_count(spec: MpoSpec) -> int:
    """Total trainable scalars: sum over sites of ``I_k J_k D_{k-1} D_k``."""
    return sum(
        spec.in_dims[k] * spec.out_dims[k] * spec.bond_dims[k] * spec.bond_dims[k + 1]
        for k in range(spec.n)
    )


def mpo_param_count_uniform(in_dims: Sequence[int], out_dims: Sequence[int], bond_dim: int) -> int:
    """Closed form for a uniform interior bond ``D`` (needs at least two sites)."""
    n = len(in_dims)
    if n < 2:
        raise ValueError("the uniform-bond closed form needs n >= 2 sites")
    D = bond_dim
    ends = in_dims[0] * out_dims[0] + in_dims[-1] * out_dims[-1]
    middle = sum(in_dims[k] * out_dims[k] for k in range(1, n - 1))
    return D * ends + D * D * middle


@dataclass
class MpoLayer:
    spec: MpoSpec
    tensors: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.tensors) != self.spec.n:
            raise ShapeError(f"expected {self.spec.n} site tensors, got {len(self.tensors)}")
        for k, t in enumerate(self.tensors):
            if t.shape != self.spec.site_shape(k):
                raise ShapeError(f"site {k} has shape {t.shape}, expected {self.spec.site_shape(k)}")

    @classmethod
    def init(cls, spec: MpoSpec, rng: np.random.Generator, zero_last: bool = False) -> "MpoLayer":
        """Kaiming-uniform sites with ``fan_in = I_k * D_{k-1}``.

        ``zero_last`` zeroes the final site so the layer starts as the zero map.
        """
        tensors = []
        for k in range(spec.n):
            shape = spec.site_shape(k)
            if zero_last and k == spec.n - 1:
                tensors.append(np.zeros(shape))
            else:
                tensors.append(kaiming_uniform_init(shape, spec.in_dims[k] * spec.bond_dims[k], rng))
        return cls(spec, tensors)

    @classmethod
    def zeros(cls, spec: MpoSpec) -> "MpoLayer":
        return cls(spec, [np.zeros(spec.site_shape(k)) for k in range(spec.n)])

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors)

    def forward(self, x):
        return mpo_forward(self, x)

    def copy(self) -> "MpoLayer":
        return MpoLayer(self.spec, [t.copy() for t in self.tensors])


def _as_batch(layer: MpoLayer, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != layer.spec.n_x:
        raise ShapeError(f"MPO expects inputs of length {layer.spec.n_x}, got shape {x.shape}")
    return x2, single


def _sweep(layer: MpoLayer, x2: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    # State layout: (batch, output digits so far, bond, input digits left).
    b = x2.shape[0]
    s = reshape_hierarchical(x2, (b, 1, 1, layer.spec.n_x))
    states = []
    for w in layer.tensors:
        _, a, d, rest = s.shape
        _, J, I, e = w.shape
        s5 = s.reshape(b, a, d, I, rest // I)
        states.append(s5)
        s = np.einsum("badir,dJie->baJer", s5, w).reshape(b, a * J, e, rest // I)
    return s.reshape(b, layer.spec.n_y), states


def mpo_forward(layer: MpoLayer, x) -> np.ndarray:
    """Apply the layer to a length-``N_x`` vector or a ``(batch, N_x)`` array."""
    x2, single = _as_batch(layer, x)
    y, _ = _sweep(layer, x2)
    return y[0] if single else y


def mpo_backward(layer: MpoLayer, x, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of a scalar loss with ``dL/dy = grad_out``.

    Returns the per-site gradients (same shapes as ``layer.tensors``) and the
    gradient with respect to ``x``; batched inputs sum site gradients over the
    batch.
    """
    x2, single = _as_batch(layer, x)
    g = np.asarray(grad_out, dtype=np.float64)
    g = g.reshape(1, -1) if single else g
    if g.shape != (x2.shape[0], layer.spec.n_y):
        raise ShapeError(f"grad_out shape {np.shape(grad_out)} does not match output length {layer.spec.n_y}")
    _, states = _sweep(layer, x2)
    b = x2.shape[0]
    grads: list[np.ndarray] = [np.empty(0)] * layer.spec.n
    gs = g.reshape(b, layer.spec.n_y, 1, 1)
    for k in range(layer.spec.n - 1, -1, -1):
        w = layer.tensors[k]
        s5 = states[k]
        _, a, d, I, rest = s5.shape
        J, e = w.shape[1], w.shape[3]
        g5 = gs.reshape(b, a, J, e, rest)
        grads[k] = np.einsum("badir,baJer->dJie", s5, g5)
        gs = np.einsum("baJer,dJie->badir", g5, w).reshape(b, a, d, I * rest)
    grad_x = gs.reshape(b, layer.spec.n_x)
    return grads, grad_x[0] if single else grad_x


def mpo_to_dense(layer: MpoLayer) -> np.ndarray:
    """Contract every index and return ``W`` with shape ``(N_y, N_x)``."""
    spec = layer.spec
    if spec.n_x * spec.n_y > DENSE_LIMIT:
        raise MemoryError(f"dense reconstruction of {spec.n_y}x{spec.n_x} exceeds {DENSE_LIMIT} entries")
    # acc[j, i, bond] over the digits contracted so far.
    acc = np.ones((1, 1, 1))
    for w in layer.tensors:
        _, J, I, e = w.shape
        acc = np.einsum("jid,dJIe->jJiIe", acc, w)
        acc = acc.reshape(acc.shape[0] * J, acc.shape[2] * I, e)
    return acc[:, :, 0].copy()


def save_mpo(layer: MpoLayer, path) -> None:
    doc = {"spec": layer.spec.to_dict(), "params": np.concatenate([t.ravel() for t in layer.tensors]).tolist()}
    Path(path).write_text(json.dumps(doc))


def mpo_from_flat(spec: MpoSpec, flat: Sequence[float]) -> MpoLayer:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != mpo_param_count(spec):
        raise ShapeError(f"expected {mpo_param_count(spec)} parameters, got {flat.size}")
    tensors, off = [], 0
    for k in range(spec.n):
        shape = spec.site_shape(k)
        size = int(np.prod(shape))
        tensors.append(check_finite(flat[off:off + size].reshape(shape).copy(), f"site {k}"))
        off += size
    return MpoLayer(spec, tensors)


def load_mpo(path) -> MpoLayer:
    doc = json.loads(Path(path).read_text())
    return mpo_from_flat(MpoSpec.from_dict(doc["spec"]), doc["params"])
