"""Desk-scale training: losses, Adam, synthetic tasks and a tiny frozen host.

Models expose ``parameters()`` (name -> live array) and
``loss_and_grads(batch)``; the training loop and :func:`grad_check` only rely
on that pair.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .adapter import Adapter, InjectedLayer, LoraAdapter, ParamReport, QwthnAdapter, count_params, stage_mpo_spec
from .mpo import MpoLayer, mpo_backward, mpo_forward
from .tensor import kaiming_uniform_init, make_rng

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


# -- losses -----------------------------------------------------------------

_LOG_FLOOR = math.log(1e-12)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    return cross_entropy_grad(logits, labels)[0]


def cross_entropy_grad(logits, labels) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("cross_entropy needs a non-empty (N, C) batch")
    N, C = logits.shape
    if labels.shape != (N,) or labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must be {N} class indices below {C}")
    lp = log_softmax(logits)
    picked = lp[np.arange(N), labels]
    loss = float(-np.maximum(picked, _LOG_FLOOR).mean())
    grad = np.exp(lp)
    grad[np.arange(N), labels] -= 1.0
    grad[np.arange(N), labels] *= picked > _LOG_FLOOR
    return loss, grad / N


def mse_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# -- optimizer --------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              hyper: AdamHyper = AdamHyper()) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are not modified."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = hyper.beta1 * state.m.get(name, np.zeros_like(p)) + (1 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(name, np.zeros_like(p)) + (1 - hyper.beta2) * g * g
        m_hat = m / (1 - hyper.beta1**t)
        v_hat = v / (1 - hyper.beta2**t)
        new_p[name] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """In-place Adam over a model's live parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], hyper: AdamHyper = AdamHyper()):
        self.params = params
        self.hyper = hyper
        self.state = AdamState()
        self.scalars_updated = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        new_p, self.state = adam_step(self.params, grads, self.state, self.hyper)
        self.scalars_updated = 0
        for name, arr in self.params.items():
            arr[...] = new_p[name]
            self.scalars_updated += arr.size


# -- tasks ------------------------------------------------------------------

@dataclass
class FourierTask:
    x: np.ndarray
    y: np.ndarray
    cos_coef: np.ndarray
    sin_coef: np.ndarray


def fourier_series(x, cos_coef, sin_coef) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = np.arange(1, len(cos_coef) + 1)
    return np.cos(np.outer(x, k)) @ np.asarray(cos_coef) + np.sin(np.outer(x, k)) @ np.asarray(sin_coef)


def gen_fourier_task(seed: int, K: int, num_samples: int) -> FourierTask:
    """Samples of a random truncated Fourier series on ``[-pi, pi]``.

    Coefficients are drawn uniformly from ``[-1, 1]``.
    """
    if K < 1:
        raise ValueError("need at least one harmonic")
    rng = make_rng(seed)
    a = rng.uniform(-1, 1, K)
    b = rng.uniform(-1, 1, K)
    x = rng.uniform(-np.pi, np.pi, num_samples)
    return FourierTask(x, fourier_series(x, a, b), a, b)


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < val_fraction < 1:
        raise ValueError("validation fraction must lie strictly between 0 and 1")
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class FourierModel:
    """Frozen random features and linear host with an adapter on the host layer.

    ``pred(x) = r . (W u(x) + adapter(u(x)))`` where ``u`` is a frozen random
    tanh feature map and ``r`` a frozen mean readout.
    """

    def __init__(self, layer: InjectedLayer, rng: np.random.Generator):
        self.layer = layer
        n_x = layer.n_x
        self.freq = rng.uniform(0.5, 2.0, n_x)
        self.phase = rng.uniform(-1.0, 1.0, n_x)
        self.readout = np.full(layer.n_y, 1.0 / layer.n_y)

    def features(self, x) -> np.ndarray:
        return np.tanh(np.outer(np.asarray(x, dtype=np.float64), self.freq) + self.phase)

    def parameters(self) -> dict[str, np.ndarray]:
        return self.layer.adapter.parameters() if self.layer.adapter is not None else {}

    def predict(self, x) -> np.ndarray:
        return self.layer.forward(self.features(x)) @ self.readout

    def loss(self, batch) -> float:
        x, y = batch
        return mse_grad(self.predict(x), y)[0]

    def loss_and_grads(self, batch):
        x, y = batch
        h, cache = self.layer.forward_cache(self.features(x))
        loss, g_pred = mse_grad(h @ self.readout, y)
        grads, _ = self.layer.backward(cache, np.outer(g_pred, self.readout))
        return loss, grads


# -- char-level host --------------------------------------------------------

def synthetic_text(seed: int, num_chars: int, vocab: int, lexicon_size: int = 24, variant: int = 0) -> np.ndarray:
    """Token ids from a seeded word-salad language over ``vocab`` symbols.

    Token 0 is the word separator; words are random strings over the remaining
    symbols with a skewed frequency profile, so both unigram and bigram
    structure is learnable. The lexicon depends only on ``seed``; a non-zero
    ``variant`` reshuffles which words are frequent and draws a fresh
    sequence, giving a shifted dialect of the same language.
    """
    rng = make_rng(seed)
    words = [rng.integers(1, vocab, size=rng.integers(2, 6)) for _ in range(lexicon_size)]
    weights = 1.0 / np.arange(1, lexicon_size + 1)
    weights /= weights.sum()
    if variant:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, variant])))
        weights = weights[rng.permutation(lexicon_size)]
    out: list[int] = []
    while len(out) < num_chars:
        out.extend(words[rng.choice(lexicon_size, p=weights)].tolist())
        out.append(0)
    return np.asarray(out[:num_chars], dtype=np.int64)


class CharLMHost:
    """Single-block causal attention + ReLU MLP language model.

    Weights are ``(out, in)`` matrices. Query and value projections are
    :class:`InjectedLayer` objects so adapters can be attached after
    pre-training.
    """

    def __init__(self, seed: int, vocab: int, d_model: int, context: int):
        rng = make_rng(seed)
        self.vocab, self.d_model, self.context = vocab, d_model, context
        d, ff = d_model, 2 * d_model
        self.weights = {
            "embed": rng.normal(0, 0.5, (vocab, d)),
            "pos": rng.normal(0, 0.1, (context, d)),
            "wq": kaiming_uniform_init((d, d), d, rng) * 0.5,
            "wk": kaiming_uniform_init((d, d), d, rng) * 0.5,
            "wv": kaiming_uniform_init((d, d), d, rng) * 0.5,
            "wo": kaiming_uniform_init((d, d), d, rng) * 0.5,
            "w1": kaiming_uniform_init((ff, d), d, rng) * 0.5,
            "b1": np.zeros(ff),
            "w2": kaiming_uniform_init((d, ff), ff, rng) * 0.5,
            "b2": np.zeros(d),
            "unembed": kaiming_uniform_init((vocab, d), d, rng) * 0.5,
        }
        self.frozen = False
        self.q_proj = InjectedLayer(self.weights["wq"])
        self.v_proj = InjectedLayer(self.weights["wv"])

    def freeze(self) -> None:
        for arr in self.weights.values():
            arr.setflags(write=False)
        self.q_proj = InjectedLayer(self.weights["wq"], self.q_proj.adapter, self.q_proj.scale)
        self.v_proj = InjectedLayer(self.weights["wv"], self.v_proj.adapter, self.v_proj.scale)
        self.frozen = True

    def inject(self, q_adapter: Adapter | None, v_adapter: Adapter | None, scale: float = 1.0) -> None:
        self.q_proj = InjectedLayer(self.weights["wq"], q_adapter, scale)
        self.v_proj = InjectedLayer(self.weights["wv"], v_adapter, scale)

    def adapter_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for tag, proj in (("q", self.q_proj), ("v", self.v_proj)):
            if proj.adapter is not None:
                params.update({f"{tag}.{k}": v for k, v in proj.adapter.parameters().items()})
        return params

    def forward_cache(self, tokens: np.ndarray, need_grad: bool = True):
        W = self.weights
        B, T = tokens.shape
        if T > self.context:
            raise ValueError(f"sequence length {T} exceeds context {self.context}")
        d = self.d_model
        h0 = W["embed"][tokens] + W["pos"][:T]
        flat = h0.reshape(B * T, d)
        # Injected layers see the frozen copy of wq/wv; while pre-training the
        # live arrays are used directly so updates take effect.
        if self.frozen or self.q_proj.adapter is not None or self.v_proj.adapter is not None:
            if need_grad:
                q, q_cache = self.q_proj.forward_cache(flat)
                v, v_cache = self.v_proj.forward_cache(flat)
            else:
                (q, q_cache), (v, v_cache) = (self.q_proj.forward(flat), None), (self.v_proj.forward(flat), None)
        else:
            q, q_cache = flat @ W["wq"].T, None
            v, v_cache = flat @ W["wv"].T, None
        k = flat @ W["wk"].T
        q, k, v = (t.reshape(B, T, d) for t in (q, k, v))
        scores = np.einsum("btd,bsd->bts", q, k) / math.sqrt(d)
        mask = np.triu(np.ones((T, T), dtype=bool), 1)
        scores = np.where(mask, -1e30, scores)
        att = np.exp(scores - scores.max(axis=-1, keepdims=True))
        att /= att.sum(axis=-1, keepdims=True)
        o = np.einsum("bts,bsd->btd", att, v)
        h1 = h0 + o @ W["wo"].T
        pre = h1 @ W["w1"].T + W["b1"]
        act = np.maximum(pre, 0.0)
        h2 = h1 + act @ W["w2"].T + W["b2"]
        logits = h2 @ W["unembed"].T
        cache = dict(tokens=tokens, h0=h0, flat=flat, q=q, k=k, v=v, att=att, o=o, h1=h1, pre=pre, act=act, h2=h2,
                     q_cache=q_cache, v_cache=v_cache)
        return logits, cache

    def logits(self, tokens) -> np.ndarray:
        return self.forward_cache(np.atleast_2d(tokens), need_grad=False)[0]

    def backward(self, cache, g_logits):
        """Return (host weight grads, adapter grads prefixed ``q.``/``v.``)."""
        W = self.weights
        B, T, _ = g_logits.shape
        d = self.d_model
        gw: dict[str, np.ndarray] = {}
        gw["unembed"] = np.einsum("btv,btd->vd", g_logits, cache["h2"])
        g_h2 = g_logits @ W["unembed"]
        gw["b2"] = g_h2.sum(axis=(0, 1))
        gw["w2"] = np.einsum("btd,btf->df", g_h2, cache["act"])
        g_pre = (g_h2 @ W["w2"]) * (cache["pre"] > 0)
        gw["b1"] = g_pre.sum(axis=(0, 1))
        gw["w1"] = np.einsum("btf,btd->fd", g_pre, cache["h1"])
        g_h1 = g_h2 + g_pre @ W["w1"]
        gw["wo"] = np.einsum("btd,bte->de", g_h1, cache["o"])
        g_o = g_h1 @ W["wo"]
        att, q, k, v = cache["att"], cache["q"], cache["k"], cache["v"]
        g_att = np.einsum("btd,bsd->bts", g_o, v)
        g_v = np.einsum("bts,btd->bsd", att, g_o)
        g_scores = att * (g_att - (g_att * att).sum(axis=-1, keepdims=True)) / math.sqrt(d)
        g_q = np.einsum("bts,bsd->btd", g_scores, k)
        g_k = np.einsum("bts,btd->bsd", g_scores, q)
        flat = cache["flat"]
        g_q2, g_k2, g_v2 = (t.reshape(B * T, d) for t in (g_q, g_k, g_v))
        gw["wk"] = g_k2.T @ flat
        g_flat = g_k2 @ W["wk"]
        adapter_grads: dict[str, np.ndarray] = {}
        for tag, proj, g, key in (("q", self.q_proj, g_q2, "wq"), ("v", self.v_proj, g_v2, "wv")):
            c = cache[f"{tag}_cache"]
            gw[key] = g.T @ flat
            if c is None:
                g_flat = g_flat + g @ W[key]
            else:
                ag, gx = proj.backward(c, g)
                adapter_grads.update({f"{tag}.{n}": a for n, a in ag.items()})
                g_flat = g_flat + gx
        g_h0 = g_h1 + g_flat.reshape(B, T, d)
        gw["pos"] = np.zeros_like(W["pos"])
        gw["pos"][:T] = g_h0.sum(axis=0)
        gw["embed"] = np.zeros_like(W["embed"])
        np.add.at(gw["embed"], cache["tokens"], g_h0)
        return gw, adapter_grads

    def loss_and_grads_host(self, batch):
        inputs, targets = batch
        logits, cache = self.forward_cache(inputs)
        loss, g = cross_entropy_grad(logits.reshape(-1, self.vocab), targets.reshape(-1))
        gw, _ = self.backward(cache, g.reshape(logits.shape))
        return loss, gw


def lm_windows(tokens: np.ndarray, context: int) -> tuple[np.ndarray, np.ndarray]:
    n = (len(tokens) - 1) // context
    idx = np.arange(n * context).reshape(n, context)
    return tokens[idx], tokens[idx + 1]


def build_char_lm_host(seed: int, vocab: int = 32, d_model: int = 32, context: int = 32,
                       pretrain_steps: int = 300, corpus_chars: int = 20000, batch_size: int = 16,
                       lr: float = 3e-3) -> tuple[CharLMHost, dict]:
    """Seeded host, briefly pre-trained on synthetic text and then frozen.

    Returns the host and a summary with the loss before and after
    pre-training.
    """
    if vocab > 64 or context > 64 or d_model not in (32, 64):
        raise ValueError("desk scale needs vocab <= 64, context <= 64 and d_model in {32, 64}")
    host = CharLMHost(seed, vocab, d_model, context)
    text = synthetic_text(seed, corpus_chars, vocab)
    X, Y = lm_windows(text, context)
    rng = make_rng(seed + 17)
    eval_idx = rng.choice(len(X), size=min(64, len(X)), replace=False)

    def eval_loss() -> float:
        logits = host.logits(X[eval_idx])
        return cross_entropy(logits.reshape(-1, vocab), Y[eval_idx].reshape(-1))

    initial = eval_loss()
    opt = Adam(host.weights, AdamHyper(lr=lr))
    for _ in range(pretrain_steps):
        b = rng.choice(len(X), size=batch_size, replace=False)
        _, gw = host.loss_and_grads_host((X[b], Y[b]))
        opt.step(gw)
    final = eval_loss()
    host.freeze()
    return host, {"initial_loss": initial, "final_loss": final, "uniform_loss": math.log(vocab)}


class CharLMModel:
    """Frozen host with adapters on the query and value projections."""

    def __init__(self, host: CharLMHost):
        self.host = host

    def parameters(self) -> dict[str, np.ndarray]:
        return self.host.adapter_parameters()

    def loss(self, batch) -> float:
        x, y = batch
        logits = self.host.logits(x)
        return cross_entropy(logits.reshape(-1, self.host.vocab), y.reshape(-1))

    def loss_and_grads(self, batch):
        x, y = batch
        logits, cache = self.host.forward_cache(x)
        loss, g = cross_entropy_grad(logits.reshape(-1, self.host.vocab), y.reshape(-1))
        _, ag = self.host.backward(cache, g.reshape(logits.shape))
        return loss, ag


# -- gradient checking -------------------------------------------------------

class GradModel(Protocol):
    def parameters(self) -> dict[str, np.ndarray]: ...
    def loss_and_grads(self, batch) -> tuple[float, dict[str, np.ndarray]]: ...


def grad_check(model, epsilon: float = 1e-5, batch=None, floor: float = 1e-6, max_params: int = 5000) -> float:
    """Max relative gap between analytic and central-difference gradients.

    The gap for one scalar is ``|a - n| / max(|a|, |n|, floor')`` where
    ``floor' = max(floor, floor * max|grad|)``: structurally zero gradients
    (a CRZ right before a Z readout) would otherwise turn pure rounding noise
    in the difference quotient into a large relative error. Every scalar is
    perturbed, so the model must stay under ``max_params`` parameters.
    """
    params = model.parameters()
    total = sum(p.size for p in params.values())
    if total > max_params:
        raise ValueError(f"model has {total} parameters; exhaustive check allows {max_params}")
    _, grads = model.loss_and_grads(batch)
    gmax = max((float(np.max(np.abs(g))) for g in grads.values() if g.size), default=0.0)
    floor = max(floor, floor * gmax)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = model.loss_and_grads(batch)[0]
            flat[i] = orig - epsilon
            lm = model.loss_and_grads(batch)[0]
            flat[i] = orig
            num = (lp - lm) / (2 * epsilon)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


class DenseRegressionModel:
    """Affine map with squared loss on a fixed batch; a pure analytic baseline."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, batch: int = 8):
        self.w = kaiming_uniform_init((n_out, n_in), n_in, rng)
        self.b = rng.uniform(-0.1, 0.1, n_out)
        self.x = rng.normal(size=(batch, n_in))
        self.y = rng.normal(size=(batch, n_out))

    def parameters(self):
        return {"weight": self.w, "bias": self.b}

    def loss_and_grads(self, batch=None):
        pred = self.x @ self.w.T + self.b
        loss, g = mse_grad(pred, self.y)
        return loss, {"weight": g.T @ self.x, "bias": g.sum(axis=0)}


class AdapterRegressionModel:
    """Any adapter (or bare MPO) under a squared loss on a fixed batch."""

    def __init__(self, adapter, x: np.ndarray, y: np.ndarray):
        self.adapter, self.x, self.y = adapter, x, y

    def parameters(self):
        if isinstance(self.adapter, MpoLayer):
            return {f"site.{k}": t for k, t in enumerate(self.adapter.tensors)}
        return self.adapter.parameters()

    def loss_and_grads(self, batch=None):
        if isinstance(self.adapter, MpoLayer):
            pred = mpo_forward(self.adapter, self.x)
            loss, g = mse_grad(pred, self.y)
            gs, _ = mpo_backward(self.adapter, self.x, g)
            return loss, {f"site.{k}": t for k, t in enumerate(gs)}
        pred, cache = self.adapter.forward_cache(self.x)
        loss, g = mse_grad(pred, self.y)
        grads, _ = self.adapter.backward(cache, g)
        return loss, grads


# -- training loop ------------------------------------------------------------

@dataclass
class RunHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)
    ms_per_step: list[float] = field(default_factory=list)
    params: ParamReport | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        val = dict(self.val_loss)
        return [
            {"step": i + 1, "train_loss": loss, "val_loss": val.get(i + 1, ""), "ms_per_step": self.ms_per_step[i]}
            for i, loss in enumerate(self.train_loss)
        ]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "train_loss", "val_loss", "ms_per_step"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return path

    def summary(self) -> dict:
        return {
            "steps": len(self.train_loss),
            "initial_train_loss": self.train_loss[0] if self.train_loss else None,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "final_val_loss": self.val_loss[-1][1] if self.val_loss else None,
            "params": self.params.to_dict() if self.params else None,
            **self.extra,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2))
        return path


def make_adapter(cfg, n_x: int, n_y: int, rng: np.random.Generator) -> Adapter:
    """Build the configured adapter for an ``n_x -> n_y`` host layer."""
    a = cfg.adapter
    if a.kind == "lora":
        return LoraAdapter.create(n_x, n_y, rng, rank=a.lora.rank, scale=a.lora.scale)
    return QwthnAdapter.create(
        n_x, n_y, rng,
        qubits=a.qnn.qubits, blocks=a.qnn.blocks,
        mpo_a_spec=stage_mpo_spec("mpo_a", a.mpo_a, n_x, a.mpo_out),
        mpo_b_spec=stage_mpo_spec("mpo_b", a.mpo_b, a.mlp_out, n_y),
    )


@dataclass
class Prepared:
    model: object
    train_batches: Callable[[np.random.Generator, int], tuple]
    val_batch: tuple
    train_full: tuple
    adapters: list
    frozen: dict[str, np.ndarray]
    extra: dict


def prepare(cfg) -> Prepared:
    """Build the model with its adapters and the train/validation split (deterministic in the seed)."""
    rng = make_rng(cfg.seed)
    ts = cfg.train
    if cfg.task == "fourier_regression":
        fc = cfg.fourier
        task = gen_fourier_task(cfg.seed, fc.harmonics, fc.num_samples)
        host_w = kaiming_uniform_init((fc.n_y, fc.n_x), fc.n_x, rng)
        adapter = make_adapter(cfg, fc.n_x, fc.n_y, rng)
        model = FourierModel(InjectedLayer(host_w, adapter, cfg.adapter.scale), rng)
        tr, va = split_indices(len(task.x), ts.val_fraction, rng)
        X, Y = task.x, task.y

        def batches(r, bs):
            b = r.choice(tr, size=min(bs, len(tr)), replace=False)
            return X[b], Y[b]

        frozen = {"host.weight": model.layer.frozen_weight}
        return Prepared(model, batches, (X[va], Y[va]), (X[tr], Y[tr]), [adapter], frozen,
                        {"train_indices": tr.tolist(), "val_indices": va.tolist()})
    if cfg.task == "char_lm":
        lc = cfg.char_lm
        host, pre = build_char_lm_host(cfg.seed, lc.vocab, lc.d_model, lc.context, lc.pretrain_steps,
                                       lc.corpus_chars)
        d = lc.d_model
        qa = make_adapter(cfg, d, d, rng)
        va_ = make_adapter(cfg, d, d, rng)
        host.inject(qa, va_, cfg.adapter.scale)
        # Fine-tuning text reuses the host's lexicon with a reshuffled word distribution.
        text = synthetic_text(cfg.seed, lc.corpus_chars // 2, lc.vocab, variant=1)
        X, Y = lm_windows(text, lc.context)
        tr, va = split_indices(len(X), ts.val_fraction, rng)

        def batches(r, bs):
            b = r.choice(tr, size=min(bs, len(tr)), replace=False)
            return X[b], Y[b]

        model = CharLMModel(host)
        return Prepared(model, batches, (X[va], Y[va]), (X[tr], Y[tr]), [qa, va_], dict(host.weights),
                        {"pretrain": pre})
    raise ValueError(f"unknown task {cfg.task!r}")


def train(cfg, prepared: Prepared | None = None, progress: Callable[[int, float], None] | None = None) -> RunHistory:
    """Run ``cfg.train.steps`` Adam steps and record the loss history."""
    prep = prepared or prepare(cfg)
    ts = cfg.train
    if ts.steps < 1:
        raise ValueError("steps must be >= 1")
    model = prep.model
    params = model.parameters()
    opt = Adam(params, AdamHyper(ts.learning_rate, ts.beta1, ts.beta2, ts.eps))
    batch_rng = make_rng(cfg.seed + 2)
    hist = RunHistory()
    report = _combined_report(prep.adapters)
    hist.params = report
    initial_full = model.loss(prep.train_full)
    for step in range(1, ts.steps + 1):
        t0 = time.perf_counter()
        batch = prep.train_batches(batch_rng, ts.batch_size)
        loss, grads = model.loss_and_grads(batch)
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}")
        opt.step(grads)
        if opt.scalars_updated != report.total:
            raise AssertionError(f"optimizer touched {opt.scalars_updated} scalars, report says {report.total}")
        hist.train_loss.append(loss)
        hist.ms_per_step.append((time.perf_counter() - t0) * 1e3)
        if step % ts.eval_every == 0 or step == ts.steps:
            v = model.loss(prep.val_batch)
            if not math.isfinite(v):
                raise DivergenceError(f"validation loss became {v} at step {step}")
            hist.val_loss.append((step, v))
        if progress is not None:
            progress(step, loss)
    hist.extra = {"task": cfg.task, "adapter": cfg.adapter.kind, "optimizer_scalars": opt.scalars_updated,
                  "initial_full_train_loss": initial_full, "full_train_loss": model.loss(prep.train_full)}
    if "pretrain" in prep.extra:
        hist.extra["pretrain"] = prep.extra["pretrain"]
    return hist


def _combined_report(adapters: list) -> ParamReport:
    reports = [count_params(a) for a in adapters]
    if len(reports) == 1:
        return reports[0]
    stages: dict[str, int] = {}
    for i, r in enumerate(reports):
        stages.update({f"{i}.{k}": v for k, v in r.stages.items()})
    total = sum(r.total for r in reports)
    lora_total = sum(r.lora_total for r in reports)
    return ParamReport(reports[0].kind, stages, total, reports[0].lora_rank, lora_total, total / lora_total)
