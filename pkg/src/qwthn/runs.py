"""Run orchestration shared by the HTTP service and the command line.

A run directory holds everything needed to audit or repeat a training run;
``manifest.json`` lists each artifact by relative path.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from pydantic import BaseModel

from . import __version__, qcloud
from .adapter import QwthnAdapter, count_params, lora_param_count, save_adapter
from .config import RunConfig, check_adapter_dims
from .metrics import MetricReport, evaluate_records
from .report import emit_report, write_metrics
from .tensor import make_rng
from .train import Adam, FourierModel, make_adapter, prepare, train

MANIFEST = "manifest.json"
READOUT_SAMPLES = 8


class RunManifest(BaseModel):
    version: str
    seed: int
    config: dict
    artifacts: dict[str, str]
    summary: dict

    def path_of(self, run_dir, name: str) -> Path:
        return Path(run_dir) / self.artifacts[name]


def _backend_readout(cfg: RunConfig, prep, out: Path) -> dict | None:
    """Replay a few validation inputs through the configured execution backend.

    Training always uses exact expectations; this records how the trained
    adapter behaves when its circuits go through ``cfg.backend`` instead.
    """
    model = prep.model
    adapter = prep.adapters[0]
    if not isinstance(model, FourierModel) or not isinstance(adapter, QwthnAdapter):
        return None
    xs = model.features(prep.val_batch[0][:READOUT_SAMPLES])
    backend = qcloud.make_backend(cfg.backend.to_backend_config())
    remote = adapter.forward(xs, backend=backend, readout=cfg.backend.readout)
    exact = adapter.forward(xs)
    qcloud.write_ledger(backend, out / "jobs.jsonl")
    return {
        "backend": backend.kind,
        "readout": cfg.backend.readout,
        "samples": int(xs.shape[0]),
        "circuits_executed": backend.circuits_executed,
        "max_abs_deviation": float(np.max(np.abs(remote - exact))),
    }


def run_training(cfg: RunConfig, out_dir, progress: Callable[[int, float], None] | None = None) -> RunManifest:
    """Train ``cfg`` and write checkpoint, history, chart, IR dumps and manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg)
    hist = train(cfg, prep, progress=progress)
    artifacts: dict[str, str] = {}

    snap = out / "config.json"
    snap.write_text(json.dumps(cfg.model_dump(), indent=2))
    artifacts["config"] = snap.name

    names = ["adapter"] if len(prep.adapters) == 1 else ["adapter_q", "adapter_v"]
    for name, adapter in zip(names, prep.adapters):
        save_adapter(adapter, out / f"{name}.json")
        artifacts[name] = f"{name}.json"
        if isinstance(adapter, QwthnAdapter):
            ir = out / f"{name}_circuit.ir"
            ir.write_text(qcloud.serialize_ir(adapter.circuit(adapter.encode(_first_adapter_input(prep)))))
            artifacts[f"{name}_ir"] = ir.name

    readout = _backend_readout(cfg, prep, out) if cfg.adapter.kind == "qwthn" else None
    if readout is not None:
        artifacts["jobs"] = "jobs.jsonl"
        hist.extra["backend_readout"] = readout

    for fmt, path in emit_report(hist, None, ("csv", "json", "svg"), out).items():
        artifacts[f"history_{fmt}"] = path.name

    manifest = RunManifest(version=__version__, seed=cfg.seed, config=cfg.model_dump(),
                           artifacts=artifacts, summary=hist.summary())
    (out / MANIFEST).write_text(manifest.model_dump_json(indent=2))
    missing = [a for a in artifacts.values() if not (out / a).exists()]
    if missing:
        raise RuntimeError(f"artifacts listed but not written: {missing}")
    return manifest


def _first_adapter_input(prep) -> np.ndarray:
    """Input the adapter sees for the first training example (first position for the char host)."""
    model = prep.model
    if isinstance(model, FourierModel):
        return model.features(prep.train_full[0][:1])[0]
    w = model.host.weights
    return w["embed"][prep.train_full[0][0, 0]] + w["pos"][0]


def load_manifest(run_dir) -> RunManifest:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{run_dir} has no {MANIFEST}; is it a run directory?")
    return RunManifest.model_validate_json(path.read_text())


def read_jsonl(path) -> list[dict]:
    rows = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows


def run_eval(records: Iterable[dict], run_dir=None, percent: bool = False) -> MetricReport:
    """Score generated records; with ``run_dir`` the report is also written there."""
    report = evaluate_records(records)
    if run_dir is not None:
        load_manifest(run_dir)
        write_metrics(report, run_dir, percent=percent)
    return report


def params_table(cfg: RunConfig) -> dict:
    """QWTHN vs LoRA parameter counts on the ``cfg.layer`` dimensions.

    Totals are cross-checked against the number of scalars one optimizer
    step touches.
    """
    n_x, n_y = cfg.layer.n_x, cfg.layer.n_y
    check_adapter_dims(cfg, n_x, n_y)
    rank = cfg.adapter.lora.rank
    rows = []
    for kind in ("qwthn", "lora"):
        c = cfg.model_copy(update={"adapter": cfg.adapter.model_copy(update={"kind": kind})})
        adapter = make_adapter(c, n_x, n_y, make_rng(cfg.seed))
        rep = count_params(adapter, lora_rank=rank)
        params = {k: v.copy() for k, v in adapter.parameters().items()}
        opt = Adam(params)
        opt.step({k: np.zeros_like(v) for k, v in params.items()})
        if opt.scalars_updated != rep.total:
            raise RuntimeError(f"{kind}: optimizer touched {opt.scalars_updated}, report says {rep.total}")
        rows.append({**rep.to_dict(), "optimizer_scalars": opt.scalars_updated})
    return {"n_x": n_x, "n_y": n_y, "lora_rank": rank, "baseline": lora_param_count(n_x, n_y, rank), "rows": rows}


def format_params_table(table: dict) -> str:
    base = table["baseline"]
    lines = [f"layer {table['n_x']} -> {table['n_y']}, LoRA rank {table['lora_rank']} = {base} parameters (100%)",
             f"{'adapter':<8} {'stage':<8} {'params':>10}"]
    for row in table["rows"]:
        for stage, n in row["stages"].items():
            lines.append(f"{row['kind']:<8} {stage:<8} {n:>10}")
        lines.append(f"{row['kind']:<8} {'total':<8} {row['total']:>10}  {100 * row['total'] / base:.2f}%")
    return "\n".join(lines)

