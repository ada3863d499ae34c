"""Strict JSON run configuration.

Every section rejects unknown keys. Omitted keys take the defaults below,
which are also shipped as ``defaults.json`` next to this module.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .adapter import ConfigError, stage_mpo_spec
from .qcloud import BackendConfig

DEFAULTS_PATH = Path(__file__).with_name("defaults.json")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MpoConfig(_Strict):
    sites: int = Field(3, ge=1)
    bond_dim: int = Field(2, ge=1)
    in_dims: Optional[list[int]] = None
    out_dims: Optional[list[int]] = None


class QnnConfig(_Strict):
    qubits: int = Field(4, ge=1, le=12)
    blocks: int = Field(2, ge=0)


class LoraConfig(_Strict):
    rank: int = Field(4, ge=1)
    scale: float = 1.0


class AdapterConfig(_Strict):
    kind: Literal["qwthn", "lora"] = "qwthn"
    mpo_out: int = Field(128, ge=1)
    mlp_out: int = Field(128, ge=1)
    mpo_a: MpoConfig = MpoConfig()
    mpo_b: MpoConfig = MpoConfig()
    qnn: QnnConfig = QnnConfig()
    lora: LoraConfig = LoraConfig()
    scale: float = 1.0

    @model_validator(mode="after")
    def _chain(self):
        if self.kind == "qwthn" and self.qnn.qubits < 2 and self.qnn.blocks > 0:
            raise ValueError("[qnn] CRZ blocks need at least two qubits")
        return self


class LayerConfig(_Strict):
    n_x: int = Field(3584, ge=1)
    n_y: int = Field(3584, ge=1)


class FourierConfig(_Strict):
    harmonics: int = Field(3, ge=1)
    num_samples: int = Field(512, ge=2)
    n_x: int = Field(16, ge=1)
    n_y: int = Field(16, ge=1)


class CharLMConfig(_Strict):
    vocab: int = Field(32, ge=2, le=64)
    d_model: Literal[32, 64] = 32
    context: int = Field(32, ge=2, le=64)
    corpus_chars: int = Field(20000, ge=256)
    pretrain_steps: int = Field(300, ge=0)


class TrainSettings(_Strict):
    steps: int = Field(500, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = Field(0.1, gt=0, lt=1)
    eval_every: int = Field(50, ge=1)


class BackendSettings(_Strict):
    kind: Literal["local_exact", "mock_cloud"] = "local_exact"
    shots: Optional[int] = Field(None, ge=1)
    group_limit: int = Field(10, ge=1)
    latency_ms: float = Field(0.0, ge=0)
    seed: int = Field(7, ge=0)
    fail_groups: list[int] = []
    timeout_s: float = Field(30.0, gt=0)
    readout: Literal["combined", "per_observable"] = "combined"

    def to_backend_config(self) -> BackendConfig:
        return BackendConfig(self.kind, self.shots, self.group_limit, self.latency_ms, self.seed,
                             tuple(self.fail_groups), self.timeout_s)


class RunConfig(_Strict):
    seed: int = Field(7, ge=0)
    task: Literal["fourier_regression", "char_lm"] = "fourier_regression"
    layer: LayerConfig = LayerConfig()
    fourier: FourierConfig = FourierConfig()
    char_lm: CharLMConfig = CharLMConfig()
    adapter: AdapterConfig = AdapterConfig()
    train: TrainSettings = TrainSettings()
    backend: BackendSettings = BackendSettings()

    @field_validator("seed")
    @classmethod
    def _seed64(cls, v):
        if v >= 2**63:
            raise ValueError("seed must fit in 63 bits")
        return v

    def host_dims(self) -> tuple[int, int]:
        if self.task == "char_lm":
            return self.char_lm.d_model, self.char_lm.d_model
        return self.fourier.n_x, self.fourier.n_y


def check_adapter_dims(cfg: RunConfig, n_x: int, n_y: int) -> None:
    """Raise :class:`ConfigError` naming the first stage whose dimensions break the chain."""
    a = cfg.adapter
    if a.kind != "qwthn":
        return
    stage_mpo_spec("mpo_a", a.mpo_a, n_x, a.mpo_out)
    stage_mpo_spec("mpo_b", a.mpo_b, a.mlp_out, n_y)


def parse_config(data: dict, check_dims: bool = True) -> RunConfig:
    """Validate a config mapping; schema or dimension problems raise :class:`ConfigError`.

    ``check_dims`` verifies the adapter chain against the training task's
    host dimensions; parameter reports check against ``layer`` instead.
    """
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        stage = ".".join(str(p) for p in err["loc"]) or "config"
        raise ConfigError(stage, err["msg"]) from exc
    if check_dims:
        check_adapter_dims(cfg, *cfg.host_dims())
    return cfg


def load_config(path, check_dims: bool = True) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return parse_config(data, check_dims)


def default_config() -> RunConfig:
    return RunConfig()
