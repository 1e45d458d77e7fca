"""Run configuration: a JSON document holding everything a command needs.

Schema (every key optional; unknown keys are rejected)::

    {
      "dataset": "asap" | "crp",
      "data_path": "training_set_rel3.tsv",   # relative paths resolve against $MSAS_DATA_DIR
      "prompt_specs_path": null,              # JSON list of prompt specs; null = built-in ASAP table
      "prompt": 1,
      "vocab_path": null,                     # one token per line; null = train on the loaded corpus
      "vocab_size": 4000,
      "encoder": {"d": 64, "n_layers": 2, "n_heads": 4, "ff_multiplier": 4,
                  "init_std": 0.02, "layer_norm_eps": 1e-12},
      "model": {"scales": [], "n_p": null, "doc_len": 510, "use_doc": true, "use_token": true},
      "training": {... TrainingConfig fields except seed ...},
      "transfer": false,
      "search_scales": "10:190:20",
      "seed": 0,
      "out_dir": "runs"
    }

``n_p: null`` computes the token budget from the prompt's essays. The hash of
the canonical serialization (``out_dir`` excluded, it does not change
results) is stamped into every checkpoint and report.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .trainer import TrainingConfig, parse_scales

DATA_DIR_ENV = "MSAS_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSettings:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_multiplier: int = 4
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12


@dataclass(frozen=True)
class ModelSettings:
    scales: tuple[int, ...] = ()
    n_p: int | None = None
    doc_len: int = 510
    use_doc: bool = True
    use_token: bool = True


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "asap"
    data_path: str = "training_set_rel3.tsv"
    prompt_specs_path: str | None = None
    prompt: int = 1
    vocab_path: str | None = None
    vocab_size: int = 4000
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    transfer: bool = False
    search_scales: str = "10:190:20"
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.dataset not in ("asap", "crp"):
            raise ConfigError(f"dataset must be 'asap' or 'crp', got {self.dataset!r}")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size too small")
        try:
            parse_scales(self.search_scales)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.training.seed != self.seed:
            object.__setattr__(self, "training", replace(self.training, seed=self.seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["scales"] = list(self.model.scales)
        del d["training"]["seed"]
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        del d["out_dir"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
            p = Path(os.environ[DATA_DIR_ENV]) / p
        return p

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = dict(raw)
        nested = {"encoder": EncoderSettings, "model": ModelSettings, "training": TrainingConfig}
        try:
            for key, kind in nested.items():
                if key in raw:
                    sub = dict(raw[key])
                    if key == "model" and "scales" in sub:
                        sub["scales"] = tuple(sub["scales"])
                    if key == "training" and "seed" in sub:
                        raise ConfigError("set the seed at the top level")
                    _check_keys(kind, sub, key)
                    raw[key] = kind(**sub)
            _check_keys(cls, raw, "config")
            return cls(**raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _check_keys(kind, raw: dict, where: str) -> None:
    unknown = set(raw) - {f.name for f in fields(kind)}
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw)
