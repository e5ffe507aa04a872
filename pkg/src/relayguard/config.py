"""Run configuration: one YAML/JSON key-value file, command-line overrides on top."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .classifier import TrainConfig
from .errors import ConfigError
from .evaluate import DEFAULT_SNRS
from .lora import LoraConfig
from .relay import RelaySettings
from .scenarios import GeneratorConfig
from .textualize import TemplateId
from .waveform import SystemConfig

CAMPAIGNS = ("main", "complex", "noise", "prompts", "latency")


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    models_dir: str = "models"
    results_dir: str = "results"
    asset_dir: str = "assets/reference-distilbert"
    seed: int = 0  # scenario generation
    split_seed: int = 42
    train_fraction: float = 0.8
    train_subset: int | None = None  # stratified cap on the training set
    tsa_holdout_size: int = 2000
    noise_seed: int = 0
    snr_list: tuple[float, ...] = DEFAULT_SNRS
    latency_samples: int = 200
    latency_warmup: int = 10
    template: TemplateId = TemplateId.BASELINE
    campaign: str = "main"
    system: SystemConfig = field(default_factory=SystemConfig)
    relay: RelaySettings = field(default_factory=RelaySettings)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.campaign not in CAMPAIGNS:
            raise ConfigError(f"campaign must be one of {CAMPAIGNS}, got {self.campaign!r}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.generator.seed != self.seed:
            # the top-level seed is authoritative for generation
            object.__setattr__(self, "generator", replace(self.generator, seed=self.seed))

    def to_dict(self) -> dict:
        return {
            "data_dir": self.data_dir,
            "models_dir": self.models_dir,
            "results_dir": self.results_dir,
            "asset_dir": self.asset_dir,
            "seed": self.seed,
            "split_seed": self.split_seed,
            "train_fraction": self.train_fraction,
            "train_subset": self.train_subset,
            "tsa_holdout_size": self.tsa_holdout_size,
            "noise_seed": self.noise_seed,
            "snr_list": list(self.snr_list),
            "latency_samples": self.latency_samples,
            "latency_warmup": self.latency_warmup,
            "template": self.template.value,
            "campaign": self.campaign,
            "system": self.system.to_dict(),
            "relay": self.relay.to_dict(),
            "generator": self.generator.to_dict(),
            "train": self.train.to_dict(),
            "lora": self.lora.to_dict(),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "system" in d:
                d["system"] = SystemConfig.from_dict(d["system"])
            if "relay" in d:
                d["relay"] = RelaySettings(**d["relay"])
            if "generator" in d:
                g = dict(d["generator"])
                for key in ("attack_kinds", "fault_multiple_range", "dc_tau_range"):
                    if key in g:
                        g[key] = tuple(g[key])
                d["generator"] = GeneratorConfig(**g)
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if "lora" in d:
                lo = dict(d["lora"])
                if lo.get("target_modules"):
                    lo["target_modules"] = tuple(lo["target_modules"])
                d["lora"] = LoraConfig(**lo)
            if "template" in d:
                d["template"] = TemplateId.parse(d["template"])
            if "snr_list" in d:
                d["snr_list"] = tuple(float(s) for s in d["snr_list"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply non-None overrides (command-line flags win over the file)."""
        kw = {k: v for k, v in kw.items() if v is not None}
        if "template" in kw:
            try:
                kw["template"] = TemplateId.parse(kw["template"])
            except ValueError:
                raise ConfigError(f"unknown template {kw['template']!r}") from None
        if "snr_list" in kw:
            kw["snr_list"] = tuple(float(s) for s in kw["snr_list"])
        return replace(self, **kw)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    import yaml

    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    import yaml

    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
