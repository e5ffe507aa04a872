"""Low-rank adapters for ``nn.Linear`` layers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError

# classification heads that stay trainable when the base is frozen
HEAD_MODULES = ("classifier", "score")
DEFAULT_TARGETS = {"distilbert": ("q_lin", "v_lin")}


@dataclass(frozen=True)
class LoraConfig:
    r: int = 8
    alpha: float = 32.0
    dropout: float = 0.05
    target_modules: tuple[str, ...] | None = None
    frozen_base: bool = True

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError("LoRA rank r must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("LoRA alpha must be > 0")

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "target_modules": list(self.target_modules) if self.target_modules else None,
            "frozen_base": self.frozen_base,
        }


class LoRALinear(nn.Module):
    """``base(x) + (alpha / r) * B(A(dropout(x)))`` with B initialised to zero."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        self.scaling = alpha / r
        self.lora_A = nn.Parameter(torch.empty(r, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.base(x) + (self.drop(x) @ self.lora_A.T @ self.lora_B.T) * self.scaling


def apply_lora(model: nn.Module, cfg: LoraConfig, arch: str = "distilbert") -> dict:
    """Wrap target linears in place and freeze the rest; returns parameter counts."""
    targets = cfg.target_modules or DEFAULT_TARGETS.get(arch)
    if not targets:
        raise ConfigError(f"no default LoRA targets for arch {arch!r}")
    n_base = sum(p.numel() for p in model.parameters())
    if cfg.frozen_base:
        for p in model.parameters():
            p.requires_grad_(False)
    replaced = 0
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            if child_name in targets:
                if not isinstance(child, nn.Linear):
                    raise ConfigError(f"LoRA target {name}.{child_name} is not nn.Linear")
                setattr(module, child_name, LoRALinear(child, cfg.r, cfg.alpha, cfg.dropout))
                replaced += 1
    if not replaced:
        raise ConfigError(f"no modules named {targets} found")
    for name, module in model.named_modules():
        if name.split(".")[-1] in HEAD_MODULES:
            for p in module.parameters():
                p.requires_grad_(True)
    n_train = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return {"base_params": n_base, "trainable_params": n_train, "adapted_modules": replaced,
            "trainable_fraction": n_train / n_base}
