"""Training configuration: the six ablation flags plus hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .layers import ModelSpec

# Bit weights give config_id = BN*32 + WL*16 + DA*8 + MX*4 + UF*2 + WD*1.
FLAGS = ("bn", "wl", "da", "mx", "uf", "wd")
FLAG_BITS = {"bn": 32, "wl": 16, "da": 8, "mx": 4, "uf": 2, "wd": 1}
SCHEDULES = ("constant", "one-cycle", "step")


@dataclass(frozen=True)
class Hyper:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "one-cycle"
    epochs: int = 10
    batch_size: int = 32
    mixup_alpha: float = 0.4
    hidden_size: int = 32
    trunk_channels: tuple[int, ...] = (8, 16)
    dropout: tuple[float, float] = (0.25, 0.5)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    final_bn_learnable: bool = False

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs two samples)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.base_lr < 0 or self.weight_decay < 0 or self.mixup_alpha <= 0:
            raise ValueError("base_lr and weight_decay must be >= 0 and mixup_alpha > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        d["dropout"] = list(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "Hyper":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        for key in ("trunk_channels", "dropout"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float
    momentum: float
    weight_decay: float
    schedule: str
    epochs: int
    batch_size: int


@dataclass(frozen=True)
class LossConfig:
    class_weights: tuple[float, float] = (1.0, 1.0)
    mixup_enabled: bool = False
    mixup_alpha: float = 0.4

    def __post_init__(self):
        if min(self.class_weights) <= 0:
            raise ValueError("class weights must be strictly positive")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")


def inverse_frequency_weights(labels, num_classes: int = 2) -> tuple[float, ...]:
    """``w_c = N / (num_classes * N_c)``; absent classes get weight 1."""
    labels = np.asarray(labels)
    n = len(labels)
    out = []
    for c in range(num_classes):
        n_c = int(np.sum(labels == c))
        out.append(n / (num_classes * n_c) if n_c else 1.0)
    return tuple(out)


@dataclass(frozen=True)
class TrainConfig:
    bn_final: bool = False
    weighted_loss: bool = False
    data_augment: bool = False
    mixup: bool = False
    unfreeze_bn: bool = False
    weight_decay: bool = False
    hyper: Hyper = field(default_factory=Hyper)

    @property
    def flags(self) -> dict[str, bool]:
        return {
            "bn": self.bn_final,
            "wl": self.weighted_loss,
            "da": self.data_augment,
            "mx": self.mixup,
            "uf": self.unfreeze_bn,
            "wd": self.weight_decay,
        }

    @property
    def config_id(self) -> int:
        return sum(FLAG_BITS[k] for k, on in self.flags.items() if on)

    @classmethod
    def from_id(cls, config_id: int, hyper: Hyper | None = None) -> "TrainConfig":
        if not 0 <= config_id < 64:
            raise ValueError(f"config_id must lie in 0..63, got {config_id}")
        on = {k: bool(config_id & bit) for k, bit in FLAG_BITS.items()}
        return cls.from_flag_set({k for k, v in on.items() if v}, hyper)

    @classmethod
    def from_flag_set(cls, names, hyper: Hyper | None = None) -> "TrainConfig":
        names = {n.strip().lower() for n in names if n.strip()}
        unknown = names - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown flags {sorted(unknown)}; valid flags are {list(FLAGS)}")
        return cls(
            bn_final="bn" in names,
            weighted_loss="wl" in names,
            data_augment="da" in names,
            mixup="mx" in names,
            unfreeze_bn="uf" in names,
            weight_decay="wd" in names,
            hyper=hyper or Hyper(),
        )

    def with_hyper(self, **changes) -> "TrainConfig":
        return replace(self, hyper=replace(self.hyper, **changes))

    def model_spec(self) -> ModelSpec:
        h = self.hyper
        return ModelSpec(
            trunk_channels=tuple(h.trunk_channels),
            hidden_size=h.hidden_size,
            final_bn=self.bn_final,
            freeze_trunk_bn=not self.unfreeze_bn,
            final_bn_learnable=h.final_bn_learnable,
            dropout=tuple(h.dropout),
            bn_eps=h.bn_eps,
            bn_momentum=h.bn_momentum,
        )

    def optim_config(self) -> OptimConfig:
        h = self.hyper
        return OptimConfig(
            base_lr=h.base_lr,
            momentum=h.momentum,
            weight_decay=h.weight_decay if self.weight_decay else 0.0,
            schedule=h.schedule,
            epochs=h.epochs,
            batch_size=h.batch_size,
        )

    def loss_config(self, train_labels) -> LossConfig:
        weights = inverse_frequency_weights(train_labels) if self.weighted_loss else (1.0, 1.0)
        return LossConfig(class_weights=weights, mixup_enabled=self.mixup, mixup_alpha=self.hyper.mixup_alpha)

    def to_dict(self) -> dict:
        return {"config_id": self.config_id, **self.flags, "hyper": self.hyper.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = [k for k in FLAGS if d.get(k)]
        cfg = cls.from_flag_set(names, Hyper.from_dict(d.get("hyper")))
        if "config_id" in d and d["config_id"] != cfg.config_id:
            raise ValueError(f"config_id {d['config_id']} disagrees with flags (expected {cfg.config_id})")
        return cfg
