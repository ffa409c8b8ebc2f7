"""Training and experiment configuration.

Config files are flat ``key = value`` text with dotted namespaces::

    # comment
    dataset.name = cmnist-lt
    dataset.rho = 100
    method = CSA
    train.epochs = 8
    train.lambda_dist = uniform

Values are parsed as JSON literals where possible (numbers, true/false,
null, lists) and kept as strings otherwise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

METHODS = ("CE", "CB_RS", "CRT", "MIXUP", "CSA", "CSA_MIXUP")


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 128
    backbone: str = "lenet"
    lr: float = 0.1
    momentum: float = 0.7
    weight_decay: float = 1e-2
    lr_schedule: str = "cosine"  # cosine | step | constant
    lr_milestones: list = field(default_factory=lambda: [160, 180])
    lr_gamma: float = 0.1
    augment: str = "none"  # none | crop_flip
    # context-shift augmentation
    warmup_epochs: int = 1
    freeze_aug_last_epochs: int = 1
    delta: float = 0.8
    bank_capacity: int | None = None  # None -> batch_size
    lambda_dist: str = "uniform"  # uniform | beta
    lambda_a: float = 0.0
    lambda_b: float = 1.0
    lambda_per_sample: bool = False
    balanced_q: float = 0.0
    replica_refresh: str = "once"  # once | per_epoch
    loss_uniform: str = "cross_entropy"
    loss_balanced: str = "cross_entropy"
    # baselines
    crt_epochs: int = 4
    mixup_alpha: float = 1.0
    mixup_uniform: bool = False  # CSA_MIXUP: mix the uniform-branch batch
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0 or self.freeze_aug_last_epochs < 0:
            raise ValueError("warmup_epochs and freeze_aug_last_epochs must be >= 0")
        if self.warmup_epochs + self.freeze_aug_last_epochs > self.epochs:
            raise ValueError("warmup_epochs + freeze_aug_last_epochs exceeds epochs")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.lambda_dist not in ("uniform", "beta"):
            raise ValueError(f"lambda_dist must be 'uniform' or 'beta', got {self.lambda_dist!r}")
        if self.lambda_dist == "uniform" and not 0.0 <= self.lambda_a <= self.lambda_b <= 1.0:
            raise ValueError("uniform lambda needs 0 <= a <= b <= 1")
        if self.lambda_dist == "beta" and not (self.lambda_a > 0 and self.lambda_b > 0):
            raise ValueError("beta lambda needs positive parameters")
        if self.replica_refresh not in ("once", "per_epoch"):
            raise ValueError("replica_refresh must be 'once' or 'per_epoch'")
        if self.lr_schedule not in ("cosine", "step", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.augment not in ("none", "crop_flip"):
            raise ValueError(f"unknown augment {self.augment!r}")
        for loss in (self.loss_uniform, self.loss_balanced):
            if loss != "cross_entropy":
                raise ValueError(f"unsupported loss {loss!r}")
        if self.bank_capacity is not None and self.bank_capacity < 1:
            raise ValueError("bank_capacity must be positive")

    @property
    def capacity(self) -> int:
        return self.bank_capacity or self.batch_size

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# desk-scale LeNet recipe (MNIST family) and the CIFAR ResNet-32 recipe
PRESETS: dict[str, dict] = {
    "mnist-lt": {},
    "fashion-lt": {},
    "cmnist-lt": {},
    "cifar10-lt": {
        "epochs": 200, "backbone": "resnet32", "lr": 0.2, "momentum": 0.9,
        "weight_decay": 2e-4, "lr_schedule": "step", "augment": "crop_flip",
        "warmup_epochs": 10, "freeze_aug_last_epochs": 3, "crt_epochs": 10,
    },
}
PRESETS["cifar100-lt"] = dict(PRESETS["cifar10-lt"])


def preset(dataset: str, **overrides) -> TrainConfig:
    return TrainConfig(**{**PRESETS.get(dataset, {}), **overrides})


@dataclass
class ExperimentConfig:
    dataset: str = "mnist-lt"
    rho: float = 100.0
    data_seed: int = 0
    method: str = "CE"
    output: str = "runs"
    head: str | None = None  # evaluation head; None -> method default
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")

    def to_flat(self) -> dict:
        flat = {
            "dataset.name": self.dataset,
            "dataset.rho": self.rho,
            "dataset.seed": self.data_seed,
            "method": self.method,
            "output": self.output,
            "eval.head": self.head,
        }
        flat.update({f"train.{k}": v for k, v in self.train.to_dict().items()})
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_flat().items())


_TOP_KEYS = {
    "dataset.name": "dataset",
    "dataset.rho": "rho",
    "dataset.seed": "data_seed",
    "method": "method",
    "output": "output",
    "eval.head": "head",
}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def build_experiment(flat: dict) -> ExperimentConfig:
    """Resolve flat dotted keys into an ExperimentConfig on top of the
    dataset preset; unknown keys raise ValueError listing all of them."""
    unknown = [k for k in flat if k not in _TOP_KEYS and not (k.startswith("train.") and k[6:] in _TRAIN_KEYS)]
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    top = {_TOP_KEYS[k]: v for k, v in flat.items() if k in _TOP_KEYS}
    dataset = top.get("dataset", ExperimentConfig.dataset)
    train = preset(dataset, **{k[6:]: v for k, v in flat.items() if k.startswith("train.")})
    return ExperimentConfig(train=train, **top)


def load_experiment(path=None, overrides: dict | None = None) -> ExperimentConfig:
    flat = parse_kv(Path(path).read_text()) if path else {}
    flat.update(overrides or {})
    return build_experiment(flat)
