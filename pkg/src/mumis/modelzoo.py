"""Small classifiers, supervised training, and checkpoint persistence."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn
from torch.nn import functional as F

from .data import LabeledDataset

logger = logging.getLogger(__name__)

META_SCHEMA_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged or failed to reach its accuracy floor."""


ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}


class SmallConvNet(nn.Module):
    """Three conv blocks with batch norm followed by a two-layer head.

    ``activation`` names an entry of :data:`ACTIVATIONS`.
    """

    def __init__(
        self, in_channels: int = 1, side: int = 8, num_classes: int = 10, width: int = 16, activation: str = "relu"
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        act = ACTIVATIONS[activation]
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.BatchNorm2d(width),
            act(),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.BatchNorm2d(2 * width),
            act(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.BatchNorm2d(2 * width),
            act(),
            nn.MaxPool2d(2),
        )
        flat = 2 * width * (side // 4) ** 2
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(flat, 64), act(), nn.Linear(64, num_classes))

    def forward(self, x):
        return self.head(self.features(x))


class MLP(nn.Module):
    """Tanh MLP; smooth, so finite-difference oracles behave."""

    def __init__(self, in_features: int, num_classes: int, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(), nn.Linear(in_features, hidden), nn.Tanh(), nn.Linear(hidden, num_classes)
        )

    def forward(self, x):
        return self.net(x)


class LinearModel(nn.Module):
    def __init__(self, in_features: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_features, num_classes)

    def forward(self, x):
        return self.fc(x.flatten(1))


def build_model(arch_tag: str, input_shape, num_classes: int, **kwargs) -> nn.Module:
    in_features = int(np.prod(input_shape))
    if arch_tag == "convnet":
        return SmallConvNet(in_channels=input_shape[0], side=input_shape[-1], num_classes=num_classes, **kwargs)
    if arch_tag == "mlp":
        return MLP(in_features, num_classes, **kwargs)
    if arch_tag == "linear":
        return LinearModel(in_features, num_classes)
    raise ValueError(f"unknown architecture {arch_tag!r}")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    lr_milestones: list[int] = field(default_factory=lambda: [20])
    seed: int = 0
    min_train_acc: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


# Desk fixture: SmallConvNet(width=32) on the built-in datasets with a 95% train-accuracy floor.
DESK_ARCH = ("convnet", {"width": 32})
DESK_RECIPE = TrainConfig(epochs=30, lr=0.05, batch_size=64, lr_milestones=[20], min_train_acc=95.0)


def _tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@dataclass
class ModelCheckpoint:
    """Classifier parameters plus everything needed to rebuild the model.

    ``norm_stats`` holds the batch-norm running statistics, which stay
    frozen during unlearning.
    """

    arch_tag: str
    input_shape: tuple[int, ...]
    parameters: dict[str, torch.Tensor]
    norm_stats: dict[str, torch.Tensor]
    label_space: list[int]
    train_seed: int = 0
    train_recipe: dict = field(default_factory=dict)
    arch_kwargs: dict = field(default_factory=dict)
    granularity: str = "fine"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: nn.Module, arch_tag: str, input_shape, label_space, **meta) -> "ModelCheckpoint":
        params = {n: p.detach().clone() for n, p in model.named_parameters()}
        buffers = {n: b.detach().clone() for n, b in model.named_buffers()}
        return cls(
            arch_tag=arch_tag,
            input_shape=tuple(input_shape),
            parameters=params,
            norm_stats=buffers,
            label_space=list(label_space),
            **meta,
        )

    @property
    def num_classes(self) -> int:
        return len(self.label_space)

    def to_model(self, dtype: torch.dtype | None = None) -> nn.Module:
        model = build_model(self.arch_tag, self.input_shape, self.num_classes, **self.arch_kwargs)
        state = {**self.parameters, **self.norm_stats}
        model.load_state_dict(state, strict=True)
        if dtype is not None:
            model = model.to(dtype)
        model.eval()
        return model

    def with_model(self, model: nn.Module, **extra) -> "ModelCheckpoint":
        """Copy of this checkpoint carrying ``model``'s current weights."""
        new = copy.copy(self)
        new.parameters = {n: p.detach().clone().to(torch.float32) for n, p in model.named_parameters()}
        new.norm_stats = {
            n: (b.detach().clone().to(torch.float32) if b.is_floating_point() else b.detach().clone())
            for n, b in model.named_buffers()
        }
        new.extra = {**self.extra, **extra}
        return new

    def norm_stats_digest(self) -> str:
        return _tensor_digest(self.norm_stats)

    def digest(self) -> str:
        return _tensor_digest({**self.parameters, **{"buffer:" + k: v for k, v in self.norm_stats.items()}})

    def meta(self) -> dict:
        return {
            "schema_version": META_SCHEMA_VERSION,
            "arch_tag": self.arch_tag,
            "arch_kwargs": self.arch_kwargs,
            "input_shape": list(self.input_shape),
            "label_space": self.label_space,
            "granularity": self.granularity,
            "train_seed": self.train_seed,
            "train_recipe": self.train_recipe,
            "parameter_names": sorted(self.parameters),
            "norm_stat_names": sorted(self.norm_stats),
            "digest": self.digest(),
            "extra": self.extra,
        }

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.contiguous() for k, v in {**self.parameters, **self.norm_stats}.items()}
        save_file(tensors, str(directory / "params.safetensors"))
        (directory / "meta.json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "ModelCheckpoint":
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no checkpoint at {directory} (missing meta.json)")
        meta = json.loads(meta_path.read_text())
        if meta.get("schema_version") != META_SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema_version')!r}")
        tensors = load_file(str(directory / "params.safetensors"))
        return cls(
            arch_tag=meta["arch_tag"],
            input_shape=tuple(meta["input_shape"]),
            parameters={k: tensors[k] for k in meta["parameter_names"]},
            norm_stats={k: tensors[k] for k in meta["norm_stat_names"]},
            label_space=list(meta["label_space"]),
            train_seed=meta["train_seed"],
            train_recipe=meta["train_recipe"],
            arch_kwargs=meta["arch_kwargs"],
            granularity=meta["granularity"],
            extra=meta.get("extra", {}),
        )


def as_module(model_or_ckpt) -> nn.Module:
    if isinstance(model_or_ckpt, ModelCheckpoint):
        return model_or_ckpt.to_model()
    return model_or_ckpt


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def predict_logits(model, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    model = as_module(model)
    was_training = model.training
    model.eval()
    dtype = _param_dtype(model)
    out = torch.cat([model(x[i : i + batch_size].to(dtype)) for i in range(0, len(x), batch_size)])
    model.train(was_training)
    return out


def evaluate_accuracy(model, dataset: LabeledDataset, indices, granularity: str = "fine") -> float:
    """Percentage of ``indices`` classified correctly at ``granularity``."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot evaluate accuracy on an empty index set")
    idx = torch.from_numpy(indices)
    pred = predict_logits(model, dataset.images[idx]).argmax(1)
    correct = (pred == dataset.targets(granularity)[idx]).sum().item()
    return 100.0 * correct / indices.size


def train(
    dataset: LabeledDataset,
    indices,
    cfg: TrainConfig,
    arch_tag: str = "convnet",
    granularity: str = "fine",
    arch_kwargs: dict | None = None,
) -> ModelCheckpoint:
    """Supervised SGD training on ``dataset[indices]``.

    Deterministic for a given ``cfg.seed`` on CPU.  Raises
    :class:`TrainingError` if the loss turns non-finite or the final
    train accuracy is below ``cfg.min_train_acc``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot train on an empty index set")
    arch_kwargs = arch_kwargs or {}
    num_classes = dataset.num_classes if granularity == "fine" else dataset.num_coarse

    torch.manual_seed(cfg.seed)
    model = build_model(arch_tag, dataset.input_shape, num_classes, **arch_kwargs)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=cfg.lr_milestones, gamma=0.1)
    gen = torch.Generator().manual_seed(cfg.seed)
    xs = dataset.images[torch.from_numpy(indices)]
    ys = dataset.targets(granularity)[torch.from_numpy(indices)]

    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(indices), generator=gen)
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            if len(b) < 2 and len(order) > 1:
                continue  # batch norm cannot train on a single sample
            loss = F.cross_entropy(model(xs[b]), ys[b])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        sched.step()
    model.eval()

    ckpt = ModelCheckpoint.from_model(
        model,
        arch_tag=arch_tag,
        input_shape=dataset.input_shape,
        label_space=list(range(num_classes)),
        train_seed=cfg.seed,
        train_recipe=asdict(cfg),
        arch_kwargs=arch_kwargs,
        granularity=granularity,
    )
    acc = evaluate_accuracy(model, dataset, indices, granularity)
    logger.info("trained %s on %d samples: train acc %.2f%%", arch_tag, indices.size, acc)
    if acc < cfg.min_train_acc:
        raise TrainingError(f"train accuracy {acc:.2f}% below recipe floor {cfg.min_train_acc}%")
    ckpt.extra["train_acc"] = acc
    return ckpt
