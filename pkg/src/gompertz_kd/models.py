"""Teacher/student model zoo with feature taps and checkpoint I/O.

Every model is split into a `backbone` producing the last activation
tensor before the classifier head and a `head` mapping that tensor to
logits, so the pre-classifier features and their gradients are always
accessible. Tiny entries are desk-scale CNNs for 32x32 inputs; the
paper-scale torchvision backbones are available behind an explicit
`allow_paper_scale` gate (they are far too heavy for the test budget).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
from torch import Tensor, nn

from gompertz_kd.errors import CheckpointError, ConfigurationError, ShapeError
from gompertz_kd.losses import classification_loss

CHECKPOINT_FORMAT = "gompertz-kd/model-checkpoint"
CHECKPOINT_VERSION = 1


class ModelAdapter(nn.Module):
    """Backbone + head pair with feature-tap access.

    `forward_with_features` returns the pre-classifier activation map and
    the logits computed from it; replaying the head on the returned
    features reproduces the logits exactly.
    """

    def __init__(
        self,
        architecture_id: str,
        backbone: nn.Module,
        head: nn.Module,
        num_classes: int,
        seed: int,
        feature_tap: str,
        input_size: int | None = 32,
    ):
        super().__init__()
        self.architecture_id = architecture_id
        self.backbone = backbone
        self.head = head
        self.num_classes = num_classes
        self.seed = seed
        self.feature_tap = feature_tap
        self.input_size = input_size
        self.frozen = False
        with torch.no_grad():
            was_training = self.training
            self.eval()
            probe = torch.zeros(1, 3, input_size or 32, input_size or 32)
            feats = self.backbone(probe)
            logits = self.head(feats)
            self.train(was_training)
        if feats.dim() != 4:
            raise ShapeError(
                f"{architecture_id}: backbone must produce (B, C, H, W), got {tuple(feats.shape)}"
            )
        if logits.shape != (1, num_classes):
            raise ShapeError(
                f"{architecture_id}: head must produce (B, {num_classes}) logits, got {tuple(logits.shape)}"
            )
        self.feature_shape = tuple(feats.shape[1:])

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_batch(self, batch: Tensor) -> None:
        if batch.dim() != 4 or batch.shape[1] != 3:
            raise ShapeError(
                f"expected a (B, 3, H, W) image batch, got {tuple(batch.shape)}"
            )
        if self.input_size is not None and tuple(batch.shape[2:]) != (
            self.input_size,
            self.input_size,
        ):
            raise ShapeError(
                f"{self.architecture_id} expects {self.input_size}x{self.input_size} "
                f"inputs, got {tuple(batch.shape[2:])}"
            )

    def forward_with_features(self, batch: Tensor) -> tuple[Tensor, Tensor]:
        self._check_batch(batch)
        feats = self.backbone(batch)
        logits = self.head(feats)
        return feats, logits

    def logits_from_features(self, features: Tensor) -> Tensor:
        """Replay the classifier head on a feature map."""
        return self.head(features)

    def forward(self, batch: Tensor) -> Tensor:
        return self.forward_with_features(batch)[1]

    def penultimate_gradient(self, batch: Tensor, labels: Tensor) -> Tensor:
        """d(cross-entropy)/d(features), without touching any parameter.

        Runs in eval mode (restored afterwards) so normalization layers
        keep their running statistics; the returned tensor is detached.
        """
        self._check_batch(batch)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                feats = self.backbone(batch)
            feats = feats.detach().requires_grad_(True)
            with torch.enable_grad():
                logits = self.head(feats)
                ce = classification_loss(logits, labels)
                grad = torch.autograd.grad(ce, feats)[0]
        finally:
            self.train(was_training)
        return grad.detach()

    def freeze(self) -> "ModelAdapter":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def train(self, mode: bool = True) -> "ModelAdapter":
        # a frozen model must never re-enter training mode (BN stats)
        if self.frozen and mode:
            return self
        return super().train(mode)


def _conv_block(cin: int, cout: int, pool: bool) -> list[nn.Module]:
    layers: list[nn.Module] = [
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return layers


def _dw_block(cin: int, cout: int, pool: bool) -> list[nn.Module]:
    layers: list[nn.Module] = [
        nn.Conv2d(cin, cin, 3, padding=1, groups=cin),
        nn.BatchNorm2d(cin),
        nn.ReLU(inplace=True),
        nn.Conv2d(cin, cout, 1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return layers


def _build_tiny_teacher(num_classes: int) -> tuple[nn.Module, nn.Module]:
    backbone = nn.Sequential(
        *_conv_block(3, 32, pool=True),
        *_conv_block(32, 64, pool=True),
        *_conv_block(64, 80, pool=True),
        *_conv_block(80, 96, pool=False),
    )  # (96, 4, 4) on 32x32 inputs
    head = nn.Sequential(nn.Flatten(1), nn.Linear(96 * 4 * 4, num_classes))
    return backbone, head


def _build_tiny_student(num_classes: int) -> tuple[nn.Module, nn.Module]:
    backbone = nn.Sequential(
        *_conv_block(3, 20, pool=True),
        *_conv_block(20, 40, pool=True),
        *_conv_block(40, 56, pool=True),
    )  # (56, 4, 4)
    head = nn.Sequential(nn.Flatten(1), nn.Linear(56 * 4 * 4, num_classes))
    return backbone, head


def _build_tiny_student_dw(num_classes: int) -> tuple[nn.Module, nn.Module]:
    backbone = nn.Sequential(
        *_conv_block(3, 20, pool=True),
        *_dw_block(20, 40, pool=True),
        *_dw_block(40, 56, pool=True),
    )  # (56, 4, 4), depthwise-separable middle blocks
    head = nn.Sequential(nn.Flatten(1), nn.Linear(56 * 4 * 4, num_classes))
    return backbone, head


def _build_torchvision(name: str, num_classes: int) -> tuple[nn.Module, nn.Module]:
    import torchvision.models as tvm

    model = getattr(tvm, name)(weights=None, num_classes=num_classes)
    if name.startswith("resnet"):
        backbone = nn.Sequential(
            model.conv1,
            model.bn1,
            model.relu,
            model.maxpool,
            model.layer1,
            model.layer2,
            model.layer3,
            model.layer4,
            model.avgpool,
        )
        head = nn.Sequential(nn.Flatten(1), model.fc)
    elif name == "vgg16":
        backbone = nn.Sequential(model.features, model.avgpool)
        head = nn.Sequential(nn.Flatten(1), *model.classifier)
    elif name == "mobilenet_v2":
        backbone = nn.Sequential(model.features, nn.AdaptiveAvgPool2d(1))
        head = nn.Sequential(nn.Flatten(1), *model.classifier)
    else:
        raise ConfigurationError(f"no feature-tap split defined for '{name}'")
    return backbone, head


@dataclass(frozen=True)
class ModelZooEntry:
    id: str
    role: str  # teacher | student | either
    scale: str  # tiny | paper
    feature_tap: str
    builder: Callable[[int], tuple[nn.Module, nn.Module]]
    fixed_input_size: int | None = 32


ZOO: dict[str, ModelZooEntry] = {
    entry.id: entry
    for entry in [
        ModelZooEntry(
            "tiny_teacher",
            role="teacher",
            scale="tiny",
            feature_tap="pre-flatten conv activations (96, 4, 4)",
            builder=_build_tiny_teacher,
        ),
        ModelZooEntry(
            "tiny_student",
            role="student",
            scale="tiny",
            feature_tap="pre-flatten conv activations (56, 4, 4)",
            builder=_build_tiny_student,
        ),
        ModelZooEntry(
            "tiny_student_dw",
            role="student",
            scale="tiny",
            feature_tap="pre-flatten conv activations (56, 4, 4)",
            builder=_build_tiny_student_dw,
        ),
        ModelZooEntry(
            "resnet50",
            role="teacher",
            scale="paper",
            feature_tap="post global-average-pool (2048, 1, 1)",
            builder=lambda k: _build_torchvision("resnet50", k),
            fixed_input_size=None,
        ),
        ModelZooEntry(
            "resnet34",
            role="either",
            scale="paper",
            feature_tap="post global-average-pool (512, 1, 1)",
            builder=lambda k: _build_torchvision("resnet34", k),
            fixed_input_size=None,
        ),
        ModelZooEntry(
            "vgg16",
            role="student",
            scale="paper",
            feature_tap="post adaptive-pool, pre-flatten (512, 7, 7)",
            builder=lambda k: _build_torchvision("vgg16", k),
            fixed_input_size=None,
        ),
        ModelZooEntry(
            "mobilenet_v2",
            role="student",
            scale="paper",
            feature_tap="post global-average-pool (1280, 1, 1)",
            builder=lambda k: _build_torchvision("mobilenet_v2", k),
            fixed_input_size=None,
        ),
    ]
}


def zoo_ids(scale: str | None = None) -> list[str]:
    return sorted(e.id for e in ZOO.values() if scale is None or e.scale == scale)


def build_model(
    entry_id: str,
    num_classes: int,
    seed: int,
    allow_paper_scale: bool = False,
) -> ModelAdapter:
    """Construct a zoo model with deterministic, seeded initialization.

    The global torch RNG state is preserved (initialization happens in a
    forked RNG), so building a model never perturbs a training run.
    """
    if entry_id not in ZOO:
        raise ConfigurationError(
            f"unknown model id '{entry_id}'; available: {', '.join(zoo_ids())}"
        )
    entry = ZOO[entry_id]
    if entry.scale == "paper" and not allow_paper_scale:
        raise ConfigurationError(
            f"'{entry_id}' is a paper-scale backbone; set allow_paper_scale "
            "(models.allow_paper_scale in the config) to build it"
        )
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        backbone, head = entry.builder(num_classes)
        adapter = ModelAdapter(
            architecture_id=entry_id,
            backbone=backbone,
            head=head,
            num_classes=num_classes,
            seed=seed,
            feature_tap=entry.feature_tap,
            input_size=entry.fixed_input_size,
        )
    return adapter


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers (order-stable)."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model: ModelAdapter, path: str | Path, metadata: dict | None = None) -> Path:
    """Write a self-describing, versioned checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "architecture_id": model.architecture_id,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "feature_shape": tuple(model.feature_shape),
        "feature_tap": model.feature_tap,
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: str | Path, allow_paper_scale: bool = False, frozen: bool = False
) -> tuple[ModelAdapter, dict]:
    """Load a checkpoint written by `save_checkpoint`.

    Returns (model, metadata). Rejects files without the expected
    versioned header.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path} is not a {CHECKPOINT_FORMAT} file (missing format header)"
        )
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('format_version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    model = build_model(
        payload["architecture_id"],
        payload["num_classes"],
        seed=payload["seed"],
        allow_paper_scale=allow_paper_scale,
    )
    model.load_state_dict(payload["state_dict"], strict=True)
    if frozen:
        model.freeze()
    return model, dict(payload.get("metadata", {}))
