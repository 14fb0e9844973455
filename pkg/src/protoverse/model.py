"""Network components: backbone, add-on projection, prototype bank, and head.

The classifier scores an image by comparing every spatial patch of its
convolutional feature map against a bank of learnable prototype vectors.
Patch/prototype squared L2 distances are inverted into similarity maps,
max-pooled into per-prototype scores, and linearly combined into class
logits through the class-connection weights.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

BACKBONES = ("small", "vgg11")
STAGES = ("warm", "joint", "pushed", "final")
CHECKPOINT_FORMAT = "protoverse-checkpoint-v1"

OWN_CLASS_CONNECTION = 1.0
OTHER_CLASS_CONNECTION = -0.5


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``channels`` only applies to the ``small`` backbone: one conv block per
    entry, each halving the spatial resolution.  ``feature_dim`` is the
    width of the prototype space after the add-on layers.
    """

    backbone: str = "small"
    channels: tuple = (32, 64, 128, 128)
    feature_dim: int = 64
    per_class: int = 3
    num_classes: int = 3
    epsilon: float = 1e-4
    input_size: int = 112
    in_channels: int = 2
    pretrained: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.per_class < 2:
            raise ValueError(
                "per_class must be >= 2: a single prototype per class cannot expose "
                "distinct image parts, which defeats part-based explanation"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        self.channels = tuple(int(ch) for ch in self.channels)

    @property
    def num_prototypes(self) -> int:
        return self.per_class * self.num_classes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def init_class_connections(per_class: int, num_classes: int) -> np.ndarray:
    """Initial head weights w_h of shape (n, c): 1.0 toward the prototype's
    own class and -0.5 toward every other class."""
    if per_class < 1 or num_classes < 2:
        raise ValueError("need per_class >= 1 and num_classes >= 2")
    n = per_class * num_classes
    w = np.full((n, num_classes), OTHER_CLASS_CONNECTION, dtype=np.float64)
    for j in range(num_classes):
        w[j * per_class : (j + 1) * per_class, j] = OWN_CLASS_CONNECTION
    return w


def similarity_from_distance(d, epsilon: float = 1e-4):
    """Invert a (squared) distance into an activation: log((d+1)/(d+eps)).

    Strictly decreasing in d, positive for d >= 0 and eps < 1, and tends
    to 0 as d grows.  Accepts scalars, numpy arrays, or torch tensors.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(d, torch.Tensor):
        if torch.any(d < 0):
            raise ValueError("distances must be nonnegative")
        return torch.log((d + 1.0) / (d + epsilon))
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    return np.log((d + 1.0) / (d + epsilon))


def similarity_scores(maps):
    """Global max pool: reduce per-prototype activation maps (..., H, W) to
    scalar scores (...,)."""
    if isinstance(maps, torch.Tensor):
        if maps.numel() == 0:
            raise ValueError("empty similarity maps")
        return torch.amax(maps, dim=(-2, -1))
    maps = np.asarray(maps)
    if maps.size == 0:
        raise ValueError("empty similarity maps")
    return maps.max(axis=(-2, -1))


def head_logits(scores, connections):
    """Class logits as the linear combination scores^T @ w_h."""
    if isinstance(scores, torch.Tensor):
        conn = torch.as_tensor(connections, dtype=scores.dtype, device=scores.device)
        if scores.shape[-1] != conn.shape[0]:
            raise ValueError(f"score/connection shape mismatch: {scores.shape[-1]} vs {conn.shape[0]}")
        return scores @ conn
    scores = np.asarray(scores, dtype=np.float64)
    connections = np.asarray(connections, dtype=np.float64)
    if scores.shape[-1] != connections.shape[0]:
        raise ValueError(f"score/connection shape mismatch: {scores.shape[-1]} vs {connections.shape[0]}")
    return scores @ connections


def softmax_probs(logits):
    """Exponential normalization of logits into probabilities."""
    if isinstance(logits, torch.Tensor):
        return torch.softmax(logits, dim=-1)
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def patch_squared_distances(fmap: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between every 1x1 feature patch and every
    prototype vector: (B, D, H, W) x (n, D) -> (B, n, H, W)."""
    if fmap.dim() != 4:
        raise ValueError(f"feature map must be (B, D, H, W), got {tuple(fmap.shape)}")
    if vectors.dim() != 2 or vectors.shape[1] != fmap.shape[1]:
        raise ValueError(
            f"prototype dim {tuple(vectors.shape)} does not match feature dim {fmap.shape[1]}"
        )
    diff = fmap.unsqueeze(1) - vectors.view(1, vectors.shape[0], vectors.shape[1], 1, 1)
    return (diff * diff).sum(dim=2)


def enumerate_patches(fmap: torch.Tensor) -> torch.Tensor:
    """Flatten a (B, D, H, W) feature map into its (B, H*W, D) patch list,
    row-major over spatial locations."""
    if fmap.dim() != 4:
        raise ValueError(f"feature map must be (B, D, H, W), got {tuple(fmap.shape)}")
    b, d, h, w = fmap.shape
    return fmap.reshape(b, d, h * w).transpose(1, 2)


def adapt_channels(x: torch.Tensor, target: int) -> torch.Tensor:
    """Map a 2-channel (image, centroid) input to a backbone expecting
    ``target`` channels by replicating the image channel into the extra
    slots."""
    have = x.shape[1]
    if have == target:
        return x
    if have > target:
        raise ValueError(f"cannot reduce {have} input channels to {target}")
    extra = [x[:, :1]] * (target - have)
    return torch.cat([x] + extra, dim=1)


class SmallBackbone(nn.Module):
    """From-scratch CNN for desk-scale runs: conv-BN-ReLU-maxpool blocks,
    one per channel width, each halving the resolution."""

    def __init__(self, in_channels: int, channels: tuple):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [
                nn.Conv2d(prev, ch, kernel_size=3, padding=1),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x):
        return self.body(x)


class AddOnLayers(nn.Module):
    """Two 1x1 convolutions bridging the backbone into the prototype space.
    The closing sigmoid squashes features into (0, 1), bounding patch and
    prototype distances."""

    def __init__(self, in_channels: int, feature_dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, feature_dim, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(feature_dim, feature_dim, kernel_size=1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.block(x)


class PrototypeBank(nn.Module):
    """The n = m*c learnable prototype vectors with class ownership.

    Prototypes are stored class-blocked: prototype i belongs to class
    i // per_class.  ``projection`` holds the per-prototype provenance
    record (source sample, patch location, pre-push distance) once the
    bank has been snapped onto training patches.
    """

    def __init__(self, per_class: int, num_classes: int, feature_dim: int):
        super().__init__()
        if per_class < 1:
            raise ValueError("per_class must be >= 1")
        self.per_class = per_class
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        n = per_class * num_classes
        self.vectors = nn.Parameter(torch.rand(n, feature_dim))
        self.register_buffer(
            "prototype_classes", torch.arange(n, dtype=torch.long) // per_class
        )
        self.projection = None

    @property
    def num_prototypes(self) -> int:
        return self.per_class * self.num_classes

    def class_slice(self, class_index: int) -> slice:
        return slice(class_index * self.per_class, (class_index + 1) * self.per_class)

    def class_of(self, prototype_index: int) -> int:
        return prototype_index // self.per_class

    def as_numpy(self) -> np.ndarray:
        return self.vectors.detach().cpu().numpy()


class BaselineNet(nn.Module):
    """Non-interpretable reference classifier: the same backbone followed by
    global average pooling and a linear head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone, self.backbone_in_channels = _build_backbone(config)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(_backbone_out_channels(self.backbone), config.num_classes)

    def forward(self, x):
        x = adapt_channels(x, self.backbone_in_channels)
        z = self.backbone(x)
        return self.head(self.pool(z).flatten(1))


def _build_backbone(config: ModelConfig):
    if config.backbone == "small":
        return SmallBackbone(config.in_channels, config.channels), config.in_channels
    import torchvision.models

    weights = "IMAGENET1K_V1" if config.pretrained else None
    vgg = torchvision.models.vgg11(weights=weights)
    return vgg.features, 3


def _backbone_out_channels(backbone: nn.Module) -> int:
    if hasattr(backbone, "out_channels"):
        return backbone.out_channels
    out = None
    for layer in backbone.modules():
        if isinstance(layer, nn.Conv2d):
            out = layer.out_channels
    if out is None:
        raise ValueError("backbone has no convolutional layers")
    return out


class ProtoVerseNet(nn.Module):
    """Full prototype classifier: backbone f, add-on 1x1 layers, prototype
    layer, and class-connection head h."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone, self.backbone_in_channels = _build_backbone(config)
        self.addon = AddOnLayers(_backbone_out_channels(self.backbone), config.feature_dim)
        self.bank = PrototypeBank(config.per_class, config.num_classes, config.feature_dim)
        self.head = nn.Linear(config.num_prototypes, config.num_classes, bias=False)
        self.reset_class_connections()

    def reset_class_connections(self):
        w = init_class_connections(self.config.per_class, self.config.num_classes)
        with torch.no_grad():
            self.head.weight.copy_(torch.as_tensor(w.T, dtype=self.head.weight.dtype))

    def class_connections(self) -> np.ndarray:
        """Head weights in (n, c) orientation."""
        return self.head.weight.detach().cpu().numpy().T

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Convolutional feature map (B, D, H', W') feeding the prototype layer."""
        if x.dim() != 4:
            raise ValueError(f"input must be (B, C, H, W), got {tuple(x.shape)}")
        x = adapt_channels(x, self.backbone_in_channels)
        return self.addon(self.backbone(x))

    def distances(self, fmap: torch.Tensor) -> torch.Tensor:
        return patch_squared_distances(fmap, self.bank.vectors)

    def forward_full(self, x: torch.Tensor) -> dict:
        """One pass returning every intermediate the losses and explanations
        need: feature map, distance maps, similarity maps, scores, logits."""
        fmap = self.features(x)
        dist = self.distances(fmap)
        sim = similarity_from_distance(dist, self.config.epsilon)
        scores = torch.amax(sim, dim=(-2, -1))
        logits = self.head(scores)
        return {
            "feature_map": fmap,
            "distances": dist,
            "similarity_maps": sim,
            "scores": scores,
            "logits": logits,
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_full(x)["logits"]


def save_checkpoint(
    path,
    model,
    stage: str,
    epoch: int = 0,
    metrics: dict | None = None,
    class_counts: dict | None = None,
    extra: dict | None = None,
):
    """Serialize a model plus its training-stage tag and provenance."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    projection = getattr(getattr(model, "bank", None), "projection", None)
    if stage in ("pushed", "final") and not projection:
        raise ValueError(f"a {stage!r} checkpoint requires a projection record")
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "protoverse" if isinstance(model, ProtoVerseNet) else "baseline",
        "stage": stage,
        "epoch": epoch,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "projection": projection,
        "metrics": metrics,
        "class_counts": class_counts,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return payload


def load_checkpoint(path):
    """Rebuild a model from :func:`save_checkpoint` output.

    Returns (model, payload); the model is left in eval mode.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint")
    cfg = dict(payload["model_config"])
    cfg["channels"] = tuple(cfg.get("channels", ()))
    config = ModelConfig(**cfg)
    if payload.get("kind") == "baseline":
        model = BaselineNet(config)
    else:
        model = ProtoVerseNet(config)
        model.bank.projection = payload.get("projection")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
