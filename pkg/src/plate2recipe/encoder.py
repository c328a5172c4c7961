"""Image encoder feeding the ingredient decoder.

Pipeline: backbone -> (ViT only: per-patch linear reshape onto a square grid)
-> 2D convolution to the decoder-facing width -> flatten -> three layer
normalizations. CNN ablation backbones (torchvision, randomly initialized
unless a weight file is supplied) expose their final pre-pooling feature map
as the grid and skip the linear reshape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError, NumericalError

BACKBONES = ("vit", "resnet18", "resnet50", "resnet101", "inceptionv3")

NORM_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "vit"
    image_side: int = 224
    output_dim: int = 512
    # ViT-only knobs.
    patch_size: int = 16
    embed_dim: int = 512
    depth: int = 6
    n_heads: int = 8
    mlp_ratio: float = 4.0
    conv_kernel: int = 3

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.image_side < 1 or self.output_dim < 1:
            raise ConfigError("image_side and output_dim must be positive")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if self.backbone == "vit":
            if self.image_side % self.patch_size != 0:
                raise ConfigError(
                    f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
            if self.embed_dim % self.n_heads != 0:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.backbone == "inceptionv3" and self.image_side < 75:
            raise ConfigError("inceptionv3 requires image_side >= 75")


class _ViTBackbone(nn.Module):
    """Minimal ViT: conv patchify, learned positions, pre-norm encoder blocks.

    Returns the full patch sequence (no class token) so the spatial layout
    survives for the downstream reshape.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        side = config.image_side // config.patch_size
        self.grid_side = side
        self.patchify = nn.Conv2d(3, config.embed_dim, kernel_size=config.patch_size,
                                  stride=config.patch_size)
        self.positions = nn.Parameter(torch.zeros(1, side * side, config.embed_dim))
        nn.init.trunc_normal_(self.positions, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=config.embed_dim,
            nhead=config.n_heads,
            dim_feedforward=int(config.embed_dim * config.mlp_ratio),
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, num_layers=config.depth)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        patches = self.patchify(images)                    # (B, E, g, g)
        tokens = patches.flatten(2).transpose(1, 2)        # (B, g*g, E)
        return self.blocks(tokens + self.positions)


def _resnet_trunk(name: str) -> tuple[nn.Module, int]:
    from torchvision import models

    factory = {"resnet18": models.resnet18, "resnet50": models.resnet50,
               "resnet101": models.resnet101}[name]
    net = factory(weights=None)
    trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                          net.layer1, net.layer2, net.layer3, net.layer4)
    channels = 512 if name == "resnet18" else 2048
    return trunk, channels


def _inception_trunk() -> nn.Module:
    """InceptionV3 up to its last mixed block (pre-pooling feature map)."""
    from torchvision import models

    net = models.inception_v3(weights=None, aux_logits=False, init_weights=True)
    drop = {"avgpool", "dropout", "fc"}
    return nn.Sequential(*(m for name, m in net.named_children() if name not in drop))


class ImageEncoder(nn.Module):
    """Backbone + reshape + convolution projection + three normalizations."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.backbone == "vit":
            self.backbone = _ViTBackbone(config)
            self.reshape = nn.Linear(config.embed_dim, config.output_dim)
            conv_in = config.output_dim
            self.grid_side = self.backbone.grid_side
        else:
            if config.backbone == "inceptionv3":
                self.backbone = _inception_trunk()
                conv_in = 2048
            else:
                self.backbone, conv_in = _resnet_trunk(config.backbone)
            self.reshape = None
            with torch.no_grad():
                probe = torch.zeros(1, 3, config.image_side, config.image_side)
                self.grid_side = self.backbone(probe).shape[-1]
        self.project = nn.Conv2d(conv_in, config.output_dim, kernel_size=config.conv_kernel,
                                 padding=config.conv_kernel // 2)
        self.norms = nn.ModuleList(
            nn.LayerNorm(config.output_dim, eps=NORM_EPS) for _ in range(3))

    @property
    def sequence_length(self) -> int:
        return self.grid_side * self.grid_side

    def _check_finite(self, tensor: torch.Tensor, layer: str) -> None:
        if not torch.isfinite(tensor).all():
            raise NumericalError(f"non-finite activations after {layer}")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, L, output_dim)."""
        feats = self.backbone(images)
        self._check_finite(feats, "backbone")
        if self.reshape is not None:
            grid = self.reshape(feats)                     # (B, L, D)
            side = self.grid_side
            grid = grid.transpose(1, 2).reshape(len(images), -1, side, side)
        else:
            grid = feats
        grid = self.project(grid)                          # (B, D, g, g)
        self._check_finite(grid, "projection convolution")
        seq = grid.flatten(2).transpose(1, 2)              # (B, L, D)
        for i, norm in enumerate(self.norms):
            seq = norm(seq)
            self._check_finite(seq, f"normalization {i + 1}")
        return seq


def init_encoder(config: EncoderConfig, seed: int,
                 backbone_weights: str | None = None) -> ImageEncoder:
    """Deterministically initialized encoder; optional pretrained backbone load."""
    torch.manual_seed(seed)
    encoder = ImageEncoder(config)
    if backbone_weights is not None:
        load_backbone_weights(encoder, backbone_weights)
    return encoder


def load_backbone_weights(encoder: ImageEncoder, path: str) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    current = encoder.backbone.state_dict()
    mismatches = []
    for name, tensor in state.items():
        if name not in current:
            mismatches.append(f"{name}: unexpected key")
        elif tuple(current[name].shape) != tuple(tensor.shape):
            mismatches.append(
                f"{name}: checkpoint {tuple(tensor.shape)} vs model {tuple(current[name].shape)}")
    missing = [name for name in current if name not in state]
    mismatches.extend(f"{name}: missing from checkpoint" for name in missing)
    if mismatches:
        raise CheckpointError(
            "backbone weights incompatible:\n  " + "\n  ".join(mismatches))
    encoder.backbone.load_state_dict(state)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 numpy array -> (3, H, W) float tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigError(f"expected an H x W x 3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def extract_image_embeddings(image: np.ndarray, encoder: ImageEncoder) -> torch.Tensor:
    """Embedding sequence (L, output_dim) for one preprocessed image."""
    side = encoder.config.image_side
    if image.shape[0] != side or image.shape[1] != side:
        raise ConfigError(
            f"image side {image.shape[:2]} does not match encoder config {side}")
    encoder.eval()
    with torch.no_grad():
        batch = image_to_tensor(image).unsqueeze(0)
        return encoder(batch.to(next(encoder.parameters()).dtype))[0]
