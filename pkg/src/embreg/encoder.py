"""Small 3D convolutional encoder emitting unit-norm voxel embeddings.

Two heads: a fine field at stride 2 and a coarse field at stride 8, both
L2-normalized per voxel. Fine cell ``i`` is centered on input voxel
``2 * i``; coarse cell ``i`` on voxel ``8 * i``. Checkpoints are a JSON
manifest plus a raw little-endian float32 parameter blob in a declared
parameter order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ToolkitError
from .volume import SpatialMeta, VoxelGrid, voxel_to_world


class CheckpointError(ToolkitError):
    """Checkpoint file unreadable or incompatible with the running config."""


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, int, int, int] = (16, 32, 32, 32)
    fine_dim: int = 32
    coarse_dim: int = 32

    @property
    def fine_stride(self) -> int:
        return 2

    @property
    def coarse_stride(self) -> int:
        return 8


class VoxelEncoder(nn.Module):
    """Four conv layers (kernel 3) with fine/coarse embedding heads."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg if cfg is not None else EncoderConfig()
        c = self.cfg.channels
        self.conv1 = nn.Conv3d(1, c[0], kernel_size=3, stride=1, padding=1)
        self.conv2 = nn.Conv3d(c[0], c[1], kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv3d(c[1], c[2], kernel_size=3, stride=2, padding=1)
        self.conv4 = nn.Conv3d(c[2], c[3], kernel_size=3, stride=2, padding=1)
        self.fine_head = nn.Conv3d(c[1], self.cfg.fine_dim, kernel_size=3, padding=1)
        self.coarse_head = nn.Conv3d(c[3], self.cfg.coarse_dim, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # Smooth activation keeps the loss C1, so gradient checks against
        # central differences hold everywhere.
        h = F.gelu(self.conv1(x))
        h = F.gelu(self.conv2(h))
        fine = F.normalize(self.fine_head(h), dim=1, eps=1e-12)
        h = F.gelu(self.conv3(h))
        h = F.gelu(self.conv4(h))
        coarse = F.normalize(self.coarse_head(h), dim=1, eps=1e-12)
        return fine, coarse


PRENORM_TARGET = 2.0


def _calibrate_head_scale(encoder: VoxelEncoder) -> None:
    """Rescale head weights so pre-normalization vectors have O(1) magnitude.

    The normalized output is scale-free, but near-zero pre-norm vectors make
    the normalize layer sharply curved, which ruins finite-difference
    validation of gradients and slows early training. Calibration runs a
    fixed synthetic input and scales each head to a target median norm.
    """
    gen = torch.Generator().manual_seed(0)
    probe = torch.rand((1, 1, 16, 16, 16), generator=gen)
    with torch.no_grad():
        h = F.gelu(encoder.conv1(probe))
        h = F.gelu(encoder.conv2(h))
        med_f = float(encoder.fine_head(h).norm(dim=1).median())
        if med_f > 0:
            encoder.fine_head.weight.mul_(PRENORM_TARGET / med_f)
            encoder.fine_head.bias.mul_(PRENORM_TARGET / med_f)
        h = F.gelu(encoder.conv3(h))
        h = F.gelu(encoder.conv4(h))
        med_c = float(encoder.coarse_head(h).norm(dim=1).median())
        if med_c > 0:
            encoder.coarse_head.weight.mul_(PRENORM_TARGET / med_c)
            encoder.coarse_head.bias.mul_(PRENORM_TARGET / med_c)


def build_encoder(cfg: EncoderConfig | None = None, seed: int = 0) -> VoxelEncoder:
    """Encoder with deterministic, head-calibrated weight initialization."""
    torch.manual_seed(seed)
    encoder = VoxelEncoder(cfg)
    _calibrate_head_scale(encoder)
    return encoder


@dataclass
class EmbeddingField:
    """Per-voxel unit-norm embeddings at fine and coarse resolution."""

    fine: np.ndarray  # (nx/s_f, ny/s_f, nz/s_f, fine_dim)
    coarse: np.ndarray  # (nx/s_c, ny/s_c, nz/s_c, coarse_dim)
    meta: SpatialMeta
    fine_stride: int = 2
    coarse_stride: int = 8

    @property
    def fine_dims(self) -> tuple[int, int, int]:
        return self.fine.shape[:3]

    @property
    def coarse_dims(self) -> tuple[int, int, int]:
        return self.coarse.shape[:3]

    def fine_cell_to_voxel(self, cells) -> np.ndarray:
        return np.asarray(cells, dtype=float) * self.fine_stride

    def coarse_cell_to_voxel(self, cells) -> np.ndarray:
        return np.asarray(cells, dtype=float) * self.coarse_stride

    def voxel_to_fine_cell(self, voxels) -> np.ndarray:
        return np.rint(np.asarray(voxels, dtype=float) / self.fine_stride).astype(int)

    def voxel_to_coarse_cell(self, voxels) -> np.ndarray:
        return np.rint(np.asarray(voxels, dtype=float) / self.coarse_stride).astype(int)

    def fine_cell_world(self, cells) -> np.ndarray:
        return voxel_to_world(self.meta, self.fine_cell_to_voxel(cells))

    def fine_flat(self) -> np.ndarray:
        return self.fine.reshape(-1, self.fine.shape[-1])

    def coarse_flat(self) -> np.ndarray:
        return self.coarse.reshape(-1, self.coarse.shape[-1])


def grid_to_tensor(grid: VoxelGrid, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(grid.data)).to(dtype)[None, None]


def encode(encoder: VoxelEncoder, patch: VoxelGrid) -> EmbeddingField:
    """Embed a patch; dims must be divisible by the coarse stride."""
    s_c = encoder.cfg.coarse_stride
    if any(d % s_c != 0 for d in patch.dims):
        raise ValueError(f"patch dims {patch.dims} must be divisible by coarse stride {s_c}")
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        fine, coarse = encoder(grid_to_tensor(patch, dtype))
    return EmbeddingField(
        fine=fine[0].permute(1, 2, 3, 0).contiguous().numpy().astype(np.float32),
        coarse=coarse[0].permute(1, 2, 3, 0).contiguous().numpy().astype(np.float32),
        meta=patch.meta,
        fine_stride=encoder.cfg.fine_stride,
        coarse_stride=s_c,
    )


PARAM_ORDER = (
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "conv4.weight",
    "conv4.bias",
    "fine_head.weight",
    "fine_head.bias",
    "coarse_head.weight",
    "coarse_head.bias",
)


def save_checkpoint(
    encoder: VoxelEncoder,
    path,
    step_count: int = 0,
    loss_history: list[float] | None = None,
) -> Path:
    base = Path(path)
    if base.suffix == ".ckpt":
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "architecture": asdict(encoder.cfg),
        "step_count": int(step_count),
        "loss_history": [float(v) for v in (loss_history or [])],
        "param_order": list(PARAM_ORDER),
        "dtype": "f32le",
    }
    base.with_suffix(".ckpt").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    state = dict(encoder.named_parameters())
    blobs = [state[name].detach().cpu().numpy().astype("<f4").tobytes(order="C") for name in PARAM_ORDER]
    base.with_suffix(".params").write_bytes(b"".join(blobs))
    return base


def load_checkpoint(path, cfg: EncoderConfig | None = None) -> tuple[VoxelEncoder, dict]:
    """Rebuild an encoder from a checkpoint; rejects architecture mismatch."""
    base = Path(path)
    if base.suffix == ".ckpt":
        base = base.with_suffix("")
    try:
        manifest = json.loads(base.with_suffix(".ckpt").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest {base}: {exc}") from exc
    try:
        arch = manifest["architecture"]
        stored_cfg = EncoderConfig(
            channels=tuple(arch["channels"]),
            fine_dim=int(arch["fine_dim"]),
            coarse_dim=int(arch["coarse_dim"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid architecture block in {base}: {exc}") from exc
    if cfg is not None and stored_cfg != cfg:
        raise CheckpointError(f"checkpoint architecture {stored_cfg} != running config {cfg}")
    if manifest.get("param_order") != list(PARAM_ORDER):
        raise CheckpointError("checkpoint parameter ordering differs from this implementation")

    encoder = VoxelEncoder(stored_cfg)
    payload = base.with_suffix(".params").read_bytes()
    state = dict(encoder.named_parameters())
    offset = 0
    with torch.no_grad():
        for name in PARAM_ORDER:
            tensor = state[name]
            nbytes = tensor.numel() * 4
            if offset + nbytes > len(payload):
                raise CheckpointError(f"parameter blob too short for {name}")
            chunk = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(tensor.shape)
            tensor.copy_(torch.from_numpy(chunk.copy()))
            offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"parameter blob has {len(payload) - offset} trailing bytes")
    return encoder, manifest
