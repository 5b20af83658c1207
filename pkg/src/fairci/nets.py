"""Encoder CNN, prediction heads and discriminators.

All weights use a uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
with zero biases, drawn from a dedicated ``torch.Generator`` so that
initialisation never touches the global RNG.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .errors import InvalidParameterError
from .synthgen import IMAGE_SIZE

LATENT_DIM = 10
DISC_EPS = 1e-6
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderArch:
    image_size: int = IMAGE_SIZE
    conv1_channels: int = 8
    conv2_channels: int = 16
    kernel_size: int = 3
    latent_dim: int = LATENT_DIM
    partitioned: bool = False
    split_index: int = 8

    @property
    def feature_side(self) -> int:
        side = self.image_size - self.kernel_size + 1
        side //= 2
        return side - self.kernel_size + 1

    def validate(self):
        if self.feature_side < 1:
            raise InvalidParameterError(f"image_size {self.image_size} too small for the conv stack")
        if self.partitioned and not 0 < self.split_index < self.latent_dim:
            raise InvalidParameterError(
                f"split_index must lie in (0, {self.latent_dim}), got {self.split_index}"
            )


class EncoderOutput(NamedTuple):
    latent: torch.Tensor
    logit: torch.Tensor
    aux_logit: Optional[torch.Tensor] = None


def _fan_in_uniform_(module: nn.Module, gen: torch.Generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            w = m.weight
            fan_in = w[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                w.copy_(torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()


class Encoder(nn.Module):
    """conv -> ReLU -> maxpool -> conv -> ReLU -> linear(latent) -> linear(1).

    With ``arch.partitioned`` an auxiliary linear head reads the latent slice
    ``[split_index, latent_dim)`` and predicts the sensitive attribute.
    """

    def __init__(self, arch: EncoderArch = EncoderArch()):
        super().__init__()
        arch.validate()
        self.arch = arch
        k = arch.kernel_size
        self.conv1 = nn.Conv2d(1, arch.conv1_channels, k)
        self.pool = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(arch.conv1_channels, arch.conv2_channels, k)
        self.to_latent = nn.Linear(arch.conv2_channels * arch.feature_side**2, arch.latent_dim)
        self.head = nn.Linear(arch.latent_dim, 1)
        if arch.partitioned:
            self.aux_head = nn.Linear(arch.latent_dim - arch.split_index, 1)
        else:
            self.aux_head = None

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        h = self.pool(torch.relu(self.conv1(x)))
        h = torch.relu(self.conv2(h))
        v = self.to_latent(h.flatten(1))
        logit = self.head(v).squeeze(-1)
        aux = None
        if self.aux_head is not None:
            aux = self.aux_head(v[:, self.arch.split_index:]).squeeze(-1)
        return EncoderOutput(v, logit, aux)

    def invariant_slice(self, v: torch.Tensor) -> torch.Tensor:
        """The part of the latent on which conditional independence is enforced."""
        if self.arch.partitioned:
            return v[:, : self.arch.split_index]
        return v

    def variant_slice(self, v: torch.Tensor) -> torch.Tensor:
        if not self.arch.partitioned:
            raise InvalidParameterError("encoder is not partitioned")
        return v[:, self.arch.split_index:]


def init_encoder(
    seed: int,
    partitioned: bool = False,
    split_index: int = 8,
    dtype: torch.dtype = torch.float32,
    **arch_kwargs,
) -> Encoder:
    arch = EncoderArch(partitioned=partitioned, split_index=split_index, **arch_kwargs)
    enc = Encoder(arch).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    _fan_in_uniform_(enc, gen)
    return enc


def encode_predict(encoder: Encoder, image) -> EncoderOutput:
    """Run a single image (``image_size x image_size``) or a batch
    ``(n, image_size, image_size)`` through the encoder."""
    x = torch.as_tensor(image)
    side = encoder.arch.image_size
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 3 or tuple(x.shape[1:]) != (side, side):
        raise InvalidParameterError(
            f"expected image of shape ({side}, {side}), got {tuple(torch.as_tensor(image).shape)}"
        )
    dtype = next(encoder.parameters()).dtype
    out = encoder(x.to(dtype).unsqueeze(1))
    if single:
        out = EncoderOutput(
            out.latent[0], out.logit[0], None if out.aux_logit is None else out.aux_logit[0]
        )
    return out


class Discriminator(nn.Module):
    """Two hidden leaky-ReLU layers and a sigmoid output clamped to
    ``[DISC_EPS, 1 - DISC_EPS]``."""

    def __init__(self, input_dim: int, hidden: int = 64, slope: float = 0.2):
        super().__init__()
        self.input_dim = input_dim
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden),
            nn.LeakyReLU(slope),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(slope),
            nn.Linear(hidden, 1),
        )

    @property
    def output_layer(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise InvalidParameterError(
                f"discriminator expects input dimension {self.input_dim}, got {x.shape[-1]}"
            )
        p = torch.sigmoid(self.net(x).squeeze(-1))
        return p.clamp(DISC_EPS, 1.0 - DISC_EPS)


def init_discriminator(
    input_dim: int, seed: int, hidden: int = 64, dtype: torch.dtype = torch.float32
) -> Discriminator:
    d = Discriminator(input_dim, hidden).to(dtype)
    _fan_in_uniform_(d, torch.Generator().manual_seed(seed))
    return d


def discriminate(disc: Discriminator, inputs) -> torch.Tensor:
    x = torch.as_tensor(inputs)
    dtype = next(disc.parameters()).dtype
    return disc(x.to(dtype))


def disc_input_dims(ci_target: str, arch: EncoderArch) -> tuple[int, int]:
    """Input widths of (D1, D2): the conditioned quantity plus y, plus s for D2."""
    if ci_target == "label_space":
        width = 1
    elif ci_target == "latent_space":
        width = arch.latent_dim
    elif ci_target == "partitioned":
        width = arch.split_index
    else:
        raise InvalidParameterError(f"ci_target {ci_target!r} has no discriminators")
    return width + 1, width + 2


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(encoder: Encoder, seed: int, path) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in encoder.state_dict().items()}
    arch = {f"arch/{k}": np.asarray(v) for k, v in asdict(encoder.arch).items()}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.int64(CHECKPOINT_VERSION),
            seed=np.int64(seed),
            **arch,
            **arrays,
        )
    return path


def load_checkpoint(path) -> tuple[Encoder, int]:
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    with z:
        if "format_version" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no format_version)")
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arch_kwargs = {}
        for key in z.files:
            if key.startswith("arch/"):
                val = z[key].item()
                arch_kwargs[key[5:]] = bool(val) if isinstance(val, (bool, np.bool_)) else int(val)
        arch = EncoderArch(**arch_kwargs)
        params = {k[6:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
        seed = int(z["seed"])
    dtype = next(iter(params.values())).dtype
    enc = Encoder(arch).to(dtype)
    enc.load_state_dict(params)
    return enc, seed


def parameter_shapes(module: nn.Module) -> dict[str, tuple[int, ...]]:
    return {k: tuple(v.shape) for k, v in module.named_parameters()}
