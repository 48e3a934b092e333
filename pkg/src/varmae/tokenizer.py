"""Dynamic convolution tokenizer: a shared 3D patch embedder whose weights and
biases are rescaled per modality by vectors generated from a learned modality
vector."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, conv3d, getitem, linear, mul, reshape, transpose


@dataclass
class ModalityDescriptor:
    """One catalog entry: identity plus its learnable conditioning vectors."""

    id: int
    name: str
    vector: Tensor      # length-l conditioning vector fed to the projector
    embedding: Tensor   # encoder-width modality embedding added to tokens


def make_catalog(names: Sequence[str], vector_len: int, embed_dim: int,
                 rng: np.random.Generator) -> List[ModalityDescriptor]:
    """Descriptors with ids 0..n-1 and N(0, 0.02) initialised vectors."""
    return [
        ModalityDescriptor(
            id=i,
            name=str(name),
            vector=Tensor(rng.normal(0.0, 0.02, size=vector_len), requires_grad=True),
            embedding=Tensor(rng.normal(0.0, 0.02, size=embed_dim), requires_grad=True),
        )
        for i, name in enumerate(names)
    ]


def dynamic_params(vector: Tensor, proj_w: Tensor, proj_b: Tensor) -> Tuple[Tensor, Tensor]:
    """Project a modality vector to a (weight scale, bias scale) pair.

    The projector output has length 2E and is split at E.
    """
    out = linear(vector, proj_w, proj_b)
    if out.shape[0] % 2 != 0:
        raise DimensionError("projector output length must be even to split")
    e = out.shape[0] // 2
    return getitem(out, slice(0, e)), getitem(out, slice(e, 2 * e))


def modulate(weight: Tensor, bias: Tensor, w_scale: Tensor, b_scale: Tensor) -> Tuple[Tensor, Tensor]:
    """Rescale the shared conv weights per output channel and the bias elementwise."""
    c_out = weight.shape[0]
    if w_scale.shape != (c_out,) or b_scale.shape != (c_out,):
        raise DimensionError(
            f"modulation vectors must have extent {c_out}, got {w_scale.shape} / {b_scale.shape}")
    scaled_w = mul(weight, reshape(w_scale, (c_out, 1, 1, 1, 1)))
    scaled_b = mul(bias, b_scale)
    return scaled_w, scaled_b


class DynamicConvTokenizer:
    """Single-channel patch embedder modulated per modality.

    Holds the shared conv weight/bias and the linear projector that turns a
    modality vector into per-channel scales. At initialisation the projector
    outputs all-ones, so every modality starts from the same shared embedder.
    """

    def __init__(self, embed_dim: int, patch_size: int, vector_len: int,
                 rng: np.random.Generator):
        self.embed_dim = int(embed_dim)
        self.patch_size = int(patch_size)
        self.vector_len = int(vector_len)
        k = self.patch_size
        std = math.sqrt(2.0 / (k ** 3 + embed_dim))
        self.weight = Tensor(rng.normal(0.0, std, size=(embed_dim, 1, k, k, k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(embed_dim), requires_grad=True)
        self.proj_w = Tensor(np.zeros((2 * embed_dim, vector_len)), requires_grad=True)
        self.proj_b = Tensor(np.ones(2 * embed_dim), requires_grad=True)

    def named_parameters(self, prefix: str = "tokenizer.") -> Dict[str, Tensor]:
        return {
            prefix + "weight": self.weight,
            prefix + "bias": self.bias,
            prefix + "proj_w": self.proj_w,
            prefix + "proj_b": self.proj_b,
        }

    def modulated(self, modality: ModalityDescriptor) -> Tuple[Tensor, Tensor]:
        w_scale, b_scale = dynamic_params(modality.vector, self.proj_w, self.proj_b)
        return modulate(self.weight, self.bias, w_scale, b_scale)

    def tokenize(self, volume, modality: ModalityDescriptor) -> Tensor:
        """One H×W×D volume to a P×E token matrix (non-overlapping patches).

        Patches are taken with kernel == stride == patch size and flattened
        in lexicographic (h, w, d) patch order.
        """
        vol = volume if isinstance(volume, Tensor) else Tensor(volume)
        if vol.ndim == 3:
            vol = reshape(vol, (1,) + vol.shape)
        if vol.ndim != 4 or vol.shape[0] != 1:
            raise DimensionError("tokenize expects a single-channel H×W×D volume")
        weight, bias = self.modulated(modality)
        grid = conv3d(vol, weight, bias, stride=self.patch_size)  # E×h'×w'×d'
        e = self.embed_dim
        return transpose(reshape(grid, (e, -1)), (1, 0))  # P×E


def patchify(volume: np.ndarray, patch_size: int) -> np.ndarray:
    """H×W×D volume to (P, k^3) patch rows, matching the tokenizer's patch order."""
    k = int(patch_size)
    h, w, d = volume.shape
    if h % k or w % k or d % k:
        raise DimensionError(f"volume extents {volume.shape} not divisible by patch size {k}")
    v = volume.reshape(h // k, k, w // k, k, d // k, k)
    return np.ascontiguousarray(v.transpose(0, 2, 4, 1, 3, 5)).reshape(-1, k ** 3)


def unpatchify(patches: np.ndarray, grid: Tuple[int, int, int], patch_size: int) -> np.ndarray:
    """Inverse of patchify: (P, k^3) rows back to an H×W×D volume."""
    k = int(patch_size)
    gh, gw, gd = grid
    v = patches.reshape(gh, gw, gd, k, k, k).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(v).reshape(gh * k, gw * k, gd * k)
