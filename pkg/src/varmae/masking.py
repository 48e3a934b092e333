"""Shared 3D positional embeddings, per-modality random masking, sequence assembly.

Positional embeddings are indexed by patch location only, so two volumes of
different modalities always agree at the same (h, w, d). Masks are sampled
independently per modality from a deterministic sub-seed.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .errors import BoundsError, ConfigurationError, DimensionError
from .tensor import Tensor, add, concat, index_select

SINUSOIDAL = "sinusoidal3d"
LEARNABLE = "learnable"


def mix_seed(*parts) -> int:
    """Deterministically mix ints/strings into a 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        else:
            h.update(b"i" + struct.pack("<q", int(part)))
    return int.from_bytes(h.digest(), "little") >> 1


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    # dim even; column 2j is sin, 2j+1 is cos, frequency ladder base 10000
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dim))
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((positions.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sinusoidal_table(grid: Tuple[int, int, int], dim: int) -> np.ndarray:
    """P×dim table over the patch grid; dim split into three equal axis blocks.

    Each block gets the standard sin/cos ladder over that axis' coordinate;
    if dim is not divisible into three even blocks the last few columns stay
    zero.
    """
    if dim < 6:
        raise ConfigurationError("sinusoidal 3D embeddings need dim >= 6")
    block = 2 * (dim // 6)
    coords = np.indices(grid).reshape(3, -1)  # lexicographic (h, w, d) order
    table = np.zeros((coords.shape[1], dim))
    for axis in range(3):
        table[:, axis * block:(axis + 1) * block] = _sincos_1d(coords[axis].astype(float), block)
    return table


@dataclass
class PositionTable:
    """Per-patch-location embeddings shared by all modalities."""

    grid: Tuple[int, int, int]
    scheme: str
    table: Tensor  # P×E; requires_grad only for the learnable scheme

    @classmethod
    def build(cls, grid: Tuple[int, int, int], dim: int, scheme: str = SINUSOIDAL,
              rng: np.random.Generator | None = None) -> "PositionTable":
        grid = tuple(int(g) for g in grid)
        if scheme == SINUSOIDAL:
            return cls(grid, scheme, Tensor(sinusoidal_table(grid, dim)))
        if scheme == LEARNABLE:
            if rng is None:
                raise ConfigurationError("learnable position table needs an rng")
            data = rng.normal(0.0, 0.02, size=(int(np.prod(grid)), dim))
            return cls(grid, scheme, Tensor(data, requires_grad=True))
        raise ConfigurationError(f"unknown positional scheme {scheme!r}")

    @property
    def num_patches(self) -> int:
        return self.table.shape[0]

    def flat_index(self, h: int, w: int, d: int) -> int:
        for name, idx, extent in zip(("h", "w", "d"), (h, w, d), self.grid):
            if not 0 <= idx < extent:
                raise BoundsError(f"patch index {name}={idx} outside grid extent {extent}")
        return (h * self.grid[1] + w) * self.grid[2] + d

    def lookup(self, h: int, w: int, d: int) -> np.ndarray:
        """Embedding vector for one patch location (modality plays no part)."""
        return self.table.data[self.flat_index(h, w, d)].copy()


@dataclass
class MaskPlan:
    """Which of the P patches of one modality volume are hidden."""

    mask: np.ndarray  # bool, length P, True = masked
    ratio: float
    seed: int

    @property
    def num_patches(self) -> int:
        return int(self.mask.size)

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def unmasked_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


def sample_mask(num_patches: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform random subset of size floor(ratio*P), via a seeded shuffle of 0..P-1."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"masking ratio {ratio} outside [0, 1]")
    count = int(math.floor(ratio * num_patches + 1e-9))
    perm = np.random.default_rng(seed).permutation(num_patches)
    mask = np.zeros(num_patches, dtype=bool)
    mask[perm[:count]] = True
    return MaskPlan(mask=mask, ratio=ratio, seed=seed)


def assemble_unmasked(
    tokens: Dict[int, Tensor],
    plans: Dict[int, MaskPlan],
    positions: PositionTable,
    modality_embeddings: Dict[int, Tensor],
) -> Tuple[Tensor, List[Tuple[int, int]]]:
    """Concatenate all modalities' unmasked tokens into one sequence.

    Each kept token is raw token + positional embedding + modality embedding.
    Slots run modality-major (ascending modality id), patch-ascending; the
    returned index map lists the (modality id, patch index) behind each slot.
    """
    present = sorted(tokens)
    p = positions.num_patches
    rows = []
    index_map: List[Tuple[int, int]] = []
    for mid in present:
        tok = tokens[mid]
        if tok.shape[0] != p:
            raise DimensionError(
                f"modality {mid} has {tok.shape[0]} tokens, position table expects {p}")
        if plans[mid].num_patches != p:
            raise DimensionError(
                f"modality {mid} mask plan covers {plans[mid].num_patches} patches, expected {p}")
        keep = plans[mid].unmasked_indices
        row = add(add(index_select(tok, keep), index_select(positions.table, keep)),
                  modality_embeddings[mid])
        rows.append(row)
        index_map.extend((mid, int(pi)) for pi in keep)
    return concat(rows, axis=0), index_map
