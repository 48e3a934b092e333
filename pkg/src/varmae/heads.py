"""Fine-tuning architectures: a variable-input head that max-pools token
features over the modality axis at every decoder tap, and a fixed-channel
baseline that concatenates all catalog modalities (zero-filling absent ones).
Both drive the same UNETR-style upsampling decoder. Also holds the Dice loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (ConfigurationError, ContractError, DimensionError,
                     UnknownModalityError)
from .masking import LEARNABLE, PositionTable, mix_seed
from .model import DEFAULT_MODALITIES, TransformerBlock, ViTConfig
from .tensor import (Tensor, add, concat, conv3d, conv_transpose3d, div,
                     gelu, index_select, max_pool_axis, mul, no_grad, pad3d,
                     reshape, stable_sigmoid, sub, transpose, tsum)
from .tokenizer import DynamicConvTokenizer, ModalityDescriptor, make_catalog

DEFAULT_TAPS = (1, 2, 3, 4)


@dataclass
class SegmentationMask:
    """Binary lesion prediction with the soft probabilities behind it."""

    binary: np.ndarray        # bool H×W×D
    probabilities: np.ndarray  # float H×W×D in [0, 1]


def modality_pool(x: Tensor) -> Tensor:
    """Collapse an N×P×E token stack to P×E by elementwise max over modalities."""
    if x.ndim != 3:
        raise DimensionError("modality_pool expects an N×P×E tensor")
    return max_pool_axis(x, axis=0)


def dice_loss(soft_pred: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Dice loss: 1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth)."""
    if smooth <= 0:
        raise ContractError("dice_loss smooth must be positive")
    t = np.asarray(target, dtype=np.float64)
    if soft_pred.shape != t.shape:
        raise DimensionError(
            f"dice_loss extent mismatch: prediction {soft_pred.shape} vs target {t.shape}")
    p = reshape(soft_pred, (-1,))
    flat = t.reshape(-1)
    inter = tsum(mul(p, Tensor(flat)))
    denom = add(tsum(p), float(flat.sum()))
    return sub(1.0, div(add(mul(inter, 2.0), smooth), add(denom, smooth)))


def tokens_to_grid(tokens: Tensor, grid: Tuple[int, int, int]) -> Tensor:
    """P×E tokens (lexicographic patch order) to an E×gh×gw×gd feature volume."""
    gh, gw, gd = grid
    return transpose(reshape(tokens, (gh, gw, gd, -1)), (3, 0, 1, 2))


class UnetrDecoder:
    """UNETR-shaped upsampling head over four encoder taps.

    Taps arrive as E-channel feature volumes at the patch grid; the deepest two
    are merged after one 2x transposed conv, the shallowest two after two, with
    a plain 3x3x3 conv + GELU fusing each level. Requires patch size 4 (two
    doubling stages from patch grid to voxel grid).
    """

    def __init__(self, embed_dim: int, grid: Tuple[int, int, int],
                 volume_shape: Tuple[int, int, int], patch_size: int,
                 rng: np.random.Generator, f_lo: int = 16, f_hi: int = 32):
        if patch_size != 4:
            raise ConfigurationError(
                f"UNETR decoder supports patch size 4 (two upsampling stages), got {patch_size}")
        self.grid = tuple(grid)
        self.volume_shape = tuple(volume_shape)
        e = embed_dim

        def w(shape):
            # no normalization layers in this head, so keep activations
            # roughly unit-scale with fan-in init (transposed convs
            # distribute fan over the k^3 output positions)
            if shape[2:] == (2, 2, 2):
                fan_in = shape[0]
            else:
                fan_in = shape[1] * shape[2] * shape[3] * shape[4]
            std = math.sqrt(2.0 / fan_in)
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        self.up4_w, self.up4_b = w((e, f_hi, 2, 2, 2)), zeros(f_hi)
        self.skip3_w, self.skip3_b = w((e, f_hi, 2, 2, 2)), zeros(f_hi)
        self.fuse_hi_w, self.fuse_hi_b = w((f_hi, 2 * f_hi, 3, 3, 3)), zeros(f_hi)
        self.up2_w, self.up2_b = w((f_hi, f_lo, 2, 2, 2)), zeros(f_lo)
        self.skip2_w1, self.skip2_b1 = w((e, f_lo, 2, 2, 2)), zeros(f_lo)
        self.skip2_w2, self.skip2_b2 = w((f_lo, f_lo, 2, 2, 2)), zeros(f_lo)
        self.skip1_w1, self.skip1_b1 = w((e, f_lo, 2, 2, 2)), zeros(f_lo)
        self.skip1_w2, self.skip1_b2 = w((f_lo, f_lo, 2, 2, 2)), zeros(f_lo)
        self.fuse_lo_w, self.fuse_lo_b = w((f_lo, 3 * f_lo, 3, 3, 3)), zeros(f_lo)
        self.out_w, self.out_b = w((1, f_lo, 1, 1, 1)), zeros(1)

    _FIELDS = ("up4_w", "up4_b", "skip3_w", "skip3_b", "fuse_hi_w", "fuse_hi_b",
               "up2_w", "up2_b", "skip2_w1", "skip2_b1", "skip2_w2", "skip2_b2",
               "skip1_w1", "skip1_b1", "skip1_w2", "skip1_b2",
               "fuse_lo_w", "fuse_lo_b", "out_w", "out_b")

    def named_parameters(self, prefix: str = "head.") -> Dict[str, Tensor]:
        return {prefix + name: getattr(self, name) for name in self._FIELDS}

    def __call__(self, taps: List[Tensor]) -> Tensor:
        if len(taps) != 4:
            raise ConfigurationError(f"UNETR decoder expects 4 taps, got {len(taps)}")
        z1, z2, z3, z4 = taps
        x = conv_transpose3d(z4, self.up4_w, self.up4_b, 2)
        s3 = conv_transpose3d(z3, self.skip3_w, self.skip3_b, 2)
        x = gelu(conv3d(pad3d(concat([x, s3], axis=0), 1), self.fuse_hi_w, self.fuse_hi_b))
        x = conv_transpose3d(x, self.up2_w, self.up2_b, 2)
        s2 = conv_transpose3d(gelu(conv_transpose3d(z2, self.skip2_w1, self.skip2_b1, 2)),
                              self.skip2_w2, self.skip2_b2, 2)
        s1 = conv_transpose3d(gelu(conv_transpose3d(z1, self.skip1_w1, self.skip1_b1, 2)),
                              self.skip1_w2, self.skip1_b2, 2)
        x = gelu(conv3d(pad3d(concat([x, s2, s1], axis=0), 1), self.fuse_lo_w, self.fuse_lo_b))
        logits = conv3d(x, self.out_w, self.out_b)
        return reshape(logits, self.volume_shape)


def _validate_taps(taps: Sequence[int], depth: int) -> Tuple[int, ...]:
    taps = tuple(int(t) for t in taps)
    if len(taps) != 4 or list(taps) != sorted(set(taps)):
        raise ConfigurationError(f"taps must be 4 distinct ascending block depths, got {taps}")
    if taps[0] < 1 or taps[-1] > depth:
        raise ConfigurationError(f"taps {taps} outside encoder depth {depth}")
    return taps


def _encode_collect(blocks: List[TransformerBlock], seq: Tensor) -> List[Tensor]:
    states = []
    x = seq
    for block in blocks:
        x = block(x)
        states.append(x)
    return states


class AdaptiveUnetr:
    """Variable-input segmentation model: dynamic tokenizer + transformer
    encoder shared with pretraining, taps pooled over the modality axis, then
    the UNETR decoder. Accepts any non-empty subset of the catalog and never
    pads for absent modalities."""

    kind = "adaptive"

    def __init__(self, config: ViTConfig, modality_names: Sequence[str] = DEFAULT_MODALITIES,
                 seed: int = 0, taps: Sequence[int] = DEFAULT_TAPS):
        self.config = config
        self.seed = int(seed)
        self.taps = _validate_taps(taps, config.depth)
        rng = np.random.default_rng(mix_seed(seed, "adaptive-init"))
        e = config.embed_dim
        self.catalog = make_catalog(modality_names, config.vector_len, e, rng)
        self.tokenizer = DynamicConvTokenizer(e, config.patch_size, config.vector_len, rng)
        self.enc_pos = PositionTable.build(config.grid, e, config.pos_scheme, rng)
        self.enc_blocks = [TransformerBlock(e, config.heads, config.mlp_ratio, rng)
                           for _ in range(config.depth)]
        self.head = UnetrDecoder(e, config.grid, config.volume_shape, config.patch_size, rng)

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for desc in self.catalog:
            params[f"catalog.{desc.id}.vector"] = desc.vector
            params[f"catalog.{desc.id}.embedding"] = desc.embedding
        params.update(self.tokenizer.named_parameters())
        if self.enc_pos.scheme == LEARNABLE:
            params["enc.pos"] = self.enc_pos.table
        for i, block in enumerate(self.enc_blocks):
            params.update(block.named_parameters(f"enc.block{i}."))
        params.update(self.head.named_parameters())
        return params

    def descriptor(self, modality_id: int) -> ModalityDescriptor:
        for desc in self.catalog:
            if desc.id == modality_id:
                return desc
        raise UnknownModalityError(f"modality id {modality_id} not in catalog")

    def forward_logits(self, volumes: Dict[int, np.ndarray]) -> Tensor:
        if not volumes:
            raise ContractError("a subject needs at least one modality volume")
        present = sorted(volumes)
        rows = []
        for mid in present:
            vol = volumes[mid]
            if tuple(np.shape(vol)) != self.config.volume_shape:
                raise DimensionError(
                    f"modality {mid} volume shape {np.shape(vol)} != configured {self.config.volume_shape}")
            desc = self.descriptor(mid)
            tok = self.tokenizer.tokenize(vol, desc)
            rows.append(add(add(tok, self.enc_pos.table), desc.embedding))
        seq = concat(rows, axis=0)
        states = _encode_collect(self.enc_blocks, seq)
        n, p = len(present), self.config.num_patches
        taps = []
        for t in self.taps:
            pooled = modality_pool(reshape(states[t - 1], (n, p, -1)))
            taps.append(tokens_to_grid(pooled, self.config.grid))
        return self.head(taps)

    def predict(self, volumes: Dict[int, np.ndarray]) -> SegmentationMask:
        with no_grad():
            logits = self.forward_logits(volumes)
        prob = stable_sigmoid(logits.data)
        return SegmentationMask(binary=prob > 0.5, probabilities=prob)


class ConcatUnetr:
    """Fixed-channel baseline: all catalog modalities stacked on the channel
    axis (zero-filled when absent), a fresh multi-channel patch embedder, the
    transferred transformer encoder, and the UNETR decoder."""

    kind = "concat"

    def __init__(self, config: ViTConfig, modality_names: Sequence[str] = DEFAULT_MODALITIES,
                 seed: int = 0, taps: Sequence[int] = DEFAULT_TAPS):
        self.config = config
        self.seed = int(seed)
        self.taps = _validate_taps(taps, config.depth)
        self.modality_names = tuple(str(n) for n in modality_names)
        rng = np.random.default_rng(mix_seed(seed, "concat-init"))
        e, k, c = config.embed_dim, config.patch_size, len(self.modality_names)
        std = math.sqrt(2.0 / (c * k ** 3 + e))
        self.patch_w = Tensor(rng.normal(0.0, std, size=(e, c, k, k, k)), requires_grad=True)
        self.patch_b = Tensor(np.zeros(e), requires_grad=True)
        self.enc_pos = PositionTable.build(config.grid, e, config.pos_scheme, rng)
        self.enc_blocks = [TransformerBlock(e, config.heads, config.mlp_ratio, rng)
                           for _ in range(config.depth)]
        self.head = UnetrDecoder(e, config.grid, config.volume_shape, config.patch_size, rng)

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {"patch.weight": self.patch_w, "patch.bias": self.patch_b}
        if self.enc_pos.scheme == LEARNABLE:
            params["enc.pos"] = self.enc_pos.table
        for i, block in enumerate(self.enc_blocks):
            params.update(block.named_parameters(f"enc.block{i}."))
        params.update(self.head.named_parameters())
        return params

    def assemble_channels(self, volumes: Dict[int, np.ndarray]) -> np.ndarray:
        """Catalog-ordered C×H×W×D stack; absent modalities become zero volumes."""
        if not volumes:
            raise ContractError("a subject needs at least one modality volume")
        c = len(self.modality_names)
        stacked = np.zeros((c,) + self.config.volume_shape)
        for mid, vol in volumes.items():
            if not 0 <= int(mid) < c:
                raise UnknownModalityError(f"modality id {mid} not in catalog of size {c}")
            if tuple(np.shape(vol)) != self.config.volume_shape:
                raise DimensionError(
                    f"modality {mid} volume shape {np.shape(vol)} != configured {self.config.volume_shape}")
            stacked[int(mid)] = np.asarray(vol, dtype=np.float64)
        return stacked

    def forward_logits(self, volumes: Dict[int, np.ndarray]) -> Tensor:
        stacked = Tensor(self.assemble_channels(volumes))
        grid_feats = conv3d(stacked, self.patch_w, self.patch_b, stride=self.config.patch_size)
        tokens = transpose(reshape(grid_feats, (self.config.embed_dim, -1)), (1, 0))
        seq = add(tokens, self.enc_pos.table)
        states = _encode_collect(self.enc_blocks, seq)
        taps = [tokens_to_grid(states[t - 1], self.config.grid) for t in self.taps]
        return self.head(taps)

    def predict(self, volumes: Dict[int, np.ndarray]) -> SegmentationMask:
        with no_grad():
            logits = self.forward_logits(volumes)
        prob = stable_sigmoid(logits.data)
        return SegmentationMask(binary=prob > 0.5, probabilities=prob)
