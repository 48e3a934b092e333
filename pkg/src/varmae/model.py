"""Masked-autoencoder model: transformer encoder over unmasked tokens, decoder
with a shared placeholder token at masked slots, and the masked-only L2 loss.

A subject contributes one token set per present modality; the encoder sees the
concatenation of all unmasked tokens, the decoder sees all N*P slots with
positional and modality embeddings re-added after the width projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (ConfigurationError, ContractError, DimensionError,
                     UnknownModalityError)
from .masking import (LEARNABLE, SINUSOIDAL, MaskPlan, PositionTable,
                      assemble_unmasked, mix_seed, sample_mask)
from .tensor import (Tensor, add, attention, concat, gelu, index_select,
                     layer_norm, linear, mean, mul, reshape, sub)
from .tokenizer import (DynamicConvTokenizer, ModalityDescriptor, make_catalog,
                        patchify)

DEFAULT_MODALITIES = ("adc", "trace", "t2")


@dataclass
class ViTConfig:
    """Desk-scale transformer configuration; every field is a dial."""

    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    dec_embed_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    patch_size: int = 4
    volume_shape: Tuple[int, int, int] = (16, 16, 16)
    vector_len: int = 16
    pos_scheme: str = SINUSOIDAL

    def __post_init__(self):
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        if self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.dec_embed_dim % self.dec_heads:
            raise ConfigurationError(
                f"dec_embed_dim {self.dec_embed_dim} not divisible by dec_heads {self.dec_heads}")
        for name, extent in zip("HWD", self.volume_shape):
            if extent % self.patch_size:
                raise ConfigurationError(
                    f"volume extent {name}={extent} not divisible by patch size {self.patch_size}")
        if self.pos_scheme not in (SINUSOIDAL, LEARNABLE):
            raise ConfigurationError(f"unknown positional scheme {self.pos_scheme!r}")

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(v // self.patch_size for v in self.volume_shape)

    @property
    def num_patches(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**{**d, "volume_shape": tuple(d.get("volume_shape", (16, 16, 16)))})


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.heads = heads
        hidden = dim * mlp_ratio

        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        self.ln1_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_b = zeros(dim)
        self.wq, self.bq = w((dim, dim)), zeros(dim)
        self.wk, self.bk = w((dim, dim)), zeros(dim)
        self.wv, self.bv = w((dim, dim)), zeros(dim)
        self.wo, self.bo = w((dim, dim)), zeros(dim)
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_b = zeros(dim)
        self.mlp_w1, self.mlp_b1 = w((hidden, dim)), zeros(hidden)
        self.mlp_w2, self.mlp_b2 = w((dim, hidden)), zeros(dim)

    def __call__(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln1_g, self.ln1_b)
        att = attention(linear(h, self.wq, self.bq),
                        linear(h, self.wk, self.bk),
                        linear(h, self.wv, self.bv), self.heads)
        x = add(x, linear(att, self.wo, self.bo))
        h = layer_norm(x, self.ln2_g, self.ln2_b)
        h = linear(gelu(linear(h, self.mlp_w1, self.mlp_b1)), self.mlp_w2, self.mlp_b2)
        return add(x, h)

    _FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {prefix + name: getattr(self, name) for name in self._FIELDS}


@dataclass
class ReconstructionOutput:
    """Predicted and target patch values for every present modality."""

    predictions: Dict[int, Tensor]    # modality id -> P×k^3
    targets: Dict[int, np.ndarray]    # modality id -> P×k^3
    plans: Dict[int, MaskPlan]


def masked_l2(output: ReconstructionOutput) -> Tensor:
    """Mean squared error over masked patches' voxels only."""
    parts = []
    for mid in sorted(output.predictions):
        pred = output.predictions[mid]
        target = output.targets[mid]
        if pred.shape != target.shape:
            raise DimensionError(
                f"modality {mid}: prediction shape {pred.shape} != target shape {target.shape}")
        hidden = output.plans[mid].masked_indices
        if hidden.size == 0:
            continue
        diff = sub(index_select(pred, hidden), Tensor(target[hidden]))
        parts.append(reshape(diff, (-1,)))
    if not parts:
        raise ContractError("masked_l2 requires at least one masked patch")
    d = concat(parts, axis=0)
    return mean(mul(d, d))


class MaskedAutoencoder:
    """Variable-modality masked autoencoder over 3D volumes."""

    kind = "mae"

    def __init__(self, config: ViTConfig, modality_names: Sequence[str] = DEFAULT_MODALITIES,
                 seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(mix_seed(seed, "mae-init"))
        e, e_dec = config.embed_dim, config.dec_embed_dim
        k = config.patch_size

        self.catalog = make_catalog(modality_names, config.vector_len, e, rng)
        self.tokenizer = DynamicConvTokenizer(e, k, config.vector_len, rng)
        self.enc_pos = PositionTable.build(config.grid, e, config.pos_scheme, rng)
        self.enc_blocks = [TransformerBlock(e, config.heads, config.mlp_ratio, rng)
                           for _ in range(config.depth)]

        self.dec_embed_w = Tensor(rng.normal(0.0, 0.02, size=(e_dec, e)), requires_grad=True)
        self.dec_embed_b = Tensor(np.zeros(e_dec), requires_grad=True)
        self.placeholder = Tensor(rng.normal(0.0, 0.02, size=e_dec), requires_grad=True)
        self.dec_pos = PositionTable.build(config.grid, e_dec, config.pos_scheme, rng)
        self.dec_modality_embed = Tensor(
            rng.normal(0.0, 0.02, size=(len(self.catalog), e_dec)), requires_grad=True)
        self.dec_blocks = [TransformerBlock(e_dec, config.dec_heads, config.mlp_ratio, rng)
                           for _ in range(config.dec_depth)]
        self.recon_w = Tensor(rng.normal(0.0, 0.02, size=(k ** 3, e_dec)), requires_grad=True)
        self.recon_b = Tensor(np.zeros(k ** 3), requires_grad=True)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

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
        params["dec.embed_w"] = self.dec_embed_w
        params["dec.embed_b"] = self.dec_embed_b
        params["dec.placeholder"] = self.placeholder
        params["dec.modality_embed"] = self.dec_modality_embed
        if self.dec_pos.scheme == LEARNABLE:
            params["dec.pos"] = self.dec_pos.table
        for i, block in enumerate(self.dec_blocks):
            params.update(block.named_parameters(f"dec.block{i}."))
        params["dec.recon_w"] = self.recon_w
        params["dec.recon_b"] = self.recon_b
        return params

    def descriptor(self, modality_id: int) -> ModalityDescriptor:
        for desc in self.catalog:
            if desc.id == modality_id:
                return desc
        raise UnknownModalityError(f"modality id {modality_id} not in catalog")

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def tokenize_volumes(self, volumes: Dict[int, np.ndarray]) -> Dict[int, Tensor]:
        if not volumes:
            raise ContractError("a subject needs at least one modality volume")
        tokens = {}
        for mid, vol in volumes.items():
            if tuple(np.shape(vol)) != self.config.volume_shape:
                raise DimensionError(
                    f"modality {mid} volume shape {np.shape(vol)} != configured {self.config.volume_shape}")
            tokens[mid] = self.tokenizer.tokenize(vol, self.descriptor(mid))
        return tokens

    def encode(self, seq: Tensor) -> Tensor:
        """Apply the encoder blocks to an already-embedded U×E sequence."""
        if seq.shape[0] == 0:
            raise ContractError("cannot encode an empty sequence (everything is masked)")
        x = seq
        for block in self.enc_blocks:
            x = block(x)
        return x

    def decoder_input(self, encoded: Tensor, plans: Dict[int, MaskPlan],
                      index_map: List[Tuple[int, int]]) -> Tensor:
        """Project encoder outputs to decoder width, fill masked slots with the
        shared placeholder, and re-add positional and modality embeddings."""
        present = sorted(plans)
        p = self.config.num_patches
        u = encoded.shape[0]
        expected = {(mid, int(pi)) for mid in present
                    for pi in plans[mid].unmasked_indices}
        if len(index_map) != u or set(index_map) != expected:
            raise ContractError("index map inconsistent with mask plans")

        h = linear(encoded, self.dec_embed_w, self.dec_embed_b)          # U×E_dec
        base = concat([h, reshape(self.placeholder, (1, -1))], axis=0)   # (U+1)×E_dec
        row_of = {key: i for i, key in enumerate(index_map)}
        sel = np.array([row_of.get((mid, pi), u)
                        for mid in present for pi in range(p)], dtype=np.intp)
        full = index_select(base, sel)                                   # (N·P)×E_dec
        pos_idx = np.tile(np.arange(p), len(present))
        mod_idx = np.repeat(np.array(present, dtype=np.intp), p)
        return add(add(full, index_select(self.dec_pos.table, pos_idx)),
                   index_select(self.dec_modality_embed, mod_idx))

    def reconstruct(self, decoded: Tensor, plans: Dict[int, MaskPlan],
                    targets: Dict[int, np.ndarray]) -> ReconstructionOutput:
        """Map decoded tokens back to patch-value rows, one block per modality."""
        present = sorted(plans)
        p = self.config.num_patches
        pred = linear(decoded, self.recon_w, self.recon_b)               # (N·P)×k^3
        predictions = {mid: pred[i * p:(i + 1) * p] for i, mid in enumerate(present)}
        return ReconstructionOutput(predictions=predictions, targets=targets, plans=plans)

    def decode(self, encoded: Tensor, plans: Dict[int, MaskPlan],
               index_map: List[Tuple[int, int]],
               targets: Dict[int, np.ndarray]) -> ReconstructionOutput:
        """Fill masked slots with the shared placeholder and reconstruct all patches."""
        x = self.decoder_input(encoded, plans, index_map)
        for block in self.dec_blocks:
            x = block(x)
        return self.reconstruct(x, plans, targets)

    def pretrain_forward(self, volumes: Dict[int, np.ndarray], masking_ratio: float,
                         mask_seed: int) -> Tuple[Tensor, ReconstructionOutput]:
        """Tokenize, mask, encode, decode, and compute the masked L2 loss."""
        tokens = self.tokenize_volumes(volumes)
        p = self.config.num_patches
        plans = {mid: sample_mask(p, masking_ratio, mix_seed(mask_seed, mid))
                 for mid in tokens}
        embeddings = {mid: self.descriptor(mid).embedding for mid in tokens}
        seq, index_map = assemble_unmasked(tokens, plans, self.enc_pos, embeddings)
        encoded = self.encode(seq)
        targets = {mid: patchify(np.asarray(volumes[mid], dtype=np.float64),
                                 self.config.patch_size)
                   for mid in tokens}
        output = self.decode(encoded, plans, index_map, targets)
        return masked_l2(output), output
