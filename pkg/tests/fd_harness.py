"""Parallel central-finite-difference checker for the full pretraining loss.

The loss is evaluated through the model's public pieces (tokenize, assemble,
encoder blocks, decoder input, decoder blocks, reconstruction, masked loss)
with mask plans and targets fixed up front, so a perturbed parameter only
requires recomputing the stages it can influence. Worker processes are forked
with the model already built; each checks a chunk of parameters element by
element.
"""

import multiprocessing as mp
import os
from typing import Dict, List, Tuple

import numpy as np

from varmae.masking import assemble_unmasked, mix_seed, sample_mask
from varmae.model import MaskedAutoencoder, ViTConfig, masked_l2
from varmae.tensor import no_grad
from varmae.tokenizer import patchify

FD_STEP = 1e-5
REL_TOL_FLOOR = 1e-6   # below this gradient scale a relative check is FD-noise bound
ABS_TOL_SMALL = 1e-8   # tiny gradients must still agree absolutely

_CTX: dict = {}


def build_case(volume_extent: int = 8, n_modalities: int = 2, seed: int = 101,
               masking_ratio: float = 0.7):
    config = ViTConfig(volume_shape=(volume_extent,) * 3)
    model = MaskedAutoencoder(config, seed=seed)
    rng = np.random.default_rng(mix_seed(seed, "fd-volumes"))
    volumes = {m: rng.random((volume_extent,) * 3) for m in range(n_modalities)}
    p = config.num_patches
    plans = {m: sample_mask(p, masking_ratio, mix_seed(seed, "fd-mask", m))
             for m in volumes}
    targets = {m: patchify(volumes[m], config.patch_size) for m in volumes}
    return model, volumes, plans, targets


def _loss_from_stage(model, stage: int):
    """Recompute the loss from `stage` onward using cached activations.

    Stages: 0 tokenize+assemble, 1..E encoder blocks, E+1 decoder input,
    E+2..E+1+D decoder blocks, E+2+D reconstruction+loss.
    """
    cache = _CTX["cache"]
    depth = len(model.enc_blocks)
    dec_input_stage = depth + 1
    recon_stage = dec_input_stage + 1 + len(model.dec_blocks)

    if stage == 0:
        tokens = model.tokenize_volumes(_CTX["volumes"])
        embeds = {m: model.descriptor(m).embedding for m in tokens}
        x, _ = assemble_unmasked(tokens, _CTX["plans"], model.enc_pos, embeds)
        stage = 1
    elif stage <= recon_stage:
        x = cache[stage - 1]
    for block in model.enc_blocks[stage - 1:depth] if stage <= depth else []:
        x = block(x)
    if stage <= dec_input_stage:
        x = model.decoder_input(x if stage <= depth else cache[depth],
                                _CTX["plans"], _CTX["index_map"])
    if stage < recon_stage:
        first_dec = max(0, stage - (dec_input_stage + 1))
        for block in model.dec_blocks[first_dec:]:
            x = block(x)
    out = model.reconstruct(x, _CTX["plans"], _CTX["targets"])
    return masked_l2(out)


def _stage_of(name: str, depth: int, dec_depth: int) -> int:
    if name.startswith(("catalog.", "tokenizer.")) or name == "enc.pos":
        return 0
    if name.startswith("enc.block"):
        return int(name.split(".")[1][len("block"):]) + 1
    if name.startswith("dec.block"):
        return depth + 2 + int(name.split(".")[1][len("block"):])
    if name.startswith("dec.recon"):
        return depth + 2 + dec_depth
    return depth + 1  # dec.embed_*, dec.placeholder, dec.modality_embed, dec.pos


def _refresh_cache():
    model = _CTX["model"]
    with no_grad():
        tokens = model.tokenize_volumes(_CTX["volumes"])
        embeds = {m: model.descriptor(m).embedding for m in tokens}
        seq, index_map = assemble_unmasked(tokens, _CTX["plans"], model.enc_pos, embeds)
        _CTX["index_map"] = index_map
        cache = [seq]
        x = seq
        for block in model.enc_blocks:
            x = block(x)
            cache.append(x)
        x = model.decoder_input(x, _CTX["plans"], index_map)
        cache.append(x)
        for block in model.dec_blocks:
            x = block(x)
            cache.append(x)
        _CTX["cache"] = cache


def init_context(case_kwargs: dict):
    model, volumes, plans, targets = build_case(**case_kwargs)
    _CTX.update(model=model, volumes=volumes, plans=plans, targets=targets)
    _refresh_cache()
    # analytic gradients for the identical fixed-mask loss
    model_params = model.named_parameters()
    for p in model_params.values():
        p.grad = None
    loss = _loss_from_stage(model, 0)
    loss.backward()
    _CTX["grads"] = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                     for n, p in model_params.items()}
    _CTX["loss"] = loss.item()


def self_check() -> float:
    """Every staged evaluation must reproduce the full loss bit-for-bit."""
    model = _CTX["model"]
    n_stages = len(model.enc_blocks) + len(model.dec_blocks) + 3
    with no_grad():
        staged = _loss_from_stage(model, 0).item()
        for stage in range(1, n_stages):
            got = _loss_from_stage(model, stage).item()
            assert got == staged, (stage, got, staged)
    return staged


def check_chunk(names: List[str]) -> List[Tuple[str, float, float, int]]:
    """Per-element central differences for each named parameter.

    Returns (name, worst relative error above the scale floor,
    worst absolute error below it, element count).
    """
    model = _CTX["model"]
    params = model.named_parameters()
    depth = len(model.enc_blocks)
    dec_depth = len(model.dec_blocks)
    results = []
    for name in names:
        p = params[name]
        stage = _stage_of(name, depth, dec_depth)
        analytic = _CTX["grads"][name].reshape(-1)
        flat = p.data.reshape(-1)
        worst_rel = 0.0
        worst_abs = 0.0
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + FD_STEP
                up = _loss_from_stage(model, stage).item()
                flat[i] = orig - FD_STEP
                down = _loss_from_stage(model, stage).item()
                flat[i] = orig
                fd = (up - down) / (2.0 * FD_STEP)
                scale = max(abs(analytic[i]), abs(fd))
                if scale > REL_TOL_FLOOR:
                    worst_rel = max(worst_rel, abs(analytic[i] - fd) / scale)
                else:
                    worst_abs = max(worst_abs, abs(analytic[i] - fd))
        results.append((name, worst_rel, worst_abs, flat.size))
    return results


def _init_worker(case_kwargs: dict):
    init_context(case_kwargs)


def run_parallel_fd(case_kwargs: dict, workers: int = 2) -> Dict[str, Tuple[float, float, int]]:
    """Check every parameter element; returns {name: (rel_err, abs_err, count)}."""
    init_context(case_kwargs)
    self_check()
    params = _CTX["model"].named_parameters()
    names = sorted(params)
    order = sorted(names, key=lambda n: -params[n].size)
    chunks = [order[i::workers] for i in range(workers)]
    if workers <= 1 or os.name != "posix":
        outputs = [check_chunk(c) for c in chunks]
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers) as pool:
            outputs = pool.map(check_chunk, chunks)
    merged: Dict[str, Tuple[float, float, int]] = {}
    for chunk_result in outputs:
        for name, rel, absolute, count in chunk_result:
            merged[name] = (rel, absolute, count)
    return merged
