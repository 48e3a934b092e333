"""Optimization and orchestration: AdamW, warmup+cosine schedule, checkpoint
serialization, pretrained-encoder transfer, and the pretrain/finetune loops.

All randomness is derived from pure seed mixing, so a run is a deterministic
function of (dataset, config) and resuming from a checkpoint replays the exact
step sequence of an unbroken run.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import SubjectSample
from .errors import (ChecksumError, ConfigurationError, ContractError,
                     DivergenceError, MalformedHeaderError, TransferError,
                     TruncatedPayloadError)
from .heads import AdaptiveUnetr, ConcatUnetr, dice_loss
from .masking import mix_seed
from .model import MaskedAutoencoder, ViTConfig
from .stats import dice_score
from .tensor import Tensor, mul, sigmoid

CKPT_MAGIC = b"RCKP1"
TRANSFER_PREFIXES = ("catalog.", "tokenizer.", "enc.")


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments."""

    def __init__(self, params: Dict[str, Tensor], weight_decay: float = 0.05,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = float(weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        """One update; parameters whose grad is None are left untouched."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.params:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"schedule step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = (step - warmup_steps) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    catalog: List[str]
    params: Dict[str, np.ndarray]
    optimizer: Optional[dict]      # {"step": int, "m": {...}, "v": {...}}
    rng: dict                      # {"seed": int, "epoch": next epoch index}
    metrics: List[dict] = field(default_factory=list)
    format_version: int = 1


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.params)
    specs = [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names]
    chunks = [np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes() for n in names]
    if ckpt.optimizer is not None:
        for group in ("m", "v"):
            chunks.extend(np.ascontiguousarray(ckpt.optimizer[group][n],
                                               dtype="<f8").tobytes() for n in names)
    header = json.dumps(
        {"format_version": ckpt.format_version, "config": ckpt.config,
         "catalog": list(ckpt.catalog), "tensors": specs,
         "optimizer_step": None if ckpt.optimizer is None else int(ckpt.optimizer["step"]),
         "rng": ckpt.rng, "metrics": ckpt.metrics},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(CKPT_MAGIC) + 4 or not blob.startswith(CKPT_MAGIC):
        raise MalformedHeaderError(f"{path}: missing checkpoint magic")
    (header_len,) = struct.unpack_from("<I", blob, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 4
    if len(blob) < start + header_len:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        specs = header["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: bad header ({exc})") from exc
    has_opt = header.get("optimizer_step") is not None
    counts = [int(np.prod(s["shape"])) if s["shape"] else 1 for s in specs]
    total = sum(counts) * (3 if has_opt else 1)
    payload_start = start + header_len
    payload_end = payload_start + 8 * total
    if len(blob) < payload_end + 4:
        raise TruncatedPayloadError(f"{path}: payload truncated")
    payload = blob[payload_start:payload_end]
    (stored_crc,) = struct.unpack_from("<I", blob, payload_end)
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")

    flat = np.frombuffer(payload, dtype="<f8")
    groups: List[Dict[str, np.ndarray]] = []
    offset = 0
    for _ in range(3 if has_opt else 1):
        group = {}
        for spec, count in zip(specs, counts):
            group[spec["name"]] = flat[offset:offset + count].reshape(spec["shape"]).copy()
            offset += count
        groups.append(group)
    optimizer = None
    if has_opt:
        optimizer = {"step": int(header["optimizer_step"]), "m": groups[1], "v": groups[2]}
    return Checkpoint(config=header["config"], catalog=list(header["catalog"]),
                      params=groups[0], optimizer=optimizer, rng=header["rng"],
                      metrics=list(header["metrics"]),
                      format_version=int(header["format_version"]))


def set_named_parameters(model, values: Dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    for name, p in params.items():
        if name not in values:
            raise TransferError(f"checkpoint missing parameter {name!r}")
        if tuple(values[name].shape) != p.data.shape:
            raise TransferError(
                f"parameter {name!r} shape {values[name].shape} != model {p.data.shape}")
    for name, p in params.items():
        p.data[...] = values[name]


# ---------------------------------------------------------------------------
# encoder transfer
# ---------------------------------------------------------------------------


@dataclass
class TransferReport:
    transferred: List[str]
    fresh: List[str]
    dropped: List[str]


def _model_catalog_names(model) -> List[str]:
    if hasattr(model, "catalog"):
        return [d.name for d in model.catalog]
    return list(model.modality_names)


def transfer_encoder(ckpt: Checkpoint, model) -> TransferReport:
    """Copy tokenizer/modality/encoder weights from a pretraining checkpoint.

    Validates configuration first and writes nothing on mismatch. Decoder-side
    parameters of the checkpoint are dropped; the segmentation head (and the
    concat model's multi-channel patch embedder) stay fresh.
    """
    src = ckpt.config.get("model", {})
    dst = model.config.to_dict()
    compare = ["embed_dim", "depth", "heads", "mlp_ratio", "patch_size",
               "volume_shape", "pos_scheme"]
    if isinstance(model, (AdaptiveUnetr, MaskedAutoencoder)):
        compare.append("vector_len")
    for key in compare:
        if src.get(key) != dst.get(key):
            raise TransferError(
                f"config mismatch on {key!r}: checkpoint {src.get(key)!r} vs model {dst.get(key)!r}")
    if list(ckpt.catalog) != _model_catalog_names(model):
        raise TransferError(
            f"modality catalog mismatch: checkpoint {ckpt.catalog} vs model {_model_catalog_names(model)}")

    params = model.named_parameters()
    plan: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        if not name.startswith(TRANSFER_PREFIXES):
            continue
        if name not in ckpt.params:
            raise TransferError(f"checkpoint missing encoder parameter {name!r}")
        if tuple(ckpt.params[name].shape) != p.data.shape:
            raise TransferError(
                f"encoder parameter {name!r} shape {ckpt.params[name].shape} != model {p.data.shape}")
        plan[name] = ckpt.params[name]
    for name, arr in plan.items():
        params[name].data[...] = arr
    return TransferReport(
        transferred=sorted(plan),
        fresh=sorted(n for n in params if n not in plan),
        dropped=sorted(n for n in ckpt.params if n not in plan),
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    epochs: int = 100
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 4
    masking_ratio: float = 0.7
    warmup_frac: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "model"}
        d["model"] = self.model.to_dict()
        return d


@dataclass
class FinetuneConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    head: str = "adaptive"  # "adaptive" | "concat"
    epochs: int = 60
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 4
    warmup_frac: float = 0.05
    dice_smooth: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("adaptive", "concat"):
            raise ConfigurationError(f"unknown head {self.head!r}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "model"}
        d["model"] = self.model.to_dict()
        return d


MetricsSink = Optional[Callable[[dict], None]]


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _volumes64(sample: SubjectSample) -> Dict[int, np.ndarray]:
    return {mid: np.asarray(vol, dtype=np.float64) for mid, vol in sample.volumes.items()}


def run_pretrain(subjects: Sequence[SubjectSample], config: PretrainConfig,
                 modality_names: Sequence[str], resume: Optional[Checkpoint] = None,
                 sink: MetricsSink = None,
                 stop_epoch: Optional[int] = None) -> Tuple[MaskedAutoencoder, Checkpoint]:
    """Masked-reconstruction pretraining over all subjects, any modality subset.

    config.epochs defines the schedule; stop_epoch (if given) interrupts the
    run early, producing a checkpoint a later call can resume from.
    """
    if not subjects:
        raise ContractError("run_pretrain needs a non-empty dataset")
    model = MaskedAutoencoder(config.model, modality_names, seed=config.seed)
    params = model.named_parameters()
    opt = AdamW(params, weight_decay=config.weight_decay)

    steps_per_epoch = math.ceil(len(subjects) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup = int(round(config.warmup_frac * total_steps))

    history: List[dict] = []
    start_epoch = 0
    if resume is not None:
        set_named_parameters(model, resume.params)
        if resume.optimizer is not None:
            opt.load_state(resume.optimizer)
        start_epoch = int(resume.rng["epoch"])
        history = list(resume.metrics)

    end_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    sched_step = start_epoch * steps_per_epoch
    lr_t = lr_schedule(min(sched_step, total_steps), total_steps, config.base_lr, warmup)
    for epoch in range(start_epoch, end_epoch):
        order = np.random.default_rng(mix_seed(config.seed, "order", epoch)).permutation(len(subjects))
        losses = []
        for chunk in _batches(order, config.batch_size):
            opt.zero_grad()
            for si in chunk:
                subject = subjects[int(si)]
                mask_seed = mix_seed(config.seed, "mask", epoch, subject.subject_id)
                loss, _ = model.pretrain_forward(_volumes64(subject),
                                                 config.masking_ratio, mask_seed)
                if not np.isfinite(loss.data):
                    raise DivergenceError(
                        f"non-finite pretrain loss at epoch {epoch}, subject {subject.subject_id}")
                mul(loss, 1.0 / len(chunk)).backward()
                losses.append(loss.item())
            lr_t = lr_schedule(sched_step, total_steps, config.base_lr, warmup)
            opt.step(lr_t)
            sched_step += 1
        entry = {"epoch": epoch, "split": "pretrain",
                 "loss": float(np.mean(losses)), "dice": None, "lr": lr_t}
        history.append(entry)
        if sink:
            sink(entry)

    ckpt = Checkpoint(
        config={"kind": model.kind, "model": config.model.to_dict(),
                "train": config.to_dict()},
        catalog=list(modality_names),
        params={n: p.data.copy() for n, p in params.items()},
        optimizer=opt.state(),
        rng={"seed": config.seed, "epoch": end_epoch},
        metrics=history)
    return model, ckpt


def _mean_val_dice(model, subjects: Sequence[SubjectSample]) -> float:
    scores = []
    for subject in subjects:
        pred = model.predict(_volumes64(subject))
        scores.append(dice_score(pred.binary, subject.mask))
    return float(np.mean(scores))


def run_finetune(dataset: Dict[str, Sequence[SubjectSample]], config: FinetuneConfig,
                 modality_names: Sequence[str], init: Optional[Checkpoint] = None,
                 sink: MetricsSink = None):
    """Dice-loss finetuning; returns the best-validation-Dice model and checkpoint."""
    train = dataset.get("train", [])
    val = dataset.get("val", [])
    if not train:
        raise ContractError("run_finetune needs a non-empty train split")
    cls = AdaptiveUnetr if config.head == "adaptive" else ConcatUnetr
    model = cls(config.model, modality_names, seed=config.seed)
    report = transfer_encoder(init, model) if init is not None else None
    params = model.named_parameters()
    opt = AdamW(params, weight_decay=config.weight_decay)

    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup = int(round(config.warmup_frac * total_steps))

    history: List[dict] = []
    best_dice = -math.inf
    best_epoch = -1
    best_params = {n: p.data.copy() for n, p in params.items()}

    sched_step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng(mix_seed(config.seed, "order", epoch)).permutation(len(train))
        losses = []
        lr_t = 0.0
        for chunk in _batches(order, config.batch_size):
            opt.zero_grad()
            for si in chunk:
                subject = train[int(si)]
                if subject.mask is None:
                    raise ContractError(
                        f"finetune subject {subject.subject_id} has no lesion mask")
                logits = model.forward_logits(_volumes64(subject))
                loss = dice_loss(sigmoid(logits), subject.mask, config.dice_smooth)
                if not np.isfinite(loss.data):
                    raise DivergenceError(
                        f"non-finite finetune loss at epoch {epoch}, subject {subject.subject_id}")
                mul(loss, 1.0 / len(chunk)).backward()
                losses.append(loss.item())
            lr_t = lr_schedule(sched_step, total_steps, config.base_lr, warmup)
            opt.step(lr_t)
            sched_step += 1
        train_entry = {"epoch": epoch, "split": "train",
                       "loss": float(np.mean(losses)), "dice": None, "lr": lr_t}
        history.append(train_entry)
        if sink:
            sink(train_entry)
        if val:
            val_dice = _mean_val_dice(model, val)
            val_entry = {"epoch": epoch, "split": "val",
                         "loss": None, "dice": val_dice, "lr": lr_t}
            history.append(val_entry)
            if sink:
                sink(val_entry)
            if val_dice > best_dice:
                best_dice = val_dice
                best_epoch = epoch
                best_params = {n: p.data.copy() for n, p in params.items()}

    if val:
        set_named_parameters(model, best_params)

    ckpt = Checkpoint(
        config={"kind": model.kind, "model": config.model.to_dict(),
                "train": config.to_dict(),
                "selection": {"best_epoch": best_epoch,
                              "best_val_dice": None if best_epoch < 0 else best_dice}},
        catalog=list(modality_names),
        params={n: p.data.copy() for n, p in model.named_parameters().items()},
        optimizer=None,
        rng={"seed": config.seed, "epoch": config.epochs},
        metrics=history)
    return model, ckpt, report
