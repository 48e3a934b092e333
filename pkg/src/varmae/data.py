"""Deterministic synthetic multi-contrast 3D dataset with planted lesions.

Every subject shares one latent "anatomy" volume rendered through a monotone
per-contrast intensity transfer. Lesions are ellipsoids that show up bright in
the trace-like contrast and dark in the adc-like contrast, so the segmentation
task is solvable from the two required contrasts. Volumes are stored on disk
as RVOL files: magic, length-prefixed JSON header, little-endian float32
payload, CRC32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (ChecksumError, ConfigurationError, MalformedHeaderError,
                     TruncatedPayloadError, UnknownModalityError)
from .masking import mix_seed

RVOL_MAGIC = b"RVOL1"
MASK_MODALITY_ID = -1  # header modality_id reserved for lesion masks


@dataclass
class SubjectSample:
    """A set of co-registered volumes for one subject, plus an optional lesion mask."""

    subject_id: int
    volumes: Dict[int, np.ndarray]           # modality id -> float32 H×W×D in [0, 1]
    mask: Optional[np.ndarray] = None        # uint8 H×W×D, 1 = lesion
    split: str = ""

    @property
    def modality_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.volumes))


@dataclass
class GeneratorConfig:
    volume_shape: Tuple[int, int, int] = (16, 16, 16)
    modality_names: Tuple[str, ...] = ("adc", "trace", "t2")
    availability: Tuple[float, ...] = (1.0, 1.0, 0.6)
    gamma: Tuple[float, ...] = (1.5, 0.7, 1.0)          # monotone transfer per modality
    lesion_effect: Tuple[float, ...] = (-0.55, 0.6, 0.15)  # hypo in adc, hyper in trace
    lesion_count: Tuple[int, int] = (1, 3)
    lesion_radius: Tuple[float, float] = (1.5, 3.5)
    smooth_sigma: float = 2.0
    noise_std: float = 0.04
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        self.modality_names = tuple(self.modality_names)
        n = len(self.modality_names)
        for name, values in (("availability", self.availability), ("gamma", self.gamma),
                             ("lesion_effect", self.lesion_effect)):
            if len(values) != n:
                raise ConfigurationError(f"{name} needs one entry per modality ({n})")
        self.availability = tuple(float(a) for a in self.availability)
        if any(self.availability[i] != 1.0 for i in self.required_ids):
            raise ConfigurationError("required modalities must have availability 1.0")

    @property
    def required_ids(self) -> Tuple[int, ...]:
        # the first two contrasts are always acquired (adc/trace analogs)
        return tuple(range(min(2, len(self.modality_names))))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        kwargs = dict(d)
        for key in ("volume_shape", "modality_names", "availability", "gamma",
                    "lesion_effect", "lesion_count", "lesion_radius"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _gaussian_blur3(volume: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()

    def smooth_row(row):
        # convolve in "full" mode and slice, so kernels longer than the row work
        return np.convolve(row, kernel, mode="full")[radius:radius + row.size]

    out = volume.astype(np.float64)
    for axis in range(3):
        out = np.apply_along_axis(smooth_row, axis, out)
    return out


def _ellipsoid(shape: Tuple[int, int, int], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    grids = np.indices(shape).astype(np.float64)
    dist = sum(((grids[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return dist <= 1.0


def generate_subject(config: GeneratorConfig, index: int) -> SubjectSample:
    """Pure function of (config, index): same arguments, bit-identical sample."""
    rng = np.random.default_rng(mix_seed(config.seed, "subject", index))
    shape = config.volume_shape

    latent = _gaussian_blur3(rng.standard_normal(shape), config.smooth_sigma)
    lo, hi = latent.min(), latent.max()
    latent = (latent - lo) / (hi - lo + 1e-12)

    n_lesions = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1))
    mask = np.zeros(shape, dtype=bool)
    r_lo, r_hi = config.lesion_radius
    for _ in range(n_lesions):
        radii = rng.uniform(r_lo, r_hi, size=3)
        center = np.array([rng.uniform(radii[a], shape[a] - 1 - radii[a]) for a in range(3)])
        mask |= _ellipsoid(shape, center, radii)

    present = [mid for mid in range(len(config.modality_names))
               if mid in config.required_ids or rng.random() < config.availability[mid]]
    volumes: Dict[int, np.ndarray] = {}
    for mid in range(len(config.modality_names)):
        base = latent ** config.gamma[mid]
        strength = config.lesion_effect[mid] * rng.uniform(0.75, 1.0)
        vol = base + strength * mask
        vol = vol + rng.normal(0.0, config.noise_std, size=shape)
        if mid in present:
            volumes[mid] = np.clip(vol, 0.0, 1.0).astype(np.float32)

    return SubjectSample(subject_id=int(index), volumes=volumes,
                         mask=mask.astype(np.uint8))


def make_splits(config: GeneratorConfig, n_train: int, n_val: int, n_test: int,
                id_offset: int = 0) -> Tuple[List[int], List[int], List[int]]:
    """Disjoint train/val/test subject-id lists, deterministic per seed."""
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ConfigurationError(f"{name} must be >= 1")
    total = n_train + n_val + n_test
    rng = np.random.default_rng(mix_seed(config.seed, "splits"))
    ids = (id_offset + rng.permutation(total)).tolist()
    return ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]


# ---------------------------------------------------------------------------
# RVOL file format
# ---------------------------------------------------------------------------


def write_rvol(path, subject_id: int, modality_id: int, volume: np.ndarray) -> None:
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim != 3:
        raise ConfigurationError("RVOL volumes are 3-dimensional")
    header = json.dumps(
        {"subject_id": int(subject_id), "modality_id": int(modality_id),
         "dims": [int(v) for v in vol.shape], "dtype": "f32le"},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = vol.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(RVOL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_rvol(path, catalog_size: Optional[int] = None) -> Tuple[int, int, np.ndarray]:
    """Returns (subject_id, modality_id, float32 volume); modality_id -1 is a mask."""
    blob = Path(path).read_bytes()
    if len(blob) < len(RVOL_MAGIC) + 4 or not blob.startswith(RVOL_MAGIC):
        raise MalformedHeaderError(f"{path}: missing RVOL magic")
    (header_len,) = struct.unpack_from("<I", blob, len(RVOL_MAGIC))
    header_start = len(RVOL_MAGIC) + 4
    if len(blob) < header_start + header_len:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(blob[header_start:header_start + header_len].decode("utf-8"))
        subject_id = int(header["subject_id"])
        modality_id = int(header["modality_id"])
        dims = tuple(int(v) for v in header["dims"])
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: bad header ({exc})") from exc
    if dtype != "f32le" or len(dims) != 3:
        raise MalformedHeaderError(f"{path}: unsupported dtype/dims {dtype}/{dims}")
    if modality_id < MASK_MODALITY_ID:
        raise MalformedHeaderError(f"{path}: invalid modality id {modality_id}")
    if catalog_size is not None and modality_id >= catalog_size:
        raise UnknownModalityError(
            f"{path}: modality id {modality_id} outside catalog of size {catalog_size}")
    count = dims[0] * dims[1] * dims[2]
    payload_start = header_start + header_len
    payload_end = payload_start + 4 * count
    if len(blob) < payload_end + 4:
        raise TruncatedPayloadError(f"{path}: payload truncated")
    payload = blob[payload_start:payload_end]
    (stored_crc,) = struct.unpack_from("<I", blob, payload_end)
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    volume = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return subject_id, modality_id, volume


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def build_dataset(config: GeneratorConfig, n_pretrain: int, n_train: int, n_val: int,
                  n_test: int) -> Dict[str, List[SubjectSample]]:
    """In-memory dataset; pretrain subjects carry no mask, finetune splits do."""
    train_ids, val_ids, test_ids = make_splits(config, n_train, n_val, n_test)
    pretrain_ids = list(range(n_train + n_val + n_test,
                              n_train + n_val + n_test + n_pretrain))
    dataset: Dict[str, List[SubjectSample]] = {}
    for split, ids in (("pretrain", pretrain_ids), ("train", train_ids),
                       ("val", val_ids), ("test", test_ids)):
        samples = []
        for sid in ids:
            sample = generate_subject(config, sid)
            if split == "pretrain":
                sample = replace(sample, mask=None)
            samples.append(replace(sample, split=split))
        dataset[split] = samples
    return dataset


def write_dataset(dataset: Dict[str, List[SubjectSample]], config: GeneratorConfig,
                  out_dir) -> dict:
    """Write RVOL files plus a manifest; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split in ("pretrain", "train", "val", "test"):
        for sample in dataset.get(split, []):
            files = {}
            for mid, vol in sorted(sample.volumes.items()):
                rel = f"s{sample.subject_id:05d}_m{mid}.rvol"
                write_rvol(out / rel, sample.subject_id, mid, vol)
                files[str(mid)] = rel
            if sample.mask is not None:
                rel = f"s{sample.subject_id:05d}_mask.rvol"
                write_rvol(out / rel, sample.subject_id, MASK_MODALITY_ID,
                           sample.mask.astype(np.float32))
                files["mask"] = rel
            entries.append({"subject_id": sample.subject_id, "split": split,
                            "files": files, "has_mask": sample.mask is not None})
    manifest = {"config": config.to_dict(), "subjects": entries}
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return manifest


def load_dataset(data_dir) -> Tuple[Dict[str, List[SubjectSample]], GeneratorConfig]:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MalformedHeaderError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{root}: bad manifest ({exc})") from exc
    config = GeneratorConfig.from_dict(manifest["config"])
    catalog_size = len(config.modality_names)
    dataset: Dict[str, List[SubjectSample]] = {"pretrain": [], "train": [], "val": [], "test": []}
    for entry in manifest["subjects"]:
        volumes: Dict[int, np.ndarray] = {}
        mask = None
        for key, rel in entry["files"].items():
            if key == "mask":
                _, mid, vol = read_rvol(root / rel)
                if mid != MASK_MODALITY_ID:
                    raise MalformedHeaderError(f"{rel}: mask file with modality id {mid}")
                mask = vol.astype(np.uint8)
            else:
                _, mid, vol = read_rvol(root / rel, catalog_size=catalog_size)
                volumes[mid] = vol
        dataset.setdefault(entry["split"], []).append(
            SubjectSample(subject_id=int(entry["subject_id"]), volumes=volumes,
                          mask=mask, split=entry["split"]))
    return dataset, config
