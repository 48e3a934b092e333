"""Command-line pipeline: gen-data, pretrain, finetune, eval, compare,
reconstruct. Every command is deterministic given (config, seed) and echoes
its fully resolved configuration into the output directory as config.json.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import (GeneratorConfig, SubjectSample, build_dataset, load_dataset,
                   write_dataset)
from .errors import (BoundsError, ConfigurationError, ContractError,
                     VarmaeError)
from .heads import AdaptiveUnetr, ConcatUnetr
from .masking import assemble_unmasked, mix_seed, sample_mask
from .model import MaskedAutoencoder, ViTConfig
from .stats import (PairedScores, evaluate_suite, format_results_table,
                    wilcoxon_signed_rank)
from .tensor import no_grad
from .tokenizer import patchify, unpatchify
from .training import (Checkpoint, FinetuneConfig, PretrainConfig,
                       load_checkpoint, run_finetune, run_pretrain,
                       save_checkpoint, set_named_parameters)

ALPHA = 0.05


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise _UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise _UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def _echo_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _metrics_sink(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("", encoding="utf-8")

    def sink(entry: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    return sink


def _resolve_model_config(cfg: dict, data_config: GeneratorConfig) -> ViTConfig:
    section = dict(cfg.get("model", {}))
    section.setdefault("volume_shape", list(data_config.volume_shape))
    try:
        return ViTConfig.from_dict(section)
    except TypeError as exc:
        raise _UsageError(f"bad model config: {exc}") from exc


def _model_from_checkpoint(ckpt: Checkpoint, seed: int = 0):
    kind = ckpt.config.get("kind")
    vit = ViTConfig.from_dict(ckpt.config["model"])
    names = ckpt.catalog
    if kind == "mae":
        model = MaskedAutoencoder(vit, names, seed=seed)
    elif kind == "adaptive":
        model = AdaptiveUnetr(vit, names, seed=seed)
    elif kind == "concat":
        model = ConcatUnetr(vit, names, seed=seed)
    else:
        raise ContractError(f"checkpoint has unknown model kind {kind!r}")
    set_named_parameters(model, ckpt.params)
    return model


def _scale_to_u8(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary (P5) PGM."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    data_section = dict(cfg.get("data", {}))
    data_section["seed"] = seed
    data_config = GeneratorConfig.from_dict(data_section)
    counts = dict(cfg.get("counts", {}))
    for key, flag in (("pretrain", args.n_pretrain), ("train", args.n_train),
                      ("val", args.n_val), ("test", args.n_test)):
        if flag is not None:
            counts[key] = flag
    counts = {"pretrain": int(counts.get("pretrain", 64)),
              "train": int(counts.get("train", 32)),
              "val": int(counts.get("val", 8)),
              "test": int(counts.get("test", 8))}

    dataset = build_dataset(data_config, counts["pretrain"], counts["train"],
                            counts["val"], counts["test"])
    out = Path(args.out)
    write_dataset(dataset, data_config, out)
    _echo_config(out, {"command": "gen-data", "seed": seed,
                       "data": data_config.to_dict(), "counts": counts})
    total = sum(len(v) for v in dataset.values())
    print(f"wrote {total} subjects to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    dataset, data_config = load_dataset(args.data)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    vit = _resolve_model_config(cfg, data_config)
    section = dict(cfg.get("pretrain", {}))
    if args.epochs is not None:
        section["epochs"] = args.epochs
    if args.lr is not None:
        section["base_lr"] = args.lr
    if args.masking_ratio is not None:
        section["masking_ratio"] = args.masking_ratio
    try:
        config = PretrainConfig(model=vit, seed=seed, **section)
    except TypeError as exc:
        raise _UsageError(f"bad pretrain config: {exc}") from exc

    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, {"command": "pretrain", "data": str(args.data),
                       "config": config.to_dict()})
    sink = _metrics_sink(out / "metrics.jsonl")
    _, ckpt = run_pretrain(dataset["pretrain"], config, data_config.modality_names,
                           resume=resume, sink=sink)
    save_checkpoint(out / "checkpoint.rckp", ckpt)
    final = ckpt.metrics[-1]["loss"] if ckpt.metrics else float("nan")
    print(f"pretrain done: {config.epochs} epochs, final loss {final:.6f}")
    print(f"checkpoint: {out / 'checkpoint.rckp'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    dataset, data_config = load_dataset(args.data)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    vit = _resolve_model_config(cfg, data_config)
    section = dict(cfg.get("finetune", {}))
    section["head"] = args.head
    if args.epochs is not None:
        section["epochs"] = args.epochs
    if args.lr is not None:
        section["base_lr"] = args.lr
    try:
        config = FinetuneConfig(model=vit, seed=seed, **section)
    except TypeError as exc:
        raise _UsageError(f"bad finetune config: {exc}") from exc

    init = None if args.init == "random" else load_checkpoint(args.init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, {"command": "finetune", "data": str(args.data),
                       "init": args.init, "config": config.to_dict()})
    sink = _metrics_sink(out / "metrics.jsonl")
    _, ckpt, report = run_finetune(dataset, config, data_config.modality_names,
                                   init=init, sink=sink)
    save_checkpoint(out / "checkpoint.rckp", ckpt)
    if report is not None:
        (out / "transfer_report.json").write_text(
            json.dumps({"transferred": report.transferred, "fresh": report.fresh,
                        "dropped": report.dropped}, indent=1) + "\n", encoding="utf-8")
    sel = ckpt.config.get("selection", {})
    print(f"finetune done: head={config.head}, best val dice "
          f"{sel.get('best_val_dice')} at epoch {sel.get('best_epoch')}")
    print(f"checkpoint: {out / 'checkpoint.rckp'}")
    return 0


def cmd_eval(args) -> int:
    dataset, _ = load_dataset(args.data)
    models: Dict[str, object] = {}
    for path in args.ckpt:
        ckpt = load_checkpoint(path)
        name = Path(path).parent.name or Path(path).stem
        if name in models:
            name = f"{name}#{len(models)}"
        models[name] = _model_from_checkpoint(ckpt)
    results = evaluate_suite(models, dataset["test"], drop_modality=args.drop_modality)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, {"command": "eval", "data": str(args.data),
                       "checkpoints": [str(p) for p in args.ckpt],
                       "drop_modality": args.drop_modality})
    (out / "results.json").write_text(
        json.dumps(results, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    table = format_results_table(results)
    (out / "results.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def _single_model_scores(path: str) -> tuple:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    names = list(blob.get("models", {}))
    if len(names) != 1:
        raise _UsageError(
            f"{path} must contain exactly one model's results, found {names}")
    rows = blob["models"][names[0]]["per_subject"]
    scores = {int(r["subject_id"]): float(r["dice"]) for r in rows}
    return names[0], scores


def cmd_compare(args) -> int:
    name_a, scores_a = _single_model_scores(args.results[0])
    name_b, scores_b = _single_model_scores(args.results[1])
    if set(scores_a) != set(scores_b):
        raise ContractError("result files cover different subject ids")
    ids = sorted(scores_a)
    pairs = PairedScores(subject_ids=ids,
                         a=[scores_a[i] for i in ids],
                         b=[scores_b[i] for i in ids])
    res = wilcoxon_signed_rank(pairs)
    verdict = ("degenerate (all differences zero)" if res.degenerate
               else "significant" if res.p_value < ALPHA else "not significant")
    report = {"model_a": name_a, "model_b": name_b, "n_pairs": len(ids),
              "n_nonzero": res.n, "statistic": res.statistic,
              "p_value": res.p_value, "method": res.method,
              "alpha": ALPHA, "verdict": verdict,
              "mean_a": float(np.mean(pairs.a)), "mean_b": float(np.mean(pairs.b))}
    print(f"Wilcoxon signed-rank: {name_a} vs {name_b}")
    print(f"  n={len(ids)} (nonzero diffs {res.n}), W={res.statistic}, "
          f"two-sided p={res.p_value:.6g} [{res.method}]")
    print(f"  mean dice: {report['mean_a']:.4f} vs {report['mean_b']:.4f}")
    print(f"  verdict at alpha={ALPHA}: {verdict}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(out, {"command": "compare",
                           "results": [str(p) for p in args.results]})
        (out / "compare.json").write_text(
            json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return 0


def _parse_slice(spec: str, volume_shape) -> tuple:
    try:
        axis_s, index_s = spec.split(",")
        axis, index = int(axis_s), int(index_s)
    except ValueError:
        raise _UsageError(f"--slice must be 'axis,index', got {spec!r}") from None
    if not 0 <= axis <= 2:
        raise _UsageError(f"slice axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < volume_shape[axis]:
        raise BoundsError(
            f"slice index {index} out of range for axis {axis} extent {volume_shape[axis]}")
    return axis, index


def _take_slice(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    return np.take(volume, index, axis=axis)


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.config.get("kind") != "mae":
        raise ContractError("reconstruct needs a pretraining (mae) checkpoint")
    model = _model_from_checkpoint(ckpt)
    dataset, _ = load_dataset(args.data)
    subject = None
    for split in dataset.values():
        for sample in split:
            if sample.subject_id == args.subject:
                subject = sample
    if subject is None:
        raise ContractError(f"subject {args.subject} not found in {args.data}")

    ratio = args.masking_ratio
    if ratio is None:
        ratio = ckpt.config.get("train", {}).get("masking_ratio", 0.7)
    axis, index = _parse_slice(args.slice, model.config.volume_shape)

    volumes = {mid: np.asarray(v, dtype=np.float64) for mid, v in subject.volumes.items()}
    p = model.config.num_patches
    k = model.config.patch_size
    with no_grad():
        tokens = model.tokenize_volumes(volumes)
        plans = {mid: sample_mask(p, ratio, mix_seed(args.mask_seed, mid))
                 for mid in tokens}
        embeddings = {mid: model.descriptor(mid).embedding for mid in tokens}
        seq, index_map = assemble_unmasked(tokens, plans, model.enc_pos, embeddings)
        encoded = model.encode(seq)
        targets = {mid: patchify(volumes[mid], k) for mid in tokens}
        output = model.decode(encoded, plans, index_map, targets)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, {"command": "reconstruct", "ckpt": str(args.ckpt),
                       "subject": args.subject, "slice": args.slice,
                       "masking_ratio": ratio, "mask_seed": args.mask_seed})
    stats = {}
    grid = model.config.grid
    for mid in sorted(volumes):
        original = volumes[mid]
        block_mask = np.kron(plans[mid].mask.reshape(grid),
                             np.ones((k, k, k), dtype=np.uint8)).astype(bool)
        recon = unpatchify(output.predictions[mid].data, grid, k)

        img_orig = _scale_to_u8(_take_slice(original, axis, index))
        img_masked = img_orig.copy()
        img_masked[_take_slice(block_mask, axis, index)] = 0
        img_recon = _scale_to_u8(_take_slice(recon, axis, index))
        write_pgm(out / f"m{mid}_original.pgm", img_orig)
        write_pgm(out / f"m{mid}_masked.pgm", img_masked)
        write_pgm(out / f"m{mid}_reconstructed.pgm", img_recon)

        if block_mask.any():
            masked_vals = original[block_mask]
            visible_mean = (float(original[~block_mask].mean())
                            if (~block_mask).any() else float(original.mean()))
            stats[str(mid)] = {
                "masked_mse": float(np.mean((recon[block_mask] - masked_vals) ** 2)),
                "mean_baseline_mse": float(np.mean((visible_mean - masked_vals) ** 2)),
            }
    (out / "reconstruction_stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"wrote slice images for {len(volumes)} modalities to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varmae",
        description="variable-modality 3D masked-autoencoder pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-pretrain", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--masking-ratio", type=float)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="dice finetuning of a segmentation head")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--init", required=True,
                   help="'random' or path to a pretraining checkpoint")
    p.add_argument("--head", required=True, choices=("adaptive", "concat"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="mean test Dice for one or more checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--drop-modality", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="Wilcoxon signed-rank test on two result files")
    p.add_argument("--results", nargs=2, required=True, metavar=("A.json", "B.json"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reconstruct", help="dump original/masked/reconstructed slices")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--slice", default="0,8", help="axis,index (default 0,8)")
    p.add_argument("--out", required=True)
    p.add_argument("--masking-ratio", type=float)
    p.add_argument("--mask-seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VarmaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
