"""Dice metric, two-sided Wilcoxon signed-rank test, and the
missing-modality evaluation protocol over a test split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

EXACT_N_MAX = 20  # exact sign-assignment distribution up to here, normal approx beyond


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|) on binary volumes; both empty counts as 1.0."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"dice_score extent mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


@dataclass
class PairedScores:
    """Per-subject score pairs for two models, ids aligned."""

    subject_ids: List[int]
    a: List[float]
    b: List[float]

    def __post_init__(self):
        if not (len(self.subject_ids) == len(self.a) == len(self.b)):
            raise ContractError("paired scores need aligned ids and equal lengths")


@dataclass
class WilcoxonResult:
    statistic: float        # W = min(W+, W-)
    p_value: float          # two-sided
    n: int                  # pairs used after discarding zero differences
    method: str             # "exact" | "normal"
    degenerate: bool = False


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_v = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_two_sided(ranks: np.ndarray, w_small: float) -> float:
    # Distribution of W+ over all 2^n sign assignments. Midranks step in
    # halves, so work with doubled (integer) ranks; counts stay <= 2^n.
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts += shifted
    w2 = int(round(2.0 * w_small))
    tail = counts[:w2 + 1].sum() / 2.0 ** ranks.size
    return min(1.0, 2.0 * tail)


def _normal_two_sided(ranks: np.ndarray, w_small: float) -> float:
    n = ranks.size
    mu = n * (n + 1) / 4.0
    tie_term = 0.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    for t in tie_counts:
        tie_term += t ** 3 - t
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if sigma2 <= 0:
        return 1.0
    z = (w_small - mu + 0.5) / math.sqrt(sigma2)  # continuity correction toward the mean
    phi = 0.5 * math.erfc(-z / math.sqrt(2.0))
    return min(1.0, 2.0 * phi)


def wilcoxon_signed_rank(pairs: PairedScores) -> WilcoxonResult:
    """Two-sided paired test on per-subject differences with midrank ties.

    Exact tail by enumerating the sign-assignment distribution for n <= 20;
    tie-corrected, continuity-corrected normal approximation above.
    """
    d = np.asarray(pairs.a, dtype=np.float64) - np.asarray(pairs.b, dtype=np.float64)
    d = d[d != 0.0]
    if d.size == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n=0,
                              method="degenerate", degenerate=True)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if d.size <= EXACT_N_MAX:
        return WilcoxonResult(statistic=w, p_value=_exact_two_sided(ranks, w),
                              n=int(d.size), method="exact")
    return WilcoxonResult(statistic=w, p_value=_normal_two_sided(ranks, w),
                          n=int(d.size), method="normal")


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------


def _catalog_names(model) -> List[str]:
    if hasattr(model, "catalog"):
        return [d.name for d in model.catalog]
    return list(model.modality_names)


def evaluate_suite(models: Dict[str, object], subjects: Sequence,
                   drop_modality: Optional[int] = None) -> dict:
    """Per-subject Dice plus per-model means, optionally with one modality
    removed from every subject before inference."""
    catalogs = {name: tuple(_catalog_names(m)) for name, m in models.items()}
    if len(set(catalogs.values())) > 1:
        raise ContractError(f"models disagree on the modality catalog: {catalogs}")
    results = {"drop_modality": drop_modality, "models": {}}
    for name, model in models.items():
        rows = []
        for subject in subjects:
            if subject.mask is None:
                raise ContractError(
                    f"subject {subject.subject_id} has no ground-truth mask")
            volumes = {mid: np.asarray(v, dtype=np.float64)
                       for mid, v in subject.volumes.items()}
            if drop_modality is not None:
                volumes.pop(int(drop_modality), None)
                if not volumes:
                    raise ContractError(
                        f"dropping modality {drop_modality} leaves subject "
                        f"{subject.subject_id} with no volumes")
            pred = model.predict(volumes)
            rows.append({"subject_id": int(subject.subject_id),
                         "dice": dice_score(pred.binary, subject.mask)})
        mean = float(np.mean([r["dice"] for r in rows]))
        results["models"][name] = {"mean_dice": mean, "per_subject": rows}
    return results


def format_results_table(results: dict) -> str:
    """Aligned plain-text table of per-model mean Dice."""
    names = list(results["models"])
    width = max([len("Model")] + [len(n) for n in names]) + 2
    lines = []
    drop = results.get("drop_modality")
    if drop is not None:
        lines.append(f"(modality {drop} dropped from every subject)")
    lines.append(f"{'Model':<{width}}Mean Dice")
    lines.append(f"{'-----':<{width}}---------")
    for name in names:
        lines.append(f"{name:<{width}}{results['models'][name]['mean_dice']:.4f}")
    return "\n".join(lines)
