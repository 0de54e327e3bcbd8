"""Evaluation protocol: reference construction, batched colorization and metric records."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .datagen import ImageTriple, TPSParams, tps_warp
from .inference import InferenceRequest, colorize_batch
from .injection import Thresholds
from .metrics import PSNR_CAP, embed_cosine, entanglement_score, ms_ssim, ms_ssim_scales, psnr

METRICS = ("psnr", "ms_ssim", "embed_cosine", "entanglement")
AGGREGATE_ID = "__aggregate__"


@dataclass
class EvalPair:
    id: str
    sketch: np.ndarray
    target: np.ndarray
    sketch_mask: np.ndarray
    reference: np.ndarray
    reference_mask: np.ndarray


def make_pairs(triples: Sequence[ImageTriple], tps: bool, seed: int, magnitude: float = 3.0) -> list[EvalPair]:
    """Pair each triple with a reference.

    With ``tps`` the reference is the item's own color image warped by a
    seeded random thin plate spline (the mask is warped identically).
    Otherwise references come from another item of the set via a seeded
    derangement; a single-item set pairs with itself.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    if tps:
        for tri in triples:
            params = TPSParams.random(tri.color.shape[-1], rng, magnitude=magnitude)
            ref = np.clip(tps_warp(tri.color, params), 0, 1)
            ref_mask = np.clip(tps_warp(tri.mask, params), 0, 1)
            pairs.append(EvalPair(tri.id, tri.sketch, tri.color, tri.mask, ref, ref_mask))
        return pairs
    n = len(triples)
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    for i, tri in enumerate(triples):
        other = triples[int(partner[i])]
        pairs.append(EvalPair(tri.id, tri.sketch, tri.color, tri.mask, other.color, other.mask))
    return pairs


def colorize_pairs(pairs: Sequence[EvalPair], ckpt: Checkpoint, mode: str, *, steps: int = 50,
                   guidance: float = 3.0, seed: int = 0, thresholds: Thresholds | None = None,
                   batch_size: int = 16) -> list[np.ndarray]:
    """Colorize every pair; item ``i`` uses noise seed ``seed + i``."""
    thresholds = thresholds or Thresholds()
    reqs = [
        InferenceRequest(p.sketch, p.reference, p.sketch_mask, p.reference_mask, mode=mode,
                         thresholds=thresholds, guidance=guidance, steps=steps, seed=seed + i)
        for i, p in enumerate(pairs)
    ]
    out = []
    for start in range(0, len(reqs), batch_size):
        out.extend(colorize_batch(reqs[start:start + batch_size], ckpt))
    return out


def score(metric: str, result: np.ndarray, pair: EvalPair, embedder: Callable | None = None) -> float | None:
    """One metric value; ``None`` when the entanglement masks are degenerate."""
    if metric == "psnr":
        return psnr(result, pair.target)
    if metric == "ms_ssim":
        return ms_ssim(result, pair.target)
    if metric == "embed_cosine":
        if embedder is None:
            raise ValueError("embed_cosine needs an embedder")
        return embed_cosine(result, pair.reference, embedder)
    if metric == "entanglement":
        try:
            return entanglement_score(result, pair.reference, pair.sketch_mask, pair.reference_mask)
        except ValueError:
            return None
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def evaluate(results: Sequence[np.ndarray], pairs: Sequence[EvalPair], metrics: Sequence[str],
             embedder: Callable | None = None) -> list[dict]:
    """Per-item records in item order, then one aggregate record per metric."""
    if len(results) != len(pairs):
        raise ValueError("need one result per pair")
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; expected a subset of {METRICS}")
    records = []
    values = {m: [] for m in metrics}
    for res, pair in zip(results, pairs):
        for m in metrics:
            v = score(m, res, pair, embedder)
            records.append({"id": pair.id, "metric": m, "value": v})
            if v is not None:
                values[m].append(v)
    for m in metrics:
        vs = values[m]
        mean = float(np.mean(vs)) if vs else None
        records.append({"id": AGGREGATE_ID, "metric": m, "value": mean, "n": len(vs),
                        "std": float(np.std(vs)) if vs else None})
    return records


def protocol_notes(image_size: int) -> dict:
    """Desk-scale settings that affect metric values."""
    return {"psnr_cap_db": PSNR_CAP, "ms_ssim_scales": ms_ssim_scales(image_size, image_size)}
