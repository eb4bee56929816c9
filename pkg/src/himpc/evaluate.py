"""Probe/gallery matching: final embeddings, CMC curve, Rank-k, mAP.

The final representation concatenates, per level, the mean over heads of the
transformed sequence instance. Matching ranks the gallery by ascending
Euclidean distance; distance ties break by gallery index so every metric is
deterministic.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .hierarchy import PartitionTable, build_hierarchy_batch, builtin_partitions
from .nn import ModelParams, mlp_forward, wrap_params

Array = np.ndarray


def build_msmr_batch(
    params: ModelParams,
    coords: Array,
    tables: tuple[PartitionTable, ...] | None = None,
    center_root: bool = False,
) -> Array:
    """Embeddings for a (N, F, J, 3) stack; (N, n_levels * h).

    Pipeline per level: partition centroids -> encoder -> temporal mean ->
    each head's transform -> mean over heads; levels concatenate.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 4 or coords.shape[3] != 3:
        raise ValueError("coords must have shape (N, F, J, 3)")
    j = coords.shape[2]
    all_tables = tables or builtin_partitions(j)
    use_tables = all_tables[: params.n_levels]
    expected = tuple(3 * t.n_groups for t in use_tables)
    if expected != params.input_dims:
        raise ValueError(
            f"joint count {j} yields level dims {expected} but the model expects "
            f"{params.input_dims}"
        )
    if center_root:
        coords = coords - coords[:, :, 0:1, :]
    reps = build_hierarchy_batch(coords, use_tables)
    tensors = wrap_params(params, trainable=set())
    blocks = []
    for k in range(params.n_levels):
        feats = mlp_forward(tensors, params, k + 1, ad.constant(reps[k])).data
        instances = feats.mean(axis=1)
        head_sum = np.zeros_like(instances)
        for m in range(params.m_heads):
            head_sum += instances @ params.head(k + 1, m).T
        blocks.append(head_sum / params.m_heads)
    return np.concatenate(blocks, axis=1)


def build_msmr(
    params: ModelParams,
    frames: Array,
    tables: tuple[PartitionTable, ...] | None = None,
    center_root: bool = False,
) -> Array:
    """Embedding of a single (F, J, 3) sequence."""
    return build_msmr_batch(params, np.asarray(frames)[None], tables, center_root)[0]


@dataclass
class EvalReport:
    """CMC curve, Rank-1/5/10, mAP, and the per-probe match table."""

    rank_curve: Array
    r1: float
    r5: float
    r10: float
    mean_ap: float
    matches: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "r1": self.r1,
            "r5": self.r5,
            "r10": self.r10,
            "map": self.mean_ap,
            "curve": [float(v) for v in self.rank_curve],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_cmc_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "rate"])
            for rank, rate in enumerate(self.rank_curve, start=1):
                writer.writerow([rank, repr(float(rate))])


def match(
    probe_vecs: Array,
    probe_ids: Array,
    gallery_vecs: Array,
    gallery_ids: Array,
) -> EvalReport:
    """Rank the gallery per probe and score CMC/Rank-k/mAP.

    Rank-k counts probes whose top-k contains a correct identity; average
    precision per probe is the mean of precision@rank over all correct
    gallery items; mAP averages over probes.
    """
    probe_vecs = np.asarray(probe_vecs, dtype=np.float64)
    gallery_vecs = np.asarray(gallery_vecs, dtype=np.float64)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if probe_vecs.ndim != 2 or gallery_vecs.ndim != 2 or probe_vecs.shape[0] == 0 or gallery_vecs.shape[0] == 0:
        raise ValueError("probe and gallery must be non-empty (N, D) matrices")
    missing = set(probe_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ValueError(f"gallery lacks probe identities: {sorted(missing)}")
    n_probe, n_gallery = probe_vecs.shape[0], gallery_vecs.shape[0]
    curve_sum = np.zeros(n_gallery)
    ap_sum = 0.0
    matches = []
    gallery_index = np.arange(n_gallery)
    for p in range(n_probe):
        dists = np.linalg.norm(gallery_vecs - probe_vecs[p], axis=1)
        order = np.lexsort((gallery_index, dists))
        correct = (gallery_ids[order] == probe_ids[p]).astype(np.float64)
        cmc = np.minimum(np.cumsum(correct), 1.0)
        curve_sum += cmc
        hits = np.cumsum(correct)
        precision_at = hits / (gallery_index + 1.0)
        ap = float((precision_at * correct).sum() / correct.sum())
        ap_sum += ap
        first = int(np.argmax(correct)) if correct.any() else -1
        matches.append(
            {
                "probe_id": int(probe_ids[p]),
                "nearest_gallery": int(order[0]),
                "nearest_id": int(gallery_ids[order[0]]),
                "correct_rank": first + 1,
                "ap": ap,
            }
        )
    curve = curve_sum / n_probe

    def rank_at(k: int) -> float:
        return float(curve[min(k, n_gallery) - 1])

    return EvalReport(
        rank_curve=curve,
        r1=rank_at(1),
        r5=rank_at(5),
        r10=rank_at(10),
        mean_ap=ap_sum / n_probe,
        matches=matches,
    )
