"""Coarse-to-fine skeleton representations via body-partition centroids.

Level 1 keeps every joint (n = J), level 2 groups joints into 10 body
components, level 3 into 5 limb regions. Each group's position is the
arithmetic mean of its member joints, so level 1 is exactly the flattened
input. Built-in tables cover the common sensor layouts (J = 14, 20, 25);
custom tables can be registered or loaded from JSON.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class PartitionTable:
    """Disjoint joint-index groups covering {0..J-1} for one level."""

    level: int
    groups: tuple[tuple[int, ...], ...]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def joint_count(self) -> int:
        return sum(len(g) for g in self.groups)


def _validate_tables(j: int, levels: list[list[list[int]]]) -> None:
    if len(levels) != 3:
        raise ValueError("a partition set must define exactly three levels")
    full = frozenset(range(j))
    for depth, groups in enumerate(levels, start=1):
        flat: list[int] = []
        for group in groups:
            if not group:
                raise ValueError(f"level {depth} contains an empty group")
            flat.extend(group)
        if len(flat) != len(set(flat)):
            raise ValueError(f"level {depth} groups overlap")
        if set(flat) != full:
            raise ValueError(f"level {depth} groups do not cover all {j} joints")
    if len(levels[0]) != j:
        raise ValueError(f"level 1 must have {j} singleton groups")


def _make_tables(j: int, levels: list[list[list[int]]]) -> tuple[PartitionTable, ...]:
    _validate_tables(j, levels)
    return tuple(
        PartitionTable(level=d, groups=tuple(tuple(g) for g in groups))
        for d, groups in enumerate(levels, start=1)
    )


def _singletons(j: int) -> list[list[int]]:
    return [[i] for i in range(j)]


# Joint orders follow the usual sensor conventions:
#   J=20: hip_center, spine, shoulder_center, head, then L arm (4-7),
#         R arm (8-11), L leg (12-15), R leg (16-19).
#   J=25: base_spine, mid_spine, neck, head, L arm (4-7), R arm (8-11),
#         L leg (12-15), R leg (16-19), spine_shoulder (20),
#         L hand tip/thumb (21-22), R hand tip/thumb (23-24).
#   J=14: head, neck, R arm (2-4), L arm (5-7), R leg (8-10), L leg (11-13).
# Component level: head, trunk, upper arms, forearms+hands, thighs,
# shanks+feet (10 groups); limb level: head+torso plus the four limbs.
_BUILTIN: dict[int, list[list[list[int]]]] = {
    20: [
        _singletons(20),
        [
            [2, 3], [0, 1],
            [4, 5], [6, 7],
            [8, 9], [10, 11],
            [12, 13], [14, 15],
            [16, 17], [18, 19],
        ],
        [
            [0, 1, 2, 3],
            [4, 5, 6, 7],
            [8, 9, 10, 11],
            [12, 13, 14, 15],
            [16, 17, 18, 19],
        ],
    ],
    25: [
        _singletons(25),
        [
            [2, 3], [0, 1, 20],
            [4, 5], [6, 7, 21, 22],
            [8, 9], [10, 11, 23, 24],
            [12, 13], [14, 15],
            [16, 17], [18, 19],
        ],
        [
            [0, 1, 2, 3, 20],
            [4, 5, 6, 7, 21, 22],
            [8, 9, 10, 11, 23, 24],
            [12, 13, 14, 15],
            [16, 17, 18, 19],
        ],
    ],
    14: [
        _singletons(14),
        [
            [0], [1],
            [2, 3], [4],
            [5, 6], [7],
            [8, 9], [10],
            [11, 12], [13],
        ],
        [
            [0, 1],
            [2, 3, 4],
            [5, 6, 7],
            [8, 9, 10],
            [11, 12, 13],
        ],
    ],
}

_REGISTRY: dict[int, tuple[PartitionTable, ...]] = {}


def builtin_partitions(j: int) -> tuple[PartitionTable, PartitionTable, PartitionTable]:
    """The three tables for a supported joint count (built-in or registered)."""
    if j in _REGISTRY:
        return _REGISTRY[j]
    if j not in _BUILTIN:
        raise ValueError(
            f"unsupported joint count J={j}; built-ins cover {sorted(_BUILTIN)}, "
            "register a custom table for other layouts"
        )
    return _make_tables(j, _BUILTIN[j])


def register_partitions(j: int, levels: list[list[list[int]]]) -> None:
    """Register custom three-level tables for joint count ``j``."""
    _REGISTRY[j] = _make_tables(j, levels)


def load_partitions(path: str | Path) -> tuple[PartitionTable, ...]:
    """Load tables from JSON {"J": int, "levels": [[[idx,...],...] x3]}."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return _make_tables(int(payload["J"]), payload["levels"])


def save_partitions(path: str | Path, j: int, tables: tuple[PartitionTable, ...]) -> None:
    payload = {"J": j, "levels": [[list(g) for g in t.groups] for t in tables]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


@dataclass
class HierarchicalSequence:
    """The per-level (F, 3*n_l) representations of one sequence."""

    seq_id: str
    level_reps: list[Array]


def build_hierarchy(frames: Array, tables: tuple[PartitionTable, ...], seq_id: str = "") -> HierarchicalSequence:
    """Group-centroid representations of a (F, J, 3) frame array.

    For each frame and each group the output 3-vector is the mean of the
    member joints; outputs are flattened per frame in table group order.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise ValueError("frames must have shape (F, J, 3)")
    j = frames.shape[1]
    for table in tables:
        if table.joint_count() != j:
            raise ValueError(
                f"partition table for level {table.level} covers {table.joint_count()} "
                f"joints but the sequence has {j}"
            )
    reps = []
    for table in tables:
        cols = [frames[:, group, :].mean(axis=1) for group in table.groups]
        reps.append(np.stack(cols, axis=1).reshape(frames.shape[0], 3 * table.n_groups))
    return HierarchicalSequence(seq_id=seq_id, level_reps=reps)


def build_hierarchy_batch(batch: Array, tables: tuple[PartitionTable, ...]) -> list[Array]:
    """Vectorized build_hierarchy for a (N, F, J, 3) stack; returns per-level (N, F, 3*n_l)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise ValueError("batch must have shape (N, F, J, 3)")
    n, f = batch.shape[:2]
    reps = []
    for table in tables:
        cols = [batch[:, :, group, :].mean(axis=2) for group in table.groups]
        reps.append(np.stack(cols, axis=2).reshape(n, f, 3 * table.n_groups))
    return reps
