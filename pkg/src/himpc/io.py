"""Skeleton-sequence datasets: JSONL parsing, windowing, synthesis, splits.

On-disk format is JSON-lines, one sequence per line:
``{"seq_id": str, "identity": int|null, "view": str|null,
"frames": [[[x,y,z] x J] x L]}`` with coordinates as 64-bit decimals in
meters, UTF-8, LF line endings. Writing then parsing is the identity on
valid records.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Array = np.ndarray

SUPPORTED_J = (14, 20, 25)

# Windows derive their ids from the source record; make_split groups by the
# part before this marker so windows of one recording stay together.
WINDOW_MARK = "#w"


class DataError(ValueError):
    """Malformed or inconsistent skeleton data."""


@dataclass
class SkeletonSequence:
    """One skeleton sequence: (F, J, 3) coordinates plus metadata.

    ``identity`` and ``view`` are evaluation-time metadata; the trainer never
    sees them (its API takes bare coordinate arrays).
    """

    seq_id: str
    frames: Array
    identity: int | None = None
    view: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise DataError(f"sequence '{self.seq_id}': frames must be (F, J, 3)")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"sequence '{self.seq_id}': non-finite coordinate")
        if self.identity is not None and self.identity < 0:
            raise DataError(f"sequence '{self.seq_id}': identity must be >= 0")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def joint_count(self) -> int:
        return self.frames.shape[1]

    def group_id(self) -> str:
        """Identifier of the source recording (window suffix stripped)."""
        return self.seq_id.rsplit(WINDOW_MARK, 1)[0]


def parse_sequences(path: str | Path, expected_j: int) -> list[SkeletonSequence]:
    """Read a JSONL dataset; record order follows file order."""
    path = Path(path)
    sequences: list[SkeletonSequence] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: malformed JSON ({exc.msg})") from exc
            seq_id = record.get("seq_id")
            if not isinstance(seq_id, str):
                raise DataError(f"{path}:{line_no}: missing or non-string seq_id")
            frames = np.asarray(record.get("frames"), dtype=np.float64)
            if frames.ndim != 3 or frames.shape[2] != 3:
                raise DataError(f"{path}:{line_no}: sequence '{seq_id}' frames must be LxJx3")
            if frames.shape[1] != expected_j:
                raise DataError(
                    f"{path}:{line_no}: sequence '{seq_id}' has {frames.shape[1]} joints, "
                    f"expected {expected_j}"
                )
            if not np.all(np.isfinite(frames)):
                raise DataError(f"{path}:{line_no}: sequence '{seq_id}' has a non-finite coordinate")
            sequences.append(
                SkeletonSequence(
                    seq_id=seq_id,
                    frames=frames,
                    identity=record.get("identity"),
                    view=record.get("view"),
                )
            )
    return sequences


def write_sequences(path: str | Path, sequences: list[SkeletonSequence]) -> None:
    """Write JSONL; float repr round-trips IEEE doubles exactly."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            record = {
                "seq_id": seq.seq_id,
                "identity": seq.identity,
                "view": seq.view,
                "frames": seq.frames.tolist(),
            }
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")


def window_sequences(
    raw: list[SkeletonSequence], f: int, stride: int | None = None
) -> tuple[list[SkeletonSequence], int]:
    """Cut records into fixed-length windows; returns (windows, skipped).

    A record of length L yields floor((L-f)/stride)+1 windows (none when
    L < f, counted in the skip tally). Windows inherit identity/view and get
    a ``#w<k>`` id suffix. Default stride is f (non-overlapping).
    """
    if f < 2:
        raise ValueError("window length must be >= 2")
    stride = f if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    windows: list[SkeletonSequence] = []
    skipped = 0
    for seq in raw:
        if seq.length < f:
            skipped += 1
            continue
        count = (seq.length - f) // stride + 1
        for k in range(count):
            start = k * stride
            windows.append(
                SkeletonSequence(
                    seq_id=f"{seq.seq_id}{WINDOW_MARK}{k}",
                    frames=seq.frames[start : start + f].copy(),
                    identity=seq.identity,
                    view=seq.view,
                )
            )
    return windows, skipped


def center_frames(frames: Array) -> Array:
    """Subtract the root joint (index 0) from every joint, per frame."""
    return frames - frames[:, 0:1, :]


# ---------------------------------------------------------------------------
# Synthetic gait generator
# ---------------------------------------------------------------------------

# Neutral standing poses in meters (x lateral, y up, z walking direction),
# matching the joint orders documented in hierarchy.py.
_BASE_POSE_20 = np.array(
    [
        [0.00, 1.00, 0.00],   # hip center
        [0.00, 1.25, 0.00],   # spine
        [0.00, 1.50, 0.00],   # shoulder center
        [0.00, 1.70, 0.00],   # head
        [-0.20, 1.45, 0.00],  # L shoulder
        [-0.25, 1.20, 0.00],  # L elbow
        [-0.27, 0.95, 0.00],  # L wrist
        [-0.28, 0.87, 0.00],  # L hand
        [0.20, 1.45, 0.00],   # R shoulder
        [0.25, 1.20, 0.00],   # R elbow
        [0.27, 0.95, 0.00],   # R wrist
        [0.28, 0.87, 0.00],   # R hand
        [-0.10, 0.95, 0.00],  # L hip
        [-0.11, 0.50, 0.00],  # L knee
        [-0.12, 0.08, 0.00],  # L ankle
        [-0.12, 0.02, 0.12],  # L foot
        [0.10, 0.95, 0.00],   # R hip
        [0.11, 0.50, 0.00],   # R knee
        [0.12, 0.08, 0.00],   # R ankle
        [0.12, 0.02, 0.12],   # R foot
    ]
)

_BASE_POSE_25 = np.vstack(
    [
        _BASE_POSE_20,
        np.array(
            [
                [0.00, 1.45, 0.00],   # spine shoulder
                [-0.29, 0.83, 0.02],  # L hand tip
                [-0.26, 0.86, 0.04],  # L thumb
                [0.29, 0.83, 0.02],   # R hand tip
                [0.26, 0.86, 0.04],   # R thumb
            ]
        ),
    ]
)

_BASE_POSE_14 = np.array(
    [
        [0.00, 1.70, 0.00],   # head
        [0.00, 1.50, 0.00],   # neck
        [0.20, 1.45, 0.00],   # R shoulder
        [0.25, 1.20, 0.00],   # R elbow
        [0.27, 0.95, 0.00],   # R wrist
        [-0.20, 1.45, 0.00],  # L shoulder
        [-0.25, 1.20, 0.00],  # L elbow
        [-0.27, 0.95, 0.00],  # L wrist
        [0.10, 0.95, 0.00],   # R hip
        [0.11, 0.50, 0.00],   # R knee
        [0.12, 0.08, 0.00],   # R ankle
        [-0.10, 0.95, 0.00],  # L hip
        [-0.11, 0.50, 0.00],  # L knee
        [-0.12, 0.08, 0.00],  # L ankle
    ]
)

# Limb chains for anthropometric scaling and gait swing. Each chain scales
# about its anchor joint; swing weights grow toward distal joints. sign: +1
# swings in phase with the left leg, -1 in opposite phase, 0 static.
_BODY_PLANS: dict[int, dict] = {
    20: {
        "base": _BASE_POSE_20,
        "torso": [0, 1, 2, 3],
        "chains": [
            {"joints": [4, 5, 6, 7], "anchor": 2, "kind": "arm", "sign": -1.0,
             "swing": [0.1, 0.5, 0.9, 1.0]},
            {"joints": [8, 9, 10, 11], "anchor": 2, "kind": "arm", "sign": 1.0,
             "swing": [0.1, 0.5, 0.9, 1.0]},
            {"joints": [12, 13, 14, 15], "anchor": 0, "kind": "leg", "sign": 1.0,
             "swing": [0.1, 0.5, 0.9, 1.0]},
            {"joints": [16, 17, 18, 19], "anchor": 0, "kind": "leg", "sign": -1.0,
             "swing": [0.1, 0.5, 0.9, 1.0]},
        ],
    },
    25: {
        "base": _BASE_POSE_25,
        "torso": [0, 1, 2, 3, 20],
        "chains": [
            {"joints": [4, 5, 6, 7, 21, 22], "anchor": 2, "kind": "arm", "sign": -1.0,
             "swing": [0.1, 0.5, 0.9, 1.0, 1.05, 1.0]},
            {"joints": [8, 9, 10, 11, 23, 24], "anchor": 2, "kind": "arm", "sign": 1.0,
             "swing": [0.1, 0.5, 0.9, 1.0, 1.05, 1.0]},
            {"joints": [12, 13, 14, 15], "anchor": 0, "kind": "leg", "sign": 1.0,
             "swing": [0.1, 0.5, 0.9, 1.0]},
            {"joints": [16, 17, 18, 19], "anchor": 0, "kind": "leg", "sign": -1.0,
             "swing": [0.1, 0.5, 0.9, 1.0]},
        ],
    },
    14: {
        "base": _BASE_POSE_14,
        "torso": [0, 1],
        "chains": [
            {"joints": [2, 3, 4], "anchor": 1, "kind": "arm", "sign": 1.0,
             "swing": [0.1, 0.5, 1.0]},
            {"joints": [5, 6, 7], "anchor": 1, "kind": "arm", "sign": -1.0,
             "swing": [0.1, 0.5, 1.0]},
            {"joints": [8, 9, 10], "anchor": 1, "kind": "leg", "sign": -1.0,
             "swing": [0.1, 0.6, 1.0]},
            {"joints": [11, 12, 13], "anchor": 1, "kind": "leg", "sign": 1.0,
             "swing": [0.1, 0.6, 1.0]},
        ],
    },
}

_FPS = 10.0


def generate_synthetic(
    n_identities: int,
    seqs_per_id: int,
    f: int,
    j: int,
    noise_sigma: float,
    seed: int,
) -> list[SkeletonSequence]:
    """Deterministic walking-skeleton corpus for desk-scale verification.

    Each identity gets fixed anthropometry (torso/arm/leg scale factors plus
    gait amplitude and frequency drawn once from the seeded RNG); each of its
    sequences differs by a gait phase offset. Per-frame Gaussian jitter with
    std ``noise_sigma`` is added last, so ``noise_sigma=0`` sequences of one
    identity differ only through the phase.
    """
    if n_identities < 2:
        raise ValueError("need at least two identities")
    if j not in _BODY_PLANS:
        raise ValueError(f"unsupported joint count J={j}; choose from {sorted(_BODY_PLANS)}")
    plan = _BODY_PLANS[j]
    base: Array = plan["base"]
    rng = np.random.default_rng(seed)
    sequences: list[SkeletonSequence] = []
    for identity in range(n_identities):
        torso_scale = rng.uniform(0.8, 1.2)
        arm_scale = rng.uniform(0.8, 1.2)
        leg_scale = rng.uniform(0.8, 1.2)
        amplitude = rng.uniform(0.03, 0.08)
        freq_hz = rng.uniform(1.3, 1.7)
        # Static posture signature on top of the chain scales: one offset per
        # chain (it survives centroid averaging at coarser levels) plus small
        # per-joint jitter, so identities stay separable at every level even
        # when scale draws land close.
        chain_offsets = rng.normal(0.0, 0.02, size=(len(plan["chains"]), 3))
        posture = rng.normal(0.0, 0.01, size=base.shape)
        shape = base.copy()
        root = base[plan["torso"][0]]
        shape[plan["torso"]] = root + torso_scale * (base[plan["torso"]] - root)
        for ci, chain in enumerate(plan["chains"]):
            scale = arm_scale if chain["kind"] == "arm" else leg_scale
            anchor = shape[chain["anchor"]]
            shape[chain["joints"]] = anchor + scale * (base[chain["joints"]] - base[chain["anchor"]])
            shape[chain["joints"]] += chain_offsets[ci]
        shape += posture
        for rep in range(seqs_per_id):
            phase0 = rng.uniform(0.0, 2.0 * np.pi)
            frames = np.repeat(shape[None, :, :], f, axis=0)
            t = np.arange(f) / _FPS
            phase = 2.0 * np.pi * freq_hz * t + phase0
            for chain in plan["chains"]:
                swing = amplitude * chain["sign"] * np.outer(np.sin(phase), chain["swing"])
                frames[:, chain["joints"], 2] += swing
            frames[:, :, 1] += 0.02 * amplitude * np.sin(2.0 * phase)[:, None]
            if noise_sigma > 0:
                frames += rng.normal(0.0, noise_sigma, size=frames.shape)
            sequences.append(
                SkeletonSequence(
                    seq_id=f"id{identity:03d}-s{rep:02d}",
                    frames=frames,
                    identity=identity,
                    view=None,
                )
            )
    return sequences


# ---------------------------------------------------------------------------
# Probe / gallery / train split
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    """Training pool plus labelled probe and gallery sets."""

    train: list[SkeletonSequence] = field(default_factory=list)
    probe: list[SkeletonSequence] = field(default_factory=list)
    gallery: list[SkeletonSequence] = field(default_factory=list)


def make_split(
    sequences: list[SkeletonSequence], probe_fraction: float, seed: int
) -> DatasetSplit:
    """Per identity: some recordings to probe, rest split gallery/train.

    Recordings (window groups sharing a source id) are shuffled per identity
    with the seeded RNG; max(1, floor(probe_fraction * n_groups)) groups go
    to probe and the remainder alternates gallery-first between gallery and
    train. Every identity therefore appears in both probe and gallery.
    """
    if not 0 <= probe_fraction < 1:
        raise ValueError("probe_fraction must be in [0, 1)")
    by_identity: dict[int, dict[str, list[SkeletonSequence]]] = defaultdict(dict)
    for seq in sequences:
        if seq.identity is None:
            raise DataError(f"sequence '{seq.seq_id}' has no identity; cannot split")
        by_identity[seq.identity].setdefault(seq.group_id(), []).append(seq)
    rng = np.random.default_rng(seed)
    split = DatasetSplit()
    for identity in sorted(by_identity):
        groups = sorted(by_identity[identity])
        if len(groups) < 3:
            raise DataError(
                f"identity {identity} has only {len(groups)} recordings; need >= 3 "
                "(one each for probe, gallery, and train)"
            )
        order = list(rng.permutation(len(groups)))
        n_probe = max(1, int(probe_fraction * len(groups)))
        n_probe = min(n_probe, len(groups) - 2)
        for rank, group_idx in enumerate(order):
            bucket = split.probe if rank < n_probe else (
                split.gallery if (rank - n_probe) % 2 == 0 else split.train
            )
            bucket.extend(by_identity[identity][groups[group_idx]])
    return split
