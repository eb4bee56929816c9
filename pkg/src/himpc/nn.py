"""Model parameters, MLP encoders, Adam, gradient checking, checkpoints.

Each representation level has its own one-hidden-layer MLP encoder mapping a
flattened frame vector (length = input dim of that level) to an embedding of
size ``h``, plus ``m_heads`` learnable square transformation heads. All
parameters live in one flat name->array dict so the optimizer, checkpoints,
and finite-difference probes can treat them uniformly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Array = np.ndarray

CHECKPOINT_MAGIC = b"HIMPC-CKPT-v1\n"


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    """All learnable arrays, keyed by structured names.

    ``input_dims[k]`` is the flattened frame length of level ``k`` (3x the
    number of body partitions). Encoder names: ``enc{k}.w_in`` (h x d),
    ``enc{k}.b_in`` (h), ``enc{k}.w_out`` (h x h), ``enc{k}.b_out`` (h).
    Head names: ``head{k}.{m}`` (h x h); with ``heterogeneous`` a second
    prototype-side set ``phead{k}.{m}`` exists, otherwise one matrix serves
    both sides (homogeneous mapping).
    """

    input_dims: tuple[int, ...]
    h: int
    m_heads: int
    heterogeneous: bool = False
    arrays: dict[str, Array] = field(default_factory=dict)

    @property
    def n_levels(self) -> int:
        return len(self.input_dims)

    def encoder_names(self, level: int) -> tuple[str, str, str, str]:
        return (
            f"enc{level}.w_in",
            f"enc{level}.b_in",
            f"enc{level}.w_out",
            f"enc{level}.b_out",
        )

    def head_name(self, level: int, m: int, prototype_side: bool = False) -> str:
        if prototype_side and self.heterogeneous:
            return f"phead{level}.{m}"
        return f"head{level}.{m}"

    def head(self, level: int, m: int, prototype_side: bool = False) -> Array:
        return self.arrays[self.head_name(level, m, prototype_side)]

    def copy(self) -> "ModelParams":
        return ModelParams(
            input_dims=self.input_dims,
            h=self.h,
            m_heads=self.m_heads,
            heterogeneous=self.heterogeneous,
            arrays={k: v.copy() for k, v in self.arrays.items()},
        )


def init_params(
    input_dims: tuple[int, ...],
    h: int,
    m_heads: int,
    rng: np.random.Generator,
    heterogeneous: bool = False,
    identity_heads: bool = False,
) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) init for encoders and heads.

    ``identity_heads`` pins every head to the identity matrix (used by the
    plain prototype-contrast ablation, where heads are not trained).
    """
    params = ModelParams(tuple(input_dims), h, m_heads, heterogeneous)

    def uniform(shape: tuple[int, ...], fan_in: int) -> Array:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    for level, dim in enumerate(params.input_dims, start=1):
        w_in, b_in, w_out, b_out = params.encoder_names(level)
        params.arrays[w_in] = uniform((h, dim), dim)
        params.arrays[b_in] = uniform((h,), dim)
        params.arrays[w_out] = uniform((h, h), h)
        params.arrays[b_out] = uniform((h,), h)
        for m in range(m_heads):
            head = np.eye(h) if identity_heads else uniform((h, h), h)
            params.arrays[f"head{level}.{m}"] = head
            if heterogeneous:
                phead = np.eye(h) if identity_heads else uniform((h, h), h)
                params.arrays[f"phead{level}.{m}"] = phead
    return params


def wrap_params(
    params: ModelParams, trainable: set[str] | None = None
) -> dict[str, Tensor]:
    """Lift arrays onto the tape; ``trainable=None`` makes every array a leaf."""
    out: dict[str, Tensor] = {}
    for name, arr in params.arrays.items():
        requires = True if trainable is None else name in trainable
        out[name] = Tensor(arr, requires_grad=requires)
    return out


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def mlp_forward(tensors: dict[str, Tensor], params: ModelParams, level: int, x: Tensor) -> Tensor:
    """One-hidden-layer MLP: linear output on top of a ReLU hidden layer."""
    w_in, b_in, w_out, b_out = (tensors[n] for n in params.encoder_names(level))
    hidden = ad.relu(ad.matmul(x, ad.transpose(w_in)) + b_in)
    return ad.matmul(hidden, ad.transpose(w_out)) + b_out


def encode_frame(params: ModelParams, level: int, frame_rep: Array) -> Array:
    """Encode a single flattened frame vector to an h-vector."""
    frame_rep = np.asarray(frame_rep, dtype=np.float64)
    dim = params.input_dims[level - 1]
    if frame_rep.shape != (dim,):
        raise ValueError(
            f"level {level} expects a frame vector of length {dim}, got {frame_rep.shape}"
        )
    tensors = wrap_params(params, trainable=set())
    out = mlp_forward(tensors, params, level, ad.constant(frame_rep[None, :]))
    return out.data[0]


def encode_sequences(params: ModelParams, level: int, reps: Array) -> Array:
    """Encode level representations (N, F, d) to frame features (N, F, h)."""
    tensors = wrap_params(params, trainable=set())
    return mlp_forward(tensors, params, level, ad.constant(reps)).data


def tap(frame_features: Array) -> Array:
    """Temporal average pooling: column-wise mean over the frame axis."""
    frame_features = np.asarray(frame_features, dtype=np.float64)
    if frame_features.ndim < 2 or frame_features.shape[-2] < 1:
        raise ValueError("tap requires at least one frame row")
    return frame_features.mean(axis=-2)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter dict."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, trainable: set[str] | None = None,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        names = params.arrays.keys() if trainable is None else trainable
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name in sorted(names):
            state.m[name] = np.zeros_like(params.arrays[name])
            state.v[name] = np.zeros_like(params.arrays[name])
        return state


def adam_step(state: AdamState, params: ModelParams, grads: dict[str, Array]) -> None:
    """One bias-corrected Adam update, in place. Aborts on non-finite grads."""
    for name in state.m:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in state.m:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params.arrays[name])
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params.arrays[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

LossBuilder = Callable[[ModelParams], tuple[Tensor, dict[str, Tensor]]]


def grad_check(
    loss_fn: LossBuilder,
    params: ModelParams,
    probe_count: int = 50,
    fd_eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    trainable: set[str] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the loss from ``params`` deterministically and
    return the scalar together with the parameter leaves it wrapped. The
    relative error denominator is floored at 1e-6 so near-zero gradients are
    compared absolutely, below which finite-difference noise dominates.
    """
    rng = rng or np.random.default_rng(0)
    loss, leaves = loss_fn(params)
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is non-finite at the probe point")
    loss.backward()
    grads = collect_grads(leaves)
    names = sorted(trainable) if trainable is not None else sorted(params.arrays)
    max_rel = 0.0
    for _ in range(probe_count):
        name = names[rng.integers(len(names))]
        arr = params.arrays[name]
        flat_idx = int(rng.integers(arr.size))
        idx = np.unravel_index(flat_idx, arr.shape)
        analytic = grads[name][idx] if name in grads else 0.0
        orig = arr[idx]
        arr[idx] = orig + fd_eps
        f_plus = loss_fn(params)[0].item()
        arr[idx] = orig - fd_eps
        f_minus = loss_fn(params)[0].item()
        arr[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * fd_eps)
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
        max_rel = max(max_rel, float(rel))
    return max_rel


def collect_grads(tensors: dict[str, Tensor]) -> dict[str, Array]:
    return {name: t.grad for name, t in tensors.items() if t.grad is not None}


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None,
                    rng_state: dict | None = None, epoch: int = 0,
                    meta: dict | None = None) -> None:
    """Single-file binary checkpoint with byte-deterministic layout.

    Format: magic line, 8-byte big-endian header length, sorted-key JSON
    header, then raw little-endian float64 bytes for each array in header
    order. Identical state always produces identical bytes.
    """
    entries: list[tuple[str, Array]] = []
    for name in sorted(params.arrays):
        entries.append((f"param/{name}", params.arrays[name]))
    header: dict = {
        "version": 1,
        "epoch": int(epoch),
        "model": {
            "input_dims": list(params.input_dims),
            "h": params.h,
            "m_heads": params.m_heads,
            "heterogeneous": params.heterogeneous,
        },
        "meta": meta or {},
        "rng_state": rng_state,
    }
    if adam is not None:
        header["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "t": adam.t,
        }
        for name in sorted(adam.m):
            entries.append((f"adam_m/{name}", adam.m[name]))
            entries.append((f"adam_v/{name}", adam.v[name]))
    header["arrays"] = [{"key": k, "shape": list(a.shape)} for k, a in entries]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "big"))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Inverse of save_checkpoint; returns params/adam/rng_state/epoch/meta."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        size = int.from_bytes(fh.read(8), "big")
        header = json.loads(fh.read(size).decode("utf-8"))
        raw: dict[str, Array] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            raw[entry["key"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    model = header["model"]
    params = ModelParams(
        input_dims=tuple(model["input_dims"]),
        h=model["h"],
        m_heads=model["m_heads"],
        heterogeneous=model["heterogeneous"],
        arrays={k.split("/", 1)[1]: v for k, v in raw.items() if k.startswith("param/")},
    )
    adam = None
    if "adam" in header:
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                         eps=a["eps"], t=a["t"])
        for key, arr in raw.items():
            if key.startswith("adam_m/"):
                adam.m[key.split("/", 1)[1]] = arr
            elif key.startswith("adam_v/"):
                adam.v[key.split("/", 1)[1]] = arr
    return {
        "params": params,
        "adam": adam,
        "rng_state": header.get("rng_state"),
        "epoch": header["epoch"],
        "meta": header.get("meta", {}),
    }
