"""Command-line entry point: train, eval, synth, gradcheck, cluster-stats,
importance-dump.

Every run gets a directory (timestamped under --outdir, or exactly --run-dir)
holding its outputs plus a manifest with the config snapshot, seed, and
sha256 hashes of inputs and outputs. Exit codes: 0 success, 1 validation
failure, 2 numerical failure.

The HIMPC_THREADS environment variable caps BLAS worker counts; it is
applied before numpy loads, so heavy imports happen lazily inside main().
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

GRADCHECK_TOLERANCE = 1e-4

_CLI_LOSS_NAMES = {"himpc": "himpc", "himpc-h": "himpc_h", "dpc": "dpc"}


def _cap_threads() -> None:
    cap = os.environ.get("HIMPC_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _make_run_dir(args, command: str) -> Path:
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(args.outdir) / f"{stamp}-{command}"
        suffix = 0
        while run_dir.exists():
            suffix += 1
            run_dir = Path(args.outdir) / f"{stamp}-{command}.{suffix}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_manifest(run_dir: Path, command: str, config: dict, seed,
                    inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p.exists()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.exists()},
    }
    with open(run_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _add_run_dir_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--outdir", default="runs", help="parent for timestamped run dirs")
    parser.add_argument("--run-dir", default=None, help="exact run directory (overrides --outdir)")


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("--f", type=int, default=None, help="sequence window length")
    parser.add_argument("--h", type=int, default=None, help="embedding size")
    parser.add_argument("--m", type=int, default=None, help="transformation head count")
    parser.add_argument("--eps", type=float, default=None, help="DBSCAN radius")
    parser.add_argument("--min-samples", type=int, default=None, help="DBSCAN density floor")
    parser.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--max-epoch", type=int, default=None)
    parser.add_argument("--max-patience", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--loss", choices=sorted(_CLI_LOSS_NAMES), default=None)
    parser.add_argument("--heterogeneous-heads", action="store_true", default=None)
    parser.add_argument("--center-root", action="store_true", default=None)
    parser.add_argument("--l2-normalize", action="store_true", default=None)


def _explicit_overrides(args) -> dict:
    """Config fields the user actually set on the command line."""
    mapping = {
        "f": "f", "h": "h", "m": "m_heads", "eps": "eps",
        "min_samples": "min_samples", "lr": "lr", "batch_size": "batch_size",
        "max_epoch": "max_epoch", "max_patience": "max_patience", "seed": "seed",
        "heterogeneous_heads": "heterogeneous_heads", "center_root": "center_root",
        "l2_normalize": "l2_normalize",
    }
    overrides = {}
    for arg_name, field in mapping.items():
        value = getattr(args, arg_name)
        if value is not None:
            overrides[field] = value
    if args.loss is not None:
        overrides["loss_variant"] = _CLI_LOSS_NAMES[args.loss]
    return overrides


def _build_config(args):
    from .trainer import TrainConfig

    overrides = _explicit_overrides(args)
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig.from_dict(overrides)


def _load_windowed(path: str, expected_j: int, f: int, stride: int | None):
    from .io import parse_sequences, window_sequences

    raw = parse_sequences(path, expected_j)
    exact = all(seq.length == f for seq in raw)
    if exact:
        return raw, 0
    return window_sequences(raw, f, stride)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    from .io import generate_synthetic, make_split, write_sequences

    run_dir = _make_run_dir(args, "synth")
    sequences = generate_synthetic(
        args.ids, args.seqs_per_id, args.frames, args.joints, args.noise, args.seed
    )
    out_path = Path(args.out) if args.out else run_dir / "data.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_sequences(out_path, sequences)
    outputs = [out_path]
    if args.split:
        split = make_split(sequences, args.probe_fraction, args.seed)
        for name, subset in (("train", split.train), ("probe", split.probe),
                             ("gallery", split.gallery)):
            path = run_dir / f"{name}.jsonl"
            write_sequences(path, subset)
            outputs.append(path)
    config = {
        "ids": args.ids, "seqs_per_id": args.seqs_per_id, "frames": args.frames,
        "joints": args.joints, "noise": args.noise,
        "split": args.split, "probe_fraction": args.probe_fraction,
    }
    _write_manifest(run_dir, "synth", config, args.seed, [], outputs)
    print(str(out_path))
    return EXIT_OK


def _cmd_train(args) -> int:
    import numpy as np

    from .trainer import train

    config = _build_config(args)
    run_dir = _make_run_dir(args, "train")
    sequences, skipped = _load_windowed(args.data, args.joints, config.f, args.stride)
    if not sequences:
        raise ValueError(f"no usable sequences of length {config.f} in {args.data}")
    # Only coordinates cross into the trainer; identity metadata stops here.
    coords = np.stack([seq.frames for seq in sequences])
    ckpt_path = run_dir / "checkpoint.ckpt"
    _params, log = train(coords, config, checkpoint_path=ckpt_path,
                         resume_from=args.resume)
    log_path = run_dir / "trainlog.json"
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump(log.full_dict(), fh, indent=2)
        fh.write("\n")
    canon_path = run_dir / "trainlog.canonical.json"
    canon_path.write_text(log.canonical_json() + "\n", encoding="utf-8")
    _write_manifest(run_dir, "train", config.to_dict(), config.seed,
                    [Path(args.data)], [ckpt_path, log_path, canon_path])
    print(str(run_dir))
    if skipped:
        print(f"skipped {skipped} record(s) shorter than F={config.f}", file=sys.stderr)
    return EXIT_OK


def _cmd_eval(args) -> int:
    import numpy as np

    from .evaluate import build_msmr_batch, match
    from .io import parse_sequences
    from .nn import load_checkpoint

    run_dir = _make_run_dir(args, "eval")
    snapshot = load_checkpoint(args.checkpoint)
    params = snapshot["params"]
    meta_config = snapshot["meta"].get("config", {})
    center_root = bool(meta_config.get("center_root", False))
    f = args.f if args.f is not None else int(meta_config.get("f", 6))
    j = int(snapshot["meta"].get("j", args.joints))

    def embed(path: str):
        sequences, _ = _load_windowed(path, j, f, None)
        if not sequences:
            raise ValueError(f"no usable sequences of length {f} in {path}")
        ids = []
        for seq in sequences:
            if seq.identity is None:
                raise ValueError(f"sequence '{seq.seq_id}' lacks an identity label")
            ids.append(seq.identity)
        coords = np.stack([seq.frames for seq in sequences])
        return build_msmr_batch(params, coords, center_root=center_root), np.asarray(ids)

    probe_vecs, probe_ids = embed(args.probe)
    gallery_vecs, gallery_ids = embed(args.gallery)
    report = match(probe_vecs, probe_ids, gallery_vecs, gallery_ids)
    report_path = run_dir / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    cmc_path = run_dir / "cmc.csv"
    report.write_cmc_csv(cmc_path)
    table_path = run_dir / "matches.json"
    with open(table_path, "w", encoding="utf-8") as fh:
        json.dump(report.matches, fh, indent=2)
        fh.write("\n")
    _write_manifest(run_dir, "eval", {"checkpoint": args.checkpoint}, None,
                    [Path(args.checkpoint), Path(args.probe), Path(args.gallery)],
                    [report_path, cmc_path, table_path])
    print(report.to_json())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    import numpy as np

    from . import autodiff as ad
    from .clustering import cluster_levels
    from .hierarchy import build_hierarchy_batch, builtin_partitions
    from .io import generate_synthetic
    from .losses import temperature
    from .nn import grad_check, mlp_forward, wrap_params
    from .trainer import TrainConfig, create_params, make_loss_builder, trainable_names

    config = TrainConfig(
        f=args.f or 6, h=args.h or 16, m_heads=args.m or 2,
        eps=args.eps or 1.0, min_samples=args.min_samples or 1,
        seed=args.seed or 0,
        loss_variant=_CLI_LOSS_NAMES[args.loss] if args.loss else "himpc_h",
    )
    run_dir = _make_run_dir(args, "gradcheck")
    sequences = generate_synthetic(4, 1, config.f, args.joints, 0.02, config.seed)
    coords = np.stack([seq.frames for seq in sequences])
    tables = builtin_partitions(args.joints)
    use_tables = tables[:1] if config.loss_variant == "dpc" else tables
    reps = build_hierarchy_batch(coords, use_tables)
    rng = np.random.default_rng(config.seed)
    params = create_params(args.joints, config, rng, tables)
    trainable = trainable_names(params, config.loss_variant)
    eval_tensors = wrap_params(params, trainable=set())
    instances = []
    for k in range(params.n_levels):
        feats = mlp_forward(eval_tensors, params, k + 1, ad.constant(reps[k])).data
        instances.append(feats.mean(axis=1))
    if args.eps is None:
        # Radius below every pairwise gap puts each toy sequence in its own
        # cluster at every level, guaranteeing a multi-prototype loss.
        smallest = min(
            float(np.min(np.linalg.norm(inst[:, None] - inst[None, :], axis=2)
                         + np.eye(len(inst)) * 1e9))
            for inst in instances
        )
        config = TrainConfig(**{**config.to_dict(), "eps": 0.9 * smallest,
                                "min_samples": 1})
    state = cluster_levels(instances, config.eps, config.min_samples)
    if min(state.cluster_counts()) < 2:
        raise ValueError(
            "gradcheck clustering produced fewer than two clusters; adjust --eps"
        )
    results = {}
    for variant in ("himpc", "himpc_h"):
        loss_fn = make_loss_builder(
            reps, [p for p in state.prototypes], state.labels,
            temperature(config.h), variant, True, trainable,
        )
        results[variant] = grad_check(
            loss_fn, params, probe_count=args.probes, fd_eps=args.fd_eps,
            rng=np.random.default_rng(config.seed + 1), trainable=trainable,
        )
    worst = max(results.values())
    payload = {
        "max_rel_error": float(worst),
        "per_loss": {k: float(v) for k, v in results.items()},
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": bool(worst < GRADCHECK_TOLERANCE),
    }
    out_path = run_dir / "gradcheck.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(run_dir, "gradcheck", config.to_dict(), config.seed, [], [out_path])
    print(json.dumps(payload, sort_keys=True))
    if not payload["passed"]:
        print(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _prepare_features(args, config):
    """Shared by cluster-stats and importance-dump: params + level features."""
    import numpy as np

    from . import autodiff as ad
    from .hierarchy import build_hierarchy_batch, builtin_partitions
    from .nn import load_checkpoint, mlp_forward, wrap_params
    from .trainer import TrainConfig, create_params

    params = None
    if args.checkpoint:
        from dataclasses import fields

        snapshot = load_checkpoint(args.checkpoint)
        params = snapshot["params"]
        # The checkpoint's own settings apply unless explicitly overridden
        # on the command line.
        known = {f.name for f in fields(TrainConfig)}
        meta = {k: v for k, v in snapshot["meta"].get("config", {}).items() if k in known}
        config = TrainConfig.from_dict({**meta, **_explicit_overrides(args)})
    sequences, _ = _load_windowed(args.data, args.joints, config.f, None)
    if not sequences:
        raise ValueError(f"no usable sequences of length {config.f} in {args.data}")
    coords = np.stack([seq.frames for seq in sequences])
    if config.center_root:
        coords = coords - coords[:, :, 0:1, :]
    if params is None:
        params = create_params(args.joints, config, np.random.default_rng(config.seed))
    tables = builtin_partitions(args.joints)[: params.n_levels]
    reps = build_hierarchy_batch(coords, tables)
    tensors = wrap_params(params, trainable=set())
    feats = [mlp_forward(tensors, params, k + 1, ad.constant(reps[k])).data
             for k in range(params.n_levels)]
    instances = [f.mean(axis=1) for f in feats]
    seq_ids = [seq.seq_id for seq in sequences]
    return params, feats, instances, seq_ids, config


def _cmd_cluster_stats(args) -> int:
    from .clustering import cluster_levels, suggest_eps

    config = _build_config(args)
    run_dir = _make_run_dir(args, "cluster-stats")
    params, _feats, instances, _ids, config = _prepare_features(args, config)
    state = cluster_levels(instances, config.eps, config.min_samples, config.l2_normalize)
    payload = state.stats()
    payload["eps_suggestions"] = [
        suggest_eps(inst, config.min_samples) for inst in instances
    ]
    out_path = run_dir / "cluster_stats.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(run_dir, "cluster-stats", config.to_dict(), config.seed,
                    [Path(args.data)], [out_path])
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def _cmd_importance_dump(args) -> int:
    import numpy as np

    from .clustering import cluster_levels
    from .losses import frame_importance, predict_cluster

    config = _build_config(args)
    run_dir = _make_run_dir(args, "importance-dump")
    params, feats, instances, seq_ids, config = _prepare_features(args, config)
    state = cluster_levels(instances, config.eps, config.min_samples, config.l2_normalize)
    records = []
    for i, seq_id in enumerate(seq_ids):
        entry = {"seq_id": seq_id, "levels": []}
        for k in range(params.n_levels):
            labels = state.labels[k]
            prototypes = state.prototypes[k]
            level_entry = {"cluster": int(labels[i]), "heads": []}
            if labels[i] != -1 and prototypes is not None:
                for m in range(params.m_heads):
                    head = params.head(k + 1, m)
                    proto_head = params.head(k + 1, m, prototype_side=True)
                    inst_t = instances[k][i] @ head.T
                    feats_t = feats[k][i] @ head.T
                    protos_t = prototypes @ proto_head.T
                    pred = predict_cluster(inst_t, protos_t)
                    weights = frame_importance(feats_t, protos_t[pred], pred, int(labels[i]))
                    level_entry["heads"].append(
                        {
                            "predicted": pred,
                            "importance": [float(w) for w in weights],
                        }
                    )
            entry["levels"].append(level_entry)
        records.append(entry)
    out_path = run_dir / "importance.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
    _write_manifest(run_dir, "importance-dump", config.to_dict(), config.seed,
                    [Path(args.data)], [out_path])
    print(str(out_path))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="himpc",
        description="Unsupervised skeleton-sequence person re-identification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p_synth.add_argument("--ids", type=int, required=True)
    p_synth.add_argument("--seqs-per-id", type=int, default=6)
    p_synth.add_argument("--frames", type=int, default=6)
    p_synth.add_argument("--joints", type=int, default=20)
    p_synth.add_argument("--noise", type=float, default=0.01)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", default=None, help="dataset path (default <run_dir>/data.jsonl)")
    p_synth.add_argument("--split", action="store_true",
                         help="also write train/probe/gallery JSONL files")
    p_synth.add_argument("--probe-fraction", type=float, default=0.2)
    _add_run_dir_options(p_synth)
    p_synth.set_defaults(func=_cmd_synth)

    p_train = sub.add_parser("train", help="train on a JSONL dataset")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--joints", type=int, default=20)
    p_train.add_argument("--stride", type=int, default=None, help="window stride (default F)")
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_config_options(p_train)
    _add_run_dir_options(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="match probe against gallery")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--probe", required=True)
    p_eval.add_argument("--gallery", required=True)
    p_eval.add_argument("--joints", type=int, default=20)
    p_eval.add_argument("--f", type=int, default=None)
    _add_run_dir_options(p_eval)
    p_eval.set_defaults(func=_cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--joints", type=int, default=20)
    p_grad.add_argument("--probes", type=int, default=60)
    p_grad.add_argument("--fd-eps", type=float, default=1e-5)
    _add_config_options(p_grad)
    _add_run_dir_options(p_grad)
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_stats = sub.add_parser("cluster-stats", help="per-level clustering summary")
    p_stats.add_argument("--data", required=True)
    p_stats.add_argument("--joints", type=int, default=20)
    p_stats.add_argument("--checkpoint", default=None)
    _add_config_options(p_stats)
    _add_run_dir_options(p_stats)
    p_stats.set_defaults(func=_cmd_cluster_stats)

    p_imp = sub.add_parser("importance-dump", help="per-frame hardness weights")
    p_imp.add_argument("--data", required=True)
    p_imp.add_argument("--joints", type=int, default=20)
    p_imp.add_argument("--checkpoint", default=None)
    _add_config_options(p_imp)
    _add_run_dir_options(p_imp)
    p_imp.set_defaults(func=_cmd_importance_dump)

    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
