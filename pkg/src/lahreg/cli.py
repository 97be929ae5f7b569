"""Command-line interface.

Every subcommand is a thin composition of library calls and is also
exposed as a ``cmd_*`` function. On failure the process prints a JSON
object ``{"error": ..., "message": ..., "details": [...]}`` to stderr and
exits with status 2 for usage and configuration problems or 1 for other
errors. The ``LAHREG_THREADS`` environment variable caps BLAS threads and
the number of pairs evaluated concurrently.
"""

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from lahreg import autodiff as ad
from lahreg import bench
from lahreg.config import ConfigError, apply_overrides, default_config, load_config, parse_config
from lahreg.geom import RigidTransform
from lahreg.hashwin import HashConfig, lsh_partition
from lahreg.io import CloudFormatError, read_cloud, write_cloud
from lahreg.net import derive_seed, forward, load_checkpoint, train_loop
from lahreg.reg import EvalReport, evaluate_pair, nn_match, ransac
from lahreg.scenes import synth_pair

MANIFEST_VERSION = 1
ABLATION_COLUMNS = ("rounds", "cwn", "n_pairs", "fmr", "mean_ir", "rr", "rre_mean", "rte_mean")


class UsageError(ValueError):
    """Bad command-line arguments or inputs."""


def thread_count():
    """Parallelism cap from ``LAHREG_THREADS`` (default 1)."""
    raw = os.environ.get("LAHREG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LAHREG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LAHREG_THREADS must be a positive integer, got {raw!r}")
    return n


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _finite_or_none(x):
    return None if isinstance(x, float) and not np.isfinite(x) else x


# manifests -------------------------------------------------------------------


def read_manifest(path):
    """Load a pairs manifest; cloud paths are resolved against its folder.

    Returns
    -------
    list of dict
        Entries with keys ``id``, ``source``, ``target`` (absolute paths)
        and ``transform`` (:class:`RigidTransform`), sorted by id.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if doc.get("version") != MANIFEST_VERSION or not isinstance(doc.get("pairs"), list):
        raise UsageError(f"{path}: expected a version {MANIFEST_VERSION} manifest with a 'pairs' list")
    out = []
    for k, e in enumerate(doc["pairs"]):
        missing = [f for f in ("id", "source", "target", "transform") if f not in e]
        if missing:
            raise UsageError(f"{path}: pair {k} lacks {missing}")
        out.append({
            "id": str(e["id"]),
            "source": str(path.parent / e["source"]),
            "target": str(path.parent / e["target"]),
            "transform": RigidTransform.from_matrix(e["transform"]),
        })  # fmt: skip
    ids = [e["id"] for e in out]
    if len(set(ids)) != len(ids):
        raise UsageError(f"{path}: duplicate pair ids")
    return sorted(out, key=lambda e: e["id"])


def _load_pairs(manifest):
    return [(read_cloud(e["source"]), read_cloud(e["target"]), e["transform"]) for e in read_manifest(manifest)]


def _frozen(params):
    """Parameters as constants so inference builds no gradient graph."""
    return {k: ad.Tensor(v.data) for k, v in params.items()}


# commands --------------------------------------------------------------------


def cmd_partition(input_path, hash_config, window_size, output):
    """Partition one cloud and write a window manifest.

    The manifest lists each window's size and point indices and, for every
    input point, the id of its window.
    """
    P = read_cloud(input_path)
    part = lsh_partition(P, hash_config, window_size)
    doc = {
        "version": MANIFEST_VERSION,
        "input": str(input_path),
        "n_points": part.n_points,
        "window_size": window_size,
        "hash": asdict(hash_config),
        "window_sizes": part.sizes.tolist(),
        "windows": [w.tolist() for w in part.windows()],
        "window_ids": part.window_ids().tolist(),
    }
    _write_json(output, doc)
    return doc


def cmd_bench_partition(sizes, methods, output, window_size=64, voxel_edge=0.1, rounds=(4,),
                        cross_window_counts=(), repeats=3, seed=0):  # fmt: skip
    """Run :func:`lahreg.bench.bench_partition` and write its rows as CSV."""
    for l in rounds:
        if not 1 <= l <= 6:
            raise UsageError(f"rounds must lie in 1..6, got {l}")
    for c in cross_window_counts:
        if not 0 <= c <= 4:
            raise UsageError(f"cross-window count must lie in 0..4, got {c}")
    rows = bench.bench_partition(
        sizes, methods, window_size=window_size, voxel_edge=voxel_edge, rounds=rounds,
        cross_window_counts=cross_window_counts, repeats=repeats, seed=seed,
    )  # fmt: skip
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    bench.write_csv(output, rows)
    return rows


def cmd_synth(scene, output_dir, count=1, surface_seeds=None, fmt="ply"):
    """Generate ``count`` pairs and a ``pairs.json`` manifest in ``output_dir``.

    Pair ``k`` uses the seed ``scene.seed + k``. With ``surface_seeds``, pair
    ``k`` is cut from base surface ``surface_seeds[k % len(surface_seeds)]``
    so several pairs can share the same underlying surfaces.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "xyz" if fmt == "xyz" else "ply"
    entries = []
    for k in range(count):
        cfg = replace(scene, seed=scene.seed + k)
        if surface_seeds:
            cfg = replace(cfg, surface_seed=int(surface_seeds[k % len(surface_seeds)]))
        P, Q, T, ov = synth_pair(cfg)
        pid = f"pair_{k:04d}"
        write_cloud(out / f"{pid}_source.{ext}", P)
        write_cloud(out / f"{pid}_target.{ext}", Q)
        entries.append({
            "id": pid,
            "source": f"{pid}_source.{ext}",
            "target": f"{pid}_target.{ext}",
            "transform": T.as_matrix().tolist(),
            "overlap": ov,
            "scene": asdict(cfg),
        })  # fmt: skip
    doc = {"version": MANIFEST_VERSION, "pairs": entries}
    _write_json(out / "pairs.json", doc)
    return doc


def cmd_train(config, manifest=None, checkpoint=None, log_csv=None):
    """Train on the pairs of a manifest; write a checkpoint and a loss log."""
    manifest = manifest or config.paths.manifest
    checkpoint = checkpoint or config.paths.checkpoint
    log_csv = log_csv or config.paths.log_csv
    if manifest is None or checkpoint is None:
        raise UsageError("train needs a pairs manifest and a checkpoint path")
    pairs = _load_pairs(manifest)
    Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(thread_count()):
        _, losses = train_loop(pairs, config.network, config.train, checkpoint=checkpoint, log_csv=log_csv)
    return {
        "checkpoint": str(checkpoint),
        "steps": len(losses),
        "first_loss": _finite_or_none(losses[0]) if losses else None,
        "final_loss": _finite_or_none(losses[-1]) if losses else None,
    }


def _describe(params, net_cfg, P, Q):
    F_p, F_q = forward(P, Q, _frozen(params), net_cfg)
    return F_p.data, F_q.data


def cmd_describe(checkpoint, source, target, output):
    """Write descriptors of a cloud pair to an ``.npz`` file with arrays ``source`` and ``target``."""
    if Path(output).suffix != ".npz":
        raise UsageError("describe writes an .npz file")
    params, net_cfg = load_checkpoint(checkpoint)
    with threadpool_limits(thread_count()):
        F_p, F_q = _describe(params, net_cfg, read_cloud(source), read_cloud(target))
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    np.savez(output, source=F_p, target=F_q)
    return {"output": str(output), "source_rows": len(F_p), "target_rows": len(F_q), "dim": F_p.shape[1]}


def cmd_register(source, target, output, ransac_config, descriptors=None, checkpoint=None, seed=0):
    """Estimate the transform mapping ``source`` onto ``target`` and write it as JSON.

    Descriptors come from an ``.npz`` written by ``describe`` or are computed
    from a checkpoint.
    """
    P, Q = read_cloud(source), read_cloud(target)
    if (descriptors is None) == (checkpoint is None):
        raise UsageError("register needs exactly one of --descriptors or --checkpoint")
    if descriptors is not None:
        with np.load(descriptors) as z:
            F_p, F_q = z["source"], z["target"]
    else:
        params, net_cfg = load_checkpoint(checkpoint)
        with threadpool_limits(thread_count()):
            F_p, F_q = _describe(params, net_cfg, P, Q)
    if len(F_p) != len(P) or len(F_q) != len(Q):
        raise UsageError("descriptor rows do not match the clouds")
    rc = ransac_config
    corr = nn_match(F_p, F_q, rc.sample_count, seed, mutual=rc.mutual)
    res = ransac(corr, P, Q, rc.iterations, rc.inlier_threshold, seed, rc.min_inliers)
    doc = {
        "version": MANIFEST_VERSION,
        "success": bool(res.success),
        "message": res.message,
        "transform": res.transform.as_matrix().tolist() if res.success else None,
        "inlier_count": res.inlier_count,
        "n_correspondences": len(corr),
        "iterations": res.iterations,
    }
    _write_json(output, doc)
    return doc


def _evaluate_setting(pairs, params, net_cfg, thresholds, rc, seed, threads):
    def one(entry):
        P, Q = read_cloud(entry["source"]), read_cloud(entry["target"])
        F_p, F_q = _describe(params, net_cfg, P, Q)
        pr, _ = evaluate_pair(
            entry["id"], F_p, F_q, P, Q, entry["transform"], thresholds, rc.sample_count,
            rc.iterations, rc.inlier_threshold, derive_seed(seed, k_of[entry["id"]]), rc.mutual,
            rc.min_inliers,
        )  # fmt: skip
        return pr

    k_of = {e["id"]: k for k, e in enumerate(pairs)}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(e) for e in pairs]
    return results


def cmd_evaluate(manifest, checkpoint, thresholds, ransac_config, output=None, csv_output=None,
                 rounds=None, cross_window_counts=None, seed=0):  # fmt: skip
    """Evaluate a checkpoint on every pair of a manifest.

    ``rounds`` and ``cross_window_counts`` override the checkpoint's hashing
    rounds and cross-window count; one report is produced per combination.
    With a single combination ``output`` holds an :class:`EvalReport` and
    ``csv_output`` its per-pair table. With several, ``output`` holds all
    reports and ``csv_output`` one aggregate row per combination.

    Returns
    -------
    list of (dict, EvalReport)
        The setting and report of each combination, in the order given.
    """
    params, net_cfg = load_checkpoint(checkpoint)
    pairs = read_manifest(manifest)
    if not pairs:
        raise UsageError("manifest has no pairs")
    rounds = list(rounds) if rounds else [net_cfg.hash_rounds]
    cwns = list(cross_window_counts) if cross_window_counts is not None and len(cross_window_counts) else [
        net_cfg.cross_window_count
    ]
    for l in rounds:
        if not 1 <= l <= 6:
            raise UsageError(f"rounds must lie in 1..6, got {l}")
    for c in cwns:
        if not 0 <= c <= 4:
            raise UsageError(f"cross-window count must lie in 0..4, got {c}")
    threads = thread_count()
    out = []
    with threadpool_limits(threads):
        for l, c in itertools.product(rounds, cwns):
            cfg = replace(net_cfg, hash_rounds=l, cross_window_count=c)
            results = _evaluate_setting(pairs, params, cfg, thresholds, ransac_config, seed, threads)
            setting = {"rounds": l, "cwn": c}
            settings = dict(setting, checkpoint=str(checkpoint), manifest=str(manifest), seed=seed,
                            ransac=asdict(ransac_config))  # fmt: skip
            out.append((setting, EvalReport(thresholds, results, settings)))
    if len(out) == 1:
        report = out[0][1]
        if output:
            report.write_json(output)
        if csv_output:
            report.write_csv(csv_output)
        return out
    if output:
        _write_json(output, {
            "version": MANIFEST_VERSION,
            "reports": [dict(s, report=r.to_dict()) for s, r in out],
        })  # fmt: skip
    if csv_output:
        with open(csv_output, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            for s, r in out:
                agg = r.aggregate()
                w.writerow({k: s.get(k, agg.get(k)) for k in ABLATION_COLUMNS})
    return out


# argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _override(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _config(args):
    overrides = dict(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is None:
        base = default_config().to_dict()
        # Section seeds are re-derived from the root seed when it changes.
        if "seed" in overrides:
            for name in ("hash", "network", "train", "scene"):
                base[name].pop("seed")
        return parse_config(apply_overrides(base, overrides))
    return load_config(args.config, overrides)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (u64)")
    common.add_argument("--output", help="output file or folder")
    common.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE",
                        help="override a config field, e.g. train.steps=100")  # fmt: skip

    p = _Parser(prog="lahreg", description="LSH-windowed attention point-cloud registration")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("partition", parents=[common], help="LSH window manifest of one cloud")
    s.add_argument("input")
    s.add_argument("--window-size", type=int, default=64)

    s = sub.add_parser("bench-partition", parents=[common], help="partitioner timing CSV")
    s.add_argument("--sizes", type=int, nargs="+", default=[10_000, 100_000])
    s.add_argument("--methods", nargs="+", default=["lsh", "knn"], choices=bench.METHODS)
    s.add_argument("--window-size", type=int, default=64)
    s.add_argument("--voxel-edge", type=float, default=0.1)
    s.add_argument("--rounds", type=int, nargs="+")
    s.add_argument("--cwn", type=int, nargs="+", default=[])
    s.add_argument("--repeats", type=int, default=3)

    s = sub.add_parser("synth", parents=[common], help="synthetic pairs and manifest")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--surface-seeds", type=int, nargs="+")
    s.add_argument("--format", choices=["ply", "xyz"], default="ply")

    s = sub.add_parser("train", parents=[common], help="train on a pairs manifest")
    s.add_argument("--manifest")
    s.add_argument("--log-csv")

    s = sub.add_parser("describe", parents=[common], help="descriptors of a cloud pair")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("source")
    s.add_argument("target")

    s = sub.add_parser("register", parents=[common], help="estimate a rigid transform")
    s.add_argument("source")
    s.add_argument("target")
    s.add_argument("--descriptors")
    s.add_argument("--checkpoint")

    s = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a manifest")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--csv")
    s.add_argument("--rounds", type=int, nargs="+")
    s.add_argument("--cwn", type=int, nargs="+")
    return p


def _need_output(args):
    if not args.output:
        raise UsageError(f"{args.command} needs --output")
    return args.output


def run(argv=None):
    """Execute one command and return its JSON-serializable summary."""
    args = build_parser().parse_args(argv)
    cfg = _config(args)
    seed = cfg.seed
    if args.command == "partition":
        hc = HashConfig(cfg.hash.bins, cfg.hash.rounds, cfg.hash.seed)
        doc = cmd_partition(args.input, hc, args.window_size, _need_output(args))
        return {"output": args.output, "window_sizes": doc["window_sizes"]}
    if args.command == "bench-partition":
        rows = cmd_bench_partition(
            args.sizes, args.methods, _need_output(args), args.window_size, args.voxel_edge,
            args.rounds or [cfg.hash.rounds], args.cwn, args.repeats, seed,
        )  # fmt: skip
        return {"output": args.output, "rows": len(rows)}
    if args.command == "synth":
        doc = cmd_synth(cfg.scene, _need_output(args), args.count, args.surface_seeds, args.format)
        return {"output": args.output, "pairs": len(doc["pairs"])}
    if args.command == "train":
        return cmd_train(cfg, args.manifest, args.output, args.log_csv)
    if args.command == "describe":
        return cmd_describe(args.checkpoint, args.source, args.target, _need_output(args))
    if args.command == "register":
        doc = cmd_register(args.source, args.target, _need_output(args), cfg.ransac, args.descriptors,
                           args.checkpoint, seed)  # fmt: skip
        return {"output": args.output, "success": doc["success"]}
    if args.command == "evaluate":
        manifest = args.manifest or cfg.paths.manifest
        checkpoint = args.checkpoint or cfg.paths.checkpoint
        if manifest is None or checkpoint is None:
            raise UsageError("evaluate needs --manifest and --checkpoint")
        out = cmd_evaluate(manifest, checkpoint, cfg.thresholds, cfg.ransac, args.output or cfg.paths.output,
                           args.csv, args.rounds, args.cwn, seed)  # fmt: skip
        return {"settings": [dict(s, **{k: _finite_or_none(v) for k, v in r.aggregate().items()}) for s, r in out]}
    raise UsageError(f"unknown command {args.command}")  # pragma: no cover


def main(argv=None):
    """Console entry point; returns the process exit status."""
    try:
        summary = run(argv)
    except (UsageError, ConfigError, CloudFormatError) as exc:
        details = exc.errors if isinstance(exc, ConfigError) else [str(exc)]
        _fail(type(exc).__name__, exc, details)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes machine-readable JSON
        _fail(type(exc).__name__, exc, [str(exc)])
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


def _fail(kind, exc, details):
    print(json.dumps({"error": kind, "message": str(exc).splitlines()[0] if str(exc) else kind,
                      "details": details}), file=sys.stderr)  # fmt: skip


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
