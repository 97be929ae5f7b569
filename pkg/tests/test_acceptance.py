"""Acceptance checks, one test per criterion.

Every test prints a single ``PASS`` or ``FAIL`` line with the measured
numbers, then asserts. Run with ``pytest tests/test_acceptance.py -v -s``
(the lines are also printed without ``-s``).
"""

import csv
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from lahreg import autodiff as ad
from lahreg import cli, net
from lahreg.attn import AttentionConfig, group_transformer, interaction_transformer, mhsa_block
from lahreg.autodiff import Tensor, finite_diff_check
from lahreg.bench import time_call
from lahreg.geom import CorrespondenceSet, RigidTransform, apply_transform, kabsch, random_rotation
from lahreg.hashwin import (
    HashConfig,
    gather_windows,
    knn_partition,
    locality_score,
    lsh_partition,
    partition,
    sample_projection,
    unpartition,
)
from lahreg.io import read_cloud
from lahreg.net import init_params, load_checkpoint
from lahreg.reg import inlier_ratio, nn_match, ransac, rre, rte
from lahreg.scenes import gaussian_mixture_cloud

from test_attn import block_oracle, np_params, random_params, zero_outputs
from test_autodiff import UNARY_OPS
from test_config import snapshot_mismatches
from test_hashwin import naive_locality
from test_net import loss_oracle, make_batch


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


# 1 ---------------------------------------------------------------------------


def test_criterion_01_lsh_locality(report):
    t0 = time.perf_counter()
    wins = 0
    for seed in range(100):
        P = gaussian_mixture_cloud(4096, seed=seed)
        part = lsh_partition(P, HashConfig(bins=64, rounds=4, seed=seed), 64)
        intra, inter = locality_score(P, part, seed=seed)
        wins += intra < inter
    P = gaussian_mixture_cloud(300, seed=0)
    part = lsh_partition(P, HashConfig(), 16)
    got, want = locality_score(P, part), naive_locality(P, part.window_ids())
    oracle_err = max(abs(got[0] - want[0]), abs(got[1] - want[1]))
    elapsed = time.perf_counter() - t0
    ok = wins >= 95 and oracle_err <= 1e-9 and elapsed <= 120
    report(1, ok, f"intra<inter in {wins}/100 seeds, oracle error {oracle_err:.1e}, {elapsed:.0f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_criterion_02_partition_correctness(report):
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        M = int(rng.integers(1, 80))
        P = rng.normal(size=(n, 3))
        part = lsh_partition(P, HashConfig(seed=int(rng.integers(2**32))), M)
        sizes = part.sizes.tolist()
        full, rem = divmod(n, M)
        expected = [M] * full + ([rem] if rem else [])
        F = rng.normal(size=(n, 4))
        ok = (
            sizes == expected
            and np.array_equal(np.sort(part.permutation), np.arange(n))
            and np.array_equal(unpartition(gather_windows(F, part), part), F)
        )
        failures += not ok
    report(2, failures == 0, f"{1000 - failures}/1000 configurations correct")
    assert failures == 0


# 3 ---------------------------------------------------------------------------


def test_criterion_03_linear_cost(report):
    sizes = (10_000, 30_000, 100_000)
    cfg = HashConfig()
    proj = sample_projection(cfg)
    lsh_t = {}
    for n in sizes:
        P = gaussian_mixture_cloud(n, seed=0)
        lsh_t[n] = time_call(lambda: lsh_partition(P, cfg, 64, proj), repeats=5)[1]
    knn_t = {}
    for n in (sizes[0], sizes[-1]):
        P = gaussian_mixture_cloud(n, seed=0)
        knn_t[n] = time_call(lambda: knn_partition(P, 64), repeats=1)[1]
    lsh_ratio = lsh_t[sizes[-1]] / lsh_t[sizes[0]]
    knn_ratio = knn_t[sizes[-1]] / knn_t[sizes[0]]
    fes = [lsh_t[n] / n for n in sizes]
    fes_spread = max(fes) / min(fes)
    ok = lsh_ratio <= 15 and knn_ratio >= 30 and fes_spread < 10
    report(3, ok, f"LSH ratio {lsh_ratio:.1f}x, KNN ratio {knn_ratio:.1f}x, "
                  f"FES spread {fes_spread:.2f}x ({', '.join(f'{f:.2e}' for f in fes)} s/point)")  # fmt: skip
    assert ok


# 4 ---------------------------------------------------------------------------


def test_criterion_04_gradients(report):
    rng = np.random.default_rng(4)
    errors = {}
    for name, op in UNARY_OPS.items():
        x = Tensor(rng.normal(size=(4, 3)) + 0.01)

        def f(x, op=op):
            out = op(x)
            return ad.sum(out) if out.data.size > 1 else ad.reshape(out, ())

        errors[name] = finite_diff_check(f, x)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    errors["add_sub_mul"] = finite_diff_check(lambda a, b: ad.sum(ad.mul(ad.sub(a, ad.add(b, a)), a)), [a, b])
    errors["matmul"] = finite_diff_check(lambda a, b: ad.sum(ad.square(ad.matmul(a, b.T))), [a, b])
    errors["concat_rows"] = finite_diff_check(lambda a, b: ad.sum(ad.square(ad.concat_rows([a, b]))), [a, b])
    x, g, bb = (Tensor(rng.normal(size=s)) for s in ((5, 6), (6,), (6,)))
    w = Tensor(rng.normal(size=(5, 6)))
    errors["layer_norm"] = finite_diff_check(lambda x, g, b: ad.sum(ad.mul(ad.layer_norm_rows(x, g, b), w)),
                                             [x, g, bb])  # fmt: skip
    W, c = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=4))
    errors["linear"] = finite_diff_check(lambda x, W, c: ad.sum(ad.square(ad.linear(x, W, c))), [x, W, c])

    cfg = AttentionConfig(heads=2, head_dim=4, window_points=4, cross_window_count=2, seed=5)
    params = random_params(8, 15)
    part = partition(rng.integers(0, 4, 14), 4)
    F = Tensor(rng.normal(size=(14, 8)))
    wt = Tensor(rng.normal(size=(14, 8)))
    errors["group_transformer"] = finite_diff_check(
        lambda F, wq, w1: ad.sum(ad.mul(group_transformer(F, part, cfg, params), wt)),
        [F, params["wq"], params["w1"]])  # fmt: skip

    icfg = AttentionConfig(heads=2, head_dim=4, window_points=4, cross_window_count=0)
    iparams = random_params(8, 30)
    part_p, part_q = partition(rng.integers(0, 4, 10), 4), partition(rng.integers(0, 4, 7), 4)
    Fp, Fq = Tensor(rng.normal(size=(10, 8))), Tensor(rng.normal(size=(7, 8)))
    wp, wq = Tensor(rng.normal(size=(10, 8))), Tensor(rng.normal(size=(7, 8)))

    def it(Fp, Fq, wv):
        a, b = interaction_transformer(Fp, part_p, Fq, part_q, icfg, iparams)
        return ad.add(ad.sum(ad.mul(a, wp)), ad.sum(ad.mul(b, wq)))

    errors["interaction_transformer"] = finite_diff_check(it, [Fp, Fq, iparams["wv"]])

    Fp = Tensor(rng.normal(size=(6, 8)))
    Fq = Tensor(rng.normal(size=(6, 8)))
    batch = make_batch(np.array([[0, 1], [2, 3], [4, 5]]), rng.integers(0, 6, (3, 4)), rng.integers(0, 6, (3, 4)))
    errors["loss"] = finite_diff_check(
        lambda a, b: net.hardest_contrastive_loss(ad.l2_normalize_rows(a), ad.l2_normalize_rows(b), batch), [Fp, Fq])
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4
    report(4, ok, f"{len(errors)} checks, worst {worst} at {errors[worst]:.1e}")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_criterion_05_structure(report):
    rng = np.random.default_rng(5)
    F = rng.normal(size=(23, 8))
    part = partition(rng.integers(0, 6, 23), 5)
    zp = zero_outputs(random_params(8, 50))
    gt = AttentionConfig(heads=2, head_dim=4, window_points=5, cross_window_count=2, seed=1)
    gt_identity = np.array_equal(group_transformer(F, part, gt, zp).data, F)
    Fq = rng.normal(size=(9, 8))
    part_q = partition(rng.integers(0, 3, 9), 5)
    icfg = replace(gt, cross_window_count=0)
    a, b = interaction_transformer(F, part, Fq, part_q, icfg, zp)
    it_identity = np.array_equal(a.data, F) and np.array_equal(b.data, Fq)

    params = random_params(8, 51)
    out = group_transformer(F, part, replace(gt, cross_window_count=0), params).data
    cwn0 = all(np.array_equal(out[idx], mhsa_block(F[idx], params, 2).data) for idx in part.windows())

    F10 = F[:10]
    part2 = partition(np.arange(10) % 2, 5)
    out2 = group_transformer(F10, part2, gt, params).data
    full = block_oracle(F10, F10, np_params(params), 2)
    err2 = float(np.abs(out2 - full).max())
    ok = gt_identity and it_identity and cwn0 and err2 <= 1e-10
    report(5, ok, f"zeroed GT identity {gt_identity}, zeroed IT identity {it_identity}, "
                  f"CWN=0 bitwise {cwn0}, 2-window full-attention error {err2:.1e}")  # fmt: skip
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_06_loss_oracle(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n_p, n_q, k, c = (int(v) for v in rng.integers([2, 2, 1, 1], [8, 8, 5, 5]))
        Fp = rng.normal(size=(n_p, 4))
        Fp /= np.linalg.norm(Fp, axis=1, keepdims=True)
        Fq = rng.normal(size=(n_q, 4))
        Fq /= np.linalg.norm(Fq, axis=1, keepdims=True)
        pos = np.column_stack([rng.integers(0, n_p, k), rng.integers(0, n_q, k)])
        neg_q, neg_p = rng.integers(0, n_q, (k, c)), rng.integers(0, n_p, (k, c))
        got = float(net.hardest_contrastive_loss(Tensor(Fp), Tensor(Fq), make_batch(pos, neg_q, neg_p)).data)
        worst = max(worst, abs(got - loss_oracle(Fp, Fq, pos, neg_q, neg_p)))
    Fp = np.array([[0.0, 0.0], [0.6, 1.4]])
    Fq = np.array([[0.6, 0.0], [0.0, 1.4]])
    hand = float(net.hardest_contrastive_loss(Fp, Fq, make_batch([[0, 0]], [[1]], [[1]])).data)
    ok = worst <= 1e-12 and hand == 0.25
    report(6, ok, f"oracle error {worst:.1e} over 100 instances, hand case {hand!r}")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_criterion_07_geometry(report):
    t0 = time.perf_counter()
    kabsch_err = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        T = RigidTransform(random_rotation(seed), rng.normal(size=3))
        P = rng.normal(size=(30, 3))
        est = kabsch(P, apply_transform(T, P))
        kabsch_err = max(kabsch_err, float(np.abs(est.as_matrix() - T.as_matrix()).max()))
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        T = RigidTransform(random_rotation(seed), rng.uniform(-1, 1, 3))
        P = rng.uniform(-1, 1, (500, 3))
        Q = apply_transform(T, P)
        n_in = 200
        tgt = np.arange(500)
        tgt[n_in:] = rng.permutation(np.arange(n_in, 500))
        Q[n_in:] += rng.uniform(-1, 1, (500 - n_in, 3))
        corr = CorrespondenceSet(np.arange(500), tgt)
        res = ransac(corr, P, Q, iterations=1000, inlier_threshold=0.05, seed=seed)
        if res.success and rre(res.transform.rotation, T.rotation) <= 0.5 \
                and rte(res.transform.translation, T.translation) <= 0.01:  # fmt: skip
            wins += 1
    elapsed = time.perf_counter() - t0
    ok = kabsch_err <= 1e-9 and wins >= 95 and elapsed <= 120
    report(7, ok, f"kabsch error {kabsch_err:.1e}, RANSAC recovered {wins}/100 at 40% inliers, {elapsed:.0f}s")
    assert ok


# 8 ---------------------------------------------------------------------------

# Reduced channel widths keep the run inside the CPU budget; heads, window
# sizes, hashing and loss settings are the defaults.
TOY_TRAIN_NETWORK = {"stage_widths": [32, 64, 128], "gt_head_dims": [16, 16], "it_head_dim": 32}
TOY_TRAIN_STEPS = 800
SURFACE_SEEDS = list(range(8))


def mean_ir(params, cfg, pairs, mutual=False):
    irs = []
    for P, Q, T in pairs:
        F_p, F_q = cli._describe(params, cfg, P, Q)
        irs.append(inlier_ratio(nn_match(F_p, F_q, 500, seed=0, mutual=mutual), P, Q, T, 0.05))
    return float(np.mean(irs))


def load_pairs(manifest):
    return [(read_cloud(e["source"]), read_cloud(e["target"]), e["transform"]) for e in cli.read_manifest(manifest)]


def run_toy_training(workdir, steps=TOY_TRAIN_STEPS):
    """Train on 8 partial-overlap pairs, then evaluate on 20 full-overlap pairs, all through the CLI.

    Returns a dict with the untrained and trained mean inlier ratios on the
    training pairs, the evaluation report and the wall time.
    """
    t0 = time.perf_counter()
    raw = {
        "version": 1,
        "seed": 0,
        "network": TOY_TRAIN_NETWORK,
        "train": {"steps": steps, "lr": 1e-3},
        "scene": {"surface": "room-corner", "points": 2000, "overlap": 0.7, "noise": 0.0,
                  "max_rotation_deg": 30.0, "seed": 100},
    }  # fmt: skip
    config = workdir / "run.json"
    config.write_text(json.dumps(raw))
    common = ["--config", str(config)]
    seeds = [str(s) for s in SURFACE_SEEDS]
    cli.run(["synth", *common, "--output", str(workdir / "train"), "--count", "8", "--surface-seeds", *seeds])
    cli.run(["synth", *common, "--output", str(workdir / "eval"), "--count", "20", "--surface-seeds", *seeds,
             "--set", "scene.overlap=1.0", "--set", "scene.seed=1000"])  # fmt: skip
    pairs = load_pairs(workdir / "train" / "pairs.json")
    cli.run(["train", *common, "--manifest", str(workdir / "train" / "pairs.json"),
             "--output", str(workdir / "model.bin"), "--log-csv", str(workdir / "loss.csv")])  # fmt: skip
    params, net_cfg = load_checkpoint(workdir / "model.bin")
    untrained = init_params(net_cfg)
    baseline, trained = mean_ir(untrained, net_cfg, pairs), mean_ir(params, net_cfg, pairs)
    mutual = mean_ir(untrained, net_cfg, pairs, True), mean_ir(params, net_cfg, pairs, True)
    cli.run(["evaluate", *common, "--manifest", str(workdir / "eval" / "pairs.json"),
             "--checkpoint", str(workdir / "model.bin"), "--output", str(workdir / "report.json"),
             "--csv", str(workdir / "report.csv")])  # fmt: skip
    report = json.loads((workdir / "report.json").read_text())
    return {
        "baseline_ir": baseline,
        "trained_ir": trained,
        "mutual_ir": mutual,
        "rr": report["aggregate"]["rr"],
        "eval_pairs": report["aggregate"]["n_pairs"],
        "failed": [p["pair_id"] for p in report["pairs"] if not p["success"]],
        "seconds": time.perf_counter() - t0,
    }


def test_criterion_08_toy_training(report, tmp_path):
    r = run_toy_training(tmp_path)
    gain = r["trained_ir"] / max(r["baseline_ir"], 1e-12)
    ok = gain >= 5 and r["rr"] == 1.0 and r["eval_pairs"] == 20 and r["seconds"] <= 1800
    mutual = r["mutual_ir"]
    report(8, ok, f"mean IR {r['baseline_ir']:.4f} -> {r['trained_ir']:.4f} ({gain:.1f}x; mutual matching "
                  f"{mutual[0]:.4f} -> {mutual[1]:.4f}), RR {r['rr']:.2f} on {r['eval_pairs']} pairs "
                  f"(failed: {r['failed']}), {r['seconds']:.0f}s")  # fmt: skip
    assert ok


# 9 ---------------------------------------------------------------------------


def test_criterion_09_hyperparameters(report):
    problems = snapshot_mismatches()
    ok = not problems
    report(9, ok, "default config matches the snapshot" if ok else "; ".join(problems))
    assert ok


# 10 --------------------------------------------------------------------------


def test_criterion_10_ablation_harness(report, tmp_path):
    rounds = [str(r) for r in range(1, 7)]
    cwns = [str(c) for c in range(5)]
    cli.run(["bench-partition", "--sizes", "256", "--methods", "lsh", "--window-size", "32", "--rounds", *rounds,
             "--cwn", *cwns, "--repeats", "1", "--output", str(tmp_path / "bench.csv")])  # fmt: skip
    with open(tmp_path / "bench.csv") as fh:
        bench_rows = {(r["rounds"], r["cwn"]) for r in csv.DictReader(fh)}

    cfg = {"version": 1, "network": {"stage_widths": [8, 16, 16], "gt_window_points": [16, 8], "gt_heads": [2, 2],
                                     "gt_head_dims": [4, 8], "it_window_points": 4, "it_heads": 2,
                                     "it_head_dim": 8, "descriptor_dim": 8},
           "train": {"steps": 1, "n_pos": 8, "n_neg": 4}, "scene": {"points": 200, "overlap": 1.0},
           "ransac": {"iterations": 50, "sample_count": 50}}  # fmt: skip
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    common = ["--config", str(tmp_path / "c.json")]
    cli.run(["synth", *common, "--output", str(tmp_path / "d"), "--count", "1"])
    cli.run(["train", *common, "--manifest", str(tmp_path / "d" / "pairs.json"), "--output", str(tmp_path / "m.bin")])
    cli.run(["evaluate", *common, "--manifest", str(tmp_path / "d" / "pairs.json"), "--checkpoint",
             str(tmp_path / "m.bin"), "--rounds", *rounds, "--cwn", *cwns, "--output", str(tmp_path / "a.json"),
             "--csv", str(tmp_path / "a.csv")])  # fmt: skip
    with open(tmp_path / "a.csv") as fh:
        eval_rows = [(r["rounds"], r["cwn"]) for r in csv.DictReader(fh)]
    want = {(r, c) for r in rounds for c in cwns}
    ok = bench_rows == want and set(eval_rows) == want and len(eval_rows) == 30
    report(10, ok, f"bench-partition {len(bench_rows)}/30 settings, evaluate {len(set(eval_rows))}/30 settings")
    assert ok
