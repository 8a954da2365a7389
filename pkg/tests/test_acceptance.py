"""Release gates: thirteen numbered end-to-end checks at stated tolerances.

Each check prints one verdict line (visible with -s) before asserting, so a
full run reads as a scorecard. Shared sweeps are computed once per module.
"""

import math
import time
from itertools import combinations

import numpy as np
import pytest
from scipy import optimize, stats

from flprivlab import adversary_lab, bounds, fl_core, mi_lab
from flprivlab import secure_agg as sa
from flprivlab.cli import main
from flprivlab.data_io import synth_images, partition_iid
from flprivlab.fl_core import FLConfig, QuantSpec
from flprivlab.model_zoo import ModelSpec, build, flatten
from flprivlab.nn_core import (Tape, Tensor, affine, conv2d, grad_check,
                               maxpool2d, relu, softmax_xent)
from flprivlab.report import read_report

LN2 = math.log(2.0)
LINEAR_28 = ModelSpec(arch="linear", input_shape=(28, 28))
MINE = mi_lab.MineConfig(iterations=2000, seed=0)


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num:02d} {name}: {detail}"


def _mnist_like(n: int):
    return synth_images(n, (28, 28), 10, 0.15, 7, 567.0)


# ---------------------------------------------------------------------------
# 1. masked sums decode to the exact ring sum of the survivors


def test_c01_secure_sum_exactness():
    t0 = time.time()
    spec = sa.QuantSpec(clip=0.125)
    rng = np.random.default_rng(0)
    trials = fails = 0

    def ring_sum(ring_rows, users):
        total = np.zeros(ring_rows[users[0]].shape, dtype=np.uint64)
        for u in users:
            total = (total + ring_rows[u]) % np.uint64(spec.modulus)
        return total

    for _ in range(1000):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(1, 65))
        users = list(range(n))
        table = sa.SeedTable(int(rng.integers(1 << 30)), users)
        ring = {i: sa.quantize(rng.uniform(-0.1, 0.1, d), spec)[0] for i in users}
        masked = [sa.mask(ring[i], i, [j for j in users if j != i], 0, table, spec)
                  for i in users]
        got = sa.decode_aggregate(masked, users, table, spec)
        trials += 1
        fails += not np.array_equal(got, ring_sum(ring, users))

    for n in range(2, 7):
        users = list(range(n))
        table = sa.SeedTable(1234 + n, users)
        vals = np.random.default_rng(n).uniform(-0.1, 0.1, size=(n, 8))
        ring = {i: sa.quantize(vals[i], spec)[0] for i in users}
        masked = {i: sa.mask(ring[i], i, [j for j in users if j != i], 0, table, spec)
                  for i in users}
        for k in range(1, n + 1):
            for surviving in combinations(users, k):
                got = sa.decode_aggregate([masked[i] for i in surviving],
                                          list(surviving), table, spec)
                trials += 1
                fails += not np.array_equal(got, ring_sum(ring, list(surviving)))

    took = time.time() - t0
    _verdict(1, "secure-sum exactness", fails == 0 and took < 60.0,
             f"{trials} trials, {fails} failures, {took:.1f}s")


# ---------------------------------------------------------------------------
# 2. masked coordinates are uniform on the ring across master seeds


def test_c02_mask_hiding_uniformity():
    t0 = time.time()
    d, n_seeds, bins = 256, 100_000, 64
    spec = sa.QuantSpec(clip=0.125)
    ring0, _ = sa.quantize(np.zeros(d), spec)
    counts = np.zeros((d, bins), dtype=np.int64)
    width = spec.modulus // bins
    for seed in range(n_seeds):
        table = sa.SeedTable(seed, [0, 1])
        masked = sa.mask(ring0, 0, [1], 0, table, spec)
        counts[np.arange(d), (masked.ring // width).astype(np.int64)] += 1
    chi2 = ((counts - n_seeds / bins) ** 2 / (n_seeds / bins)).sum(axis=1)
    p = stats.chi2.sf(chi2, bins - 1)
    frac = float((p > 0.01).mean())
    took = time.time() - t0
    _verdict(2, "mask hiding uniformity", frac >= 0.99 and took < 120.0,
             f"{frac:.2%} of {d} coordinates uniform at p>0.01, {took:.0f}s")


# ---------------------------------------------------------------------------
# 3. the MI estimator is calibrated on Gaussian pairs with known MI


def test_c03_mine_calibration():
    t0 = time.time()
    cfg = mi_lab.MineConfig(iterations=600, seed=0)
    worst = math.inf
    details = []
    ok = True
    for dim in (1, 5):
        for rho in (0.0, 0.5, 0.9):
            rng = np.random.default_rng(100 * dim + int(10 * rho))
            x = rng.standard_normal((5000, dim))
            z = rho * x + math.sqrt(1 - rho * rho) * rng.standard_normal((5000, dim))
            est = mi_lab.mine_estimate(x, z, cfg) / LN2
            true = -dim / 2 * math.log2(1 - rho * rho) if rho else 0.0
            tol = 0.05 if rho == 0.0 else max(0.05, 0.15 * true)
            ok &= abs(est - true) <= tol
            worst = min(worst, tol - abs(est - true))
            details.append(f"{dim}d rho={rho}: {est:.3f} vs {true:.3f}")
    took = time.time() - t0
    _verdict(3, "estimator calibration", ok and took < 600.0,
             f"{'; '.join(details)}; min margin {worst:+.3f} bits, {took:.0f}s")


# ---------------------------------------------------------------------------
# 4. every backward pass matches central finite differences


def test_c04_gradients_match_finite_differences():
    t0 = time.time()
    worst = {}

    rng = np.random.default_rng(1)
    e = 0.0
    for _ in range(100):
        b, i, o = (int(rng.integers(1, 6)) for _ in range(3))
        x = Tensor(rng.normal(size=(b, i)))
        w = Tensor(rng.normal(size=(i, o)) * 0.5)
        bias = Tensor(rng.normal(size=o) * 0.1)
        wsum = rng.normal(size=(b, o))

        def fn():
            tape = Tape()
            out = affine(tape, x, w, bias)
            tape.backward([(out, wsum)])
            return float((out.data * wsum).sum())

        e = max(e, grad_check(fn, [x, w, bias], eps=1e-6))
    worst["affine"] = e

    rng = np.random.default_rng(2)
    e = 0.0
    for _ in range(100):
        shape = tuple(int(rng.integers(1, 5)) for _ in range(2))
        # keep inputs off the kink so the subgradient is two-sided
        x = Tensor((0.1 + rng.uniform(0.1, 1.0, shape)) * rng.choice([-1.0, 1.0], shape))
        wsum = rng.normal(size=shape)

        def fn():
            tape = Tape()
            out = relu(tape, x)
            tape.backward([(out, wsum)])
            return float((out.data * wsum).sum())

        e = max(e, grad_check(fn, [x], eps=1e-6))
    worst["relu"] = e

    rng = np.random.default_rng(3)
    e = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 4)); cin = int(rng.integers(1, 3))
        cout = int(rng.integers(1, 4)); h = int(rng.integers(3, 7))
        k = int(rng.integers(1, min(3, h) + 1))
        stride = int(rng.integers(1, 3)); pad = int(rng.integers(0, 2))
        x = Tensor(rng.normal(size=(b, cin, h, h)))
        kern = Tensor(rng.normal(size=(cout, cin, k, k)) * 0.5)
        kb = Tensor(rng.normal(size=cout) * 0.1)
        out_shape = None
        wsum = None

        def fn():
            nonlocal wsum, out_shape
            tape = Tape()
            out = conv2d(tape, x, kern, kb, stride=stride, pad=pad)
            if out_shape != out.data.shape:
                out_shape = out.data.shape
                wsum = rng.normal(size=out_shape)
            tape.backward([(out, wsum)])
            return float((out.data * wsum).sum())

        e = max(e, grad_check(fn, [x, kern, kb], eps=1e-6))
    worst["conv2d"] = e

    rng = np.random.default_rng(4)
    e = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 3)); c = int(rng.integers(1, 3))
        h = int(rng.integers(4, 8)); size = int(rng.integers(2, 4))
        # distinct cell values keep the argmax stable under the probe step
        x = Tensor(0.05 * rng.permutation(b * c * h * h).reshape(b, c, h, h)
                   .astype(np.float64))
        out_shape = None
        wsum = None

        def fn():
            nonlocal wsum, out_shape
            tape = Tape()
            out = maxpool2d(tape, x, size)
            if out_shape != out.data.shape:
                out_shape = out.data.shape
                wsum = rng.normal(size=out_shape)
            tape.backward([(out, wsum)])
            return float((out.data * wsum).sum())

        e = max(e, grad_check(fn, [x], eps=1e-6))
    worst["maxpool2d"] = e

    rng = np.random.default_rng(5)
    e = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 5)); classes = int(rng.integers(2, 6))
        logits = Tensor(rng.normal(size=(b, classes)))
        labels = rng.integers(0, classes, size=b)

        def fn():
            tape = Tape()
            loss, dlogits = softmax_xent(tape, logits, labels)
            tape.backward([(logits, dlogits)])
            return loss

        e = max(e, grad_check(fn, [logits], eps=1e-6))
    worst["softmax_xent"] = e

    bad = {op: err for op, err in worst.items() if err >= 1e-4}
    took = time.time() - t0
    _verdict(4, "gradient correctness", not bad,
             "worst rel err " + ", ".join(f"{op}={err:.1e}" for op, err in worst.items())
             + f", {took:.0f}s")


# ---------------------------------------------------------------------------
# 5. bound arithmetic: exact value, reduction identities, monotonicity


def test_c05_bound_arithmetic():
    exact = bounds.per_round_case1(2, 1, 2, 0.0)
    ok = exact == 1.0
    detail = [f"case1(N=2,d*=2,C0=0)={exact}"]

    worst = 0.0
    for n, b, d, c0, t in ((2, 1, 2, 0.0, 1), (5, 32, 10, 1.5, 7),
                           (20, 128, 64, 0.25, 3)):
        per = bounds.per_round_case1(n, b, d, c0)
        pairs = (
            (bounds.dropout_collusion_bound(n, b, d, [bounds.case1_candidate(c0)]),
             per),
            (bounds.user_sampling_bound(n, n, t, b, d, c0),
             bounds.multi_round_bound(per, t)),
            (bounds.multi_round_bound(per, 1), per),
        )
        for got, want in pairs:
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    ok &= worst <= 1e-12
    detail.append(f"identity rel err {worst:.1e}")

    n_vals = [bounds.per_round_case1(n, 32, 8, 1.0) for n in range(2, 101)]
    b_vals = [bounds.per_round_case1(10, b, 8, 1.0) for b in range(1, 513)]
    mono = (all(a > b for a, b in zip(n_vals, n_vals[1:]))
            and all(a > b for a, b in zip(b_vals, b_vals[1:])))
    ok &= mono
    detail.append(f"N and B sweeps strictly decreasing: {mono}")
    _verdict(5, "bound arithmetic", ok, "; ".join(detail))


# ---------------------------------------------------------------------------
# shared leakage sweeps for 6, 7, and 9


def _case1_bound_for(dataset, model, n_users: int, batch_size: int) -> float:
    theta = flatten(model).values
    rng = fl_core.derive_rng(0, 12)
    idx = rng.choice(len(dataset), size=256, replace=False)
    grads = np.empty((len(idx), model.d))
    for row, i in enumerate(idx):
        images = model.prep_images(dataset.images[i:i + 1])
        _, grads[row] = model.loss_grad(theta, images, dataset.labels[i:i + 1])
    const = bounds.estimate_constants(grads, c_tilde=1.0)
    return bounds.per_round_case1(n_users, batch_size, const.d_star, const.c0)


def _round_cell(dataset, n_users: int, batch_size: int):
    model = build(LINEAR_28, 0)
    partition = partition_iid(dataset, n_users, 0)
    cfg = FLConfig(n_users=n_users, batch_size=batch_size, rounds=2, lr=0.5,
                   quant=QuantSpec(clip=0.125), seed=0)
    samples, _ = mi_lab.run_leakage_experiment(model, dataset, partition, cfg,
                                               0, (1,), 256)
    denom = mi_lab.normalization_bits(cfg, dataset, partition, 0)
    est = mi_lab.estimate_round_leakage(samples[1], MINE, denom, replicates=3,
                                        project_dim=8, project_seed=0)
    return {"n": n_users, "b": batch_size, "est": est,
            "bound": _case1_bound_for(dataset, model, n_users, batch_size)}


@pytest.fixture(scope="module")
def n_sweep_cells():
    ds = _mnist_like(2000)
    return [_round_cell(ds, n, 32) for n in (2, 5, 10, 20)]


@pytest.fixture(scope="module")
def b_sweep_cells():
    # 300 images per user so the largest batch is drawable
    ds = _mnist_like(3000)
    return [_round_cell(ds, 10, b) for b in (16, 64, 256)]


# ---------------------------------------------------------------------------
# 6. per-round leakage falls with the crowd size


def test_c06_leakage_falls_with_users(n_sweep_cells):
    mis = [c["est"].mi_bits for c in n_sweep_cells]
    ns = [c["n"] for c in n_sweep_cells]
    rho, _ = stats.spearmanr(ns, mis)
    decreasing = all(a > b for a, b in zip(mis, mis[1:]))
    slope = np.polyfit(np.log([n - 1 for n in ns]), np.log(mis), 1)[0]
    ok = decreasing and rho == -1.0 and -1.6 <= slope <= -0.4
    _verdict(6, "leakage falls with users", ok,
             "mi_bits " + "/".join(f"{m:.4f}" for m in mis)
             + f", spearman {rho:+.0f}, log-log slope {slope:.2f}")


# ---------------------------------------------------------------------------
# 7. normalized leakage falls with the batch size


def test_c07_normalized_leakage_falls_with_batch(b_sweep_cells):
    fracs = [c["est"].normalized for c in b_sweep_cells]
    decreasing = all(a > b for a, b in zip(fracs, fracs[1:]))
    _verdict(7, "normalized leakage falls with batch", decreasing,
             "normalized " + "/".join(f"{f:.2e}" for f in fracs)
             + " at B=16/64/256")


# ---------------------------------------------------------------------------
# 8. leakage accumulates linearly over rounds


def test_c08_accumulation_is_linear():
    t0 = time.time()
    ds = synth_images(240, (6, 6), 4, 0.15, 7, 36.0)
    model = build(ModelSpec(arch="linear", input_shape=(6, 6)), 0)
    partition = partition_iid(ds, 2, 0)
    cfg = FLConfig(n_users=2, batch_size=32, rounds=4, lr=0.5,
                   quant=QuantSpec(clip=0.125), seed=0)
    acc = mi_lab.collect_accumulative_samples(model, ds, partition, cfg, 0, 4,
                                              1536, max_images=len(partition[0]))
    denom = len(partition[0]) * ds.entropy_bits_per_image
    mis = []
    for t_rounds in (1, 2, 4):
        sliced = mi_lab.SampleSet(acc.x, acc.z[:, :model.d * t_rounds], -1, 0)
        est = mi_lab.estimate_accumulative(sliced, MINE, denom, replicates=3,
                                           project_dim=8, project_seed=0,
                                           round_width=model.d)
        mis.append(est.mi_bits)
    ts = np.array([1.0, 2.0, 4.0])
    ys = np.array(mis)
    slope = float(ts @ ys / (ts @ ts))
    r2 = 1.0 - float(((ys - slope * ts) ** 2).sum() / (ys ** 2).sum())
    increasing = mis[0] < mis[1] < mis[2]
    took = time.time() - t0
    _verdict(8, "accumulation is linear", increasing and slope > 0 and r2 > 0.85,
             "mi_bits " + "/".join(f"{m:.3f}" for m in mis)
             + f" at T=1/2/4, through-origin R2 {r2:.3f}, {took:.0f}s")


# ---------------------------------------------------------------------------
# 9. the analytic budget dominates every measured cell


def test_c09_bound_dominates_measurements(n_sweep_cells, b_sweep_cells):
    cells = n_sweep_cells + b_sweep_cells
    dominated = sum(c["bound"] >= c["est"].ci_high_bits for c in cells)
    frac = dominated / len(cells)
    _verdict(9, "bound dominates measurements", frac >= 0.95,
             f"{dominated}/{len(cells)} cells, "
             + "; ".join(f"N={c['n']} B={c['b']}: {c['bound']:.1f} vs "
                         f"{c['est'].ci_high_bits:.3f}" for c in cells))


# ---------------------------------------------------------------------------
# 10. gradient-match reconstruction degrades as users are added


def test_c10_reconstruction_degrades_with_users():
    t0 = time.time()
    ds = _mnist_like(2000)
    means = []
    for n in (1, 2, 5):
        scores_n = []
        for seed in range(5):
            model = build(LINEAR_28, 0)
            theta = flatten(model).values.copy()
            cfg = FLConfig(n_users=n, batch_size=1, rounds=1, lr=0.5,
                           quant=QuantSpec(clip=1.0), seed=seed)
            partition = partition_iid(ds, n, seed)
            table = fl_core.make_seed_table(cfg)
            everyone = tuple(range(n))
            _, agg, _, _, _ = fl_core.run_round(
                model, ds, partition, cfg, theta, 0, table,
                participants=everyone, survivors=everyone)
            rng = fl_core.derive_rng(seed, 13, n)
            result = adversary_lab.dlg_attack(model, theta, agg, 1, 2000, rng)
            truth_idx = fl_core.batch_indices_for(cfg, partition, 0, 0)
            truth = ds.images[truth_idx].reshape(result.images.shape)
            scores, _, _ = adversary_lab.match_and_score(truth, result.images)
            scores_n.append(float(scores.mean()))
        means.append(float(np.mean(scores_n)))
    ok = means[0] >= means[1] >= means[2] and means[0] > 30.0
    took = time.time() - t0
    _verdict(10, "reconstruction degrades with users", ok,
             "PSNR " + "/".join(f"{m:.1f}" for m in means)
             + f" dB at N=1/2/5, {took:.0f}s")


# ---------------------------------------------------------------------------
# 11. stronger noise lowers both leakage and accuracy


def _dp_config(path, n_users: int, rounds: int) -> str:
    path.write_text(
        "[experiment]\n"
        f"rounds = {rounds}\n"
        "lr = 0.5\n"
        "batch_size = 32\n"
        "seed = 0\n"
        "[dp]\n"
        "epsilon_grid = 5, 10, 5000\n"
        f"n_grid = {n_users}\n"
        "clip_norm = 1.0\n"
        "[mi]\n"
        "sample_rounds = 0\n"
        "k_samples = 256\n"
        "iterations = 2000\n"
        "replicates = 3\n"
        "project_dim = 8\n"
        "[sweep]\n"
        "seeds = 0\n",
        encoding="utf-8")
    return str(path)


def test_c11_dp_noise_lowers_leakage_and_accuracy(tmp_path):
    t0 = time.time()
    rows = []
    # per-N round counts keep each accuracy in the noise-responsive range
    for n, rounds in ((2, 1200), (10, 300)):
        out = tmp_path / f"dp{n}"
        rc = main(["dp-sweep", "--config",
                   _dp_config(tmp_path / f"dp{n}.ini", n, rounds),
                   "--out", str(out)])
        assert rc == 0
        rows.extend(read_report(out / "dp_sweep.csv"))

    delta = 1.0 / 1200.0
    ok = True
    details = []
    for n in (2, 10):
        by_eps = {float(r["epsilon"]): r for r in rows
                  if r["n_users"] == str(n)}
        accs = [float(by_eps[e]["accuracy"]) for e in (5000.0, 10.0, 5.0)]
        mis = [float(by_eps[e]["mi_bits"]) for e in (5000.0, 10.0, 5.0)]
        ok &= accs[0] >= accs[1] >= accs[2]
        ok &= mis[0] >= mis[1] >= mis[2]
        details.append(f"N={n} acc {'/'.join(f'{a:.3f}' for a in accs)}"
                       f" mi {'/'.join(f'{m:.3f}' for m in mis)}")
        for e in (5000.0, 10.0, 5.0):
            want = math.sqrt(2.0 * math.log(1.25 / delta)) / e
            ok &= abs(float(by_eps[e]["sigma_dp"]) - want) <= 1e-12
    ok &= abs(adversary_lab.dp_sigma(10.0, delta) - 0.38244530032647284) <= 1e-12
    took = time.time() - t0
    _verdict(11, "noise lowers leakage and accuracy", ok,
             "; ".join(details) + f"; sigma column exact, {took:.0f}s")


# ---------------------------------------------------------------------------
# 12. the smoothing divergence identity and its Monte-Carlo check


def test_c12_smoothing_divergence_identity():
    cov = np.eye(3)
    at_one = bounds.lemma1_check(1.0, cov, bounds.gaussian_entropy_nats(cov))
    ok = abs(at_one) <= 1e-10

    sigma = math.e
    analytic = bounds.lemma1_check(sigma, np.eye(1),
                                   bounds.gaussian_entropy_nats(np.eye(1)))
    rng = np.random.default_rng(3)
    xs = rng.normal(size=2_000_000)
    log_q = -0.5 * xs ** 2 - 0.5 * math.log(2.0 * math.pi)
    log_p = -0.5 * sigma * xs ** 2 - 0.5 * math.log(2.0 * math.pi / sigma)
    mc = float(np.mean(log_q - log_p))
    rel = abs(analytic - mc) / abs(mc)
    ok &= rel <= 0.02
    _verdict(12, "smoothing divergence identity", ok,
             f"sigma=1 residual {at_one:.1e}; sigma=e: {analytic:.5f} vs "
             f"Monte-Carlo {mc:.5f} ({rel:.2%})")


# ---------------------------------------------------------------------------
# 13. identical config and seeds reproduce reports byte for byte


def _smoke_config(path) -> str:
    path.write_text(
        "[experiment]\n"
        "n_users = 3\nbatch_size = 4\nrounds = 2\nlr = 0.1\nseed = 0\n"
        "[data]\n"
        "synth_n = 96\nsynth_height = 6\nsynth_width = 6\n"
        "synth_classes = 3\nsubset = 96\n"
        "[secure_agg]\nclip = 4.0\n"
        "[mi]\n"
        "k_samples = 10\nsample_rounds = 0\nreplicates = 3\niterations = 25\n"
        "[bounds]\ngrad_samples = 48\nn_grid = 2,3\nb_grid = 4\n"
        "[sweep]\nn_grid = 2,3\nseeds = 0\n",
        encoding="utf-8")
    return str(path)


def test_c13_reports_are_deterministic(tmp_path):
    cfg = _smoke_config(tmp_path / "smoke.ini")
    pairs = []
    for command, report in (("train", "train.csv"), ("leakage", "leakage.csv")):
        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{command}_{tag}"
            assert main([command, "--config", cfg, "--out", str(out)]) == 0
            blobs.append((out / report).read_bytes())
        pairs.append((command, blobs[0] == blobs[1]))
    ok = all(same for _, same in pairs)
    _verdict(13, "reports are deterministic", ok,
             ", ".join(f"{cmd} rerun byte-identical: {same}" for cmd, same in pairs))
