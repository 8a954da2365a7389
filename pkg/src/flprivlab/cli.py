"""Command-line driver.

Subcommands: train, leakage, bounds, attack, dp-sweep, demo-counterexample.
Each takes --config (sectioned key-value file), --out (report directory),
--seed (master seed override) and --jobs (sweep-cell process pool). Exit
codes: 0 success, 2 configuration error, 1 runtime failure. All outputs are
deterministic functions of the config, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adversary_lab, bounds, fl_core, mi_lab, report
from .adversary_lab import DPParams
from .bounds import DegenerateGradientsError
from .config import (ConfigError, ExperimentConfig, dp_params_for, fl_config_for,
                     load_config, load_dataset, mine_config_for, model_spec_for)
from .data_io import Dataset, partition_iid
from .fl_core import FLConfig
from .model_zoo import Model, build, flatten

__all__ = ["main"]

_TAG_DP_NOISE = 11
_TAG_GRAD_SAMPLE = 12
_TAG_ATTACK = 13

COMMANDS = ("train", "leakage", "bounds", "attack", "dp-sweep", "demo-counterexample")


def _dp_hook(params: DPParams, seed: int):
    def hook(vec: np.ndarray, round_idx: int, rep: int) -> np.ndarray:
        rng = fl_core.derive_rng(seed, _TAG_DP_NOISE, round_idx, rep)
        return adversary_lab.clip_and_noise(vec, params, rng)
    return hook


def _base_row(cfg: ExperimentConfig, flcfg: FLConfig, model: Model, seed: int) -> dict:
    return {
        "experiment": cfg.name,
        "protocol": flcfg.protocol,
        "n_users": flcfg.n_users,
        "batch_size": flcfg.batch_size,
        "local_epochs": flcfg.local_epochs,
        "d": model.d,
        "seed": seed,
    }


def _sample_gradients(model: Model, theta: np.ndarray, dataset: Dataset,
                      count: int, seed: int) -> np.ndarray:
    """Per-example gradients at theta for a seeded sample of examples."""
    rng = fl_core.derive_rng(seed, _TAG_GRAD_SAMPLE)
    count = min(count, len(dataset))
    idx = rng.choice(len(dataset), size=count, replace=False)
    grads = np.empty((count, model.d))
    for row, i in enumerate(idx):
        images = model.prep_images(dataset.images[i:i + 1])
        _, grads[row] = model.loss_grad(theta, images, dataset.labels[i:i + 1])
    return grads


def _bound_cells(cfg: ExperimentConfig, n_users: int, batch_size: int,
                 model: Model, theta: np.ndarray, dataset: Dataset, seed: int) -> dict:
    grads = _sample_gradients(model, theta, dataset, cfg.grad_samples, seed)
    try:
        est = bounds.estimate_constants(grads, c_tilde=cfg.c_tilde,
                                        eigen_threshold=cfg.eigen_threshold)
    except DegenerateGradientsError:
        return {"d_star": 0}
    cells: dict = {"d_star": est.d_star}
    if n_users < 2:
        cells["bound_case1_bits"] = "undefined"
        cells["bound_case2_bits"] = "undefined" if cfg.sigma_grid else None
        return cells
    cells["bound_case1_bits"] = bounds.per_round_case1(n_users, batch_size,
                                                       est.d_star, est.c0)
    if cfg.sigma_grid:
        cells["bound_case2_bits"] = min(
            bounds.per_round_case2(n_users, batch_size, est.d_star, s,
                                   est.h_g_nats, est.logdet_nats)
            for s in cfg.sigma_grid)
    return cells


def _run_cells(worker, cells, jobs: int):
    if jobs <= 1 or len(cells) <= 1:
        return [worker(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, cells))


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig, outdir: Path, jobs: int) -> None:
    dataset = load_dataset(cfg)
    model = build(model_spec_for(cfg, dataset), cfg.seed)
    flcfg = fl_config_for(cfg)
    partition = partition_iid(dataset, flcfg.n_users, cfg.seed)
    post = _dp_hook(dp_params_for(cfg), cfg.seed) if cfg.dp_enabled else None
    rows = []
    for log in fl_core.train(model, dataset, partition, flcfg, post_aggregate=post):
        row = _base_row(cfg, flcfg, model, cfg.seed)
        row.update(round=log.round_idx, accuracy=log.accuracy)
        if cfg.dp_enabled:
            row.update(epsilon=cfg.dp_epsilon, sigma_dp=dp_params_for(cfg).sigma)
        rows.append(row)
    report.write_report(outdir / "train.csv", rows)


# ---------------------------------------------------------------------------
# leakage


def _leakage_cell(args) -> list[dict]:
    cfg, n_users, batch_size, seed = args
    dataset = load_dataset(cfg)
    spec = model_spec_for(cfg, dataset)
    model = build(spec, seed)
    flcfg = fl_config_for(cfg, n_users=n_users, batch_size=batch_size, seed=seed)
    partition = partition_iid(dataset, n_users, seed)
    post = _dp_hook(dp_params_for(cfg), seed) if cfg.dp_enabled else None
    target = min(cfg.target_user, n_users - 1)
    samples, logs = mi_lab.run_leakage_experiment(
        model, dataset, partition, flcfg, target, cfg.mi_sample_rounds,
        cfg.mi_k_samples, post)
    denom = mi_lab.normalization_bits(flcfg, dataset, partition, target)
    project = cfg.mi_project_dim or None
    rows = []
    for t in sorted(samples):
        est = mi_lab.estimate_round_leakage(
            samples[t], mine_config_for(cfg), denom,
            replicates=cfg.mi_replicates, project_dim=project, project_seed=seed)
        row = _base_row(cfg, flcfg, model, seed)
        row.update(round=t,
                   mi_bits=est.mi_bits, mi_normalized=est.normalized,
                   ci_low_bits=est.ci_low_bits, ci_high_bits=est.ci_high_bits,
                   accuracy=logs[-1].accuracy)
        row.update(_bound_cells(cfg, n_users, batch_size, model,
                                logs[t].params_before, dataset, seed))
        rows.append(row)

    if cfg.accumulative_rounds:
        fresh = build(spec, seed)
        total = max(cfg.accumulative_rounds)
        acc = mi_lab.collect_accumulative_samples(
            fresh, dataset, partition, flcfg, target, total,
            cfg.accumulative_runs, cfg.encode_images, post)
        denom_acc = len(partition[target]) * dataset.entropy_bits_per_image
        for t_rounds in cfg.accumulative_rounds:
            sliced = mi_lab.SampleSet(acc.x, acc.z[:, :model.d * t_rounds],
                                      -1, target)
            est = mi_lab.estimate_accumulative(
                sliced, mine_config_for(cfg), denom_acc,
                replicates=cfg.mi_replicates, project_dim=project,
                project_seed=seed + t_rounds, round_width=model.d)
            row = _base_row(cfg, flcfg, model, seed)
            row["experiment"] = f"{cfg.name}-accum"
            row.update(round=t_rounds, mi_bits=est.mi_bits,
                       mi_normalized=est.normalized,
                       ci_low_bits=est.ci_low_bits, ci_high_bits=est.ci_high_bits)
            rows.append(row)
    return rows


def cmd_leakage(cfg: ExperimentConfig, outdir: Path, jobs: int) -> None:
    if any(r >= cfg.rounds for r in cfg.mi_sample_rounds):
        raise ConfigError(f"mi sample_rounds {cfg.mi_sample_rounds} outside "
                          f"0..{cfg.rounds - 1}")
    b_grid = cfg.sweep_b_grid or (cfg.batch_size,)
    cells = [(cfg, n, b, s) for n in cfg.sweep_n_grid for b in b_grid
             for s in cfg.sweep_seeds]
    rows = [row for cell_rows in _run_cells(_leakage_cell, cells, jobs)
            for row in cell_rows]
    report.write_report(outdir / "leakage.csv", rows)


# ---------------------------------------------------------------------------
# bounds


def cmd_bounds(cfg: ExperimentConfig, outdir: Path, jobs: int) -> None:
    dataset = load_dataset(cfg)
    model = build(model_spec_for(cfg, dataset), cfg.seed)
    theta = flatten(model).values.copy()
    rows = []
    for n in cfg.bounds_n_grid:
        for b in cfg.bounds_b_grid:
            flcfg = fl_config_for(cfg, n_users=max(n, 1), batch_size=b)
            row = _base_row(cfg, flcfg, model, cfg.seed)
            row["n_users"] = n
            row.update(_bound_cells(cfg, n, b, model, theta, dataset, cfg.seed))
            rows.append(row)
            if cfg.rounds > 1 and n >= 2:
                total = dict(row)
                total["round"] = cfg.rounds
                for col in ("bound_case1_bits", "bound_case2_bits"):
                    if isinstance(row.get(col), float):
                        total[col] = bounds.multi_round_bound(row[col], cfg.rounds)
                rows.append(total)
    if cfg.sample_k is not None and cfg.sample_k >= 2 and cfg.rounds >= 1:
        grads = _sample_gradients(model, theta, dataset, cfg.grad_samples, cfg.seed)
        try:
            est = bounds.estimate_constants(grads, c_tilde=cfg.c_tilde,
                                            eigen_threshold=cfg.eigen_threshold)
            flcfg = fl_config_for(cfg)
            row = _base_row(cfg, flcfg, model, cfg.seed)
            row["experiment"] = f"{cfg.name}-sampling"
            row.update(round=cfg.rounds, d_star=est.d_star,
                       bound_case1_bits=bounds.user_sampling_bound(
                           cfg.n_users, cfg.sample_k, cfg.rounds,
                           cfg.batch_size, est.d_star, est.c0))
            rows.append(row)
        except DegenerateGradientsError:
            pass
    report.write_report(outdir / "bounds.csv", rows)


# ---------------------------------------------------------------------------
# attack


def _to_pnm(image: np.ndarray) -> bytes:
    """P5 (grey [h,w]) or P6 (colour [3,h,w]) binary image in [0,1]."""
    raw = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if raw.ndim == 2:
        return b"P5\n%d %d\n255\n" % (raw.shape[1], raw.shape[0]) + raw.tobytes()
    if raw.ndim == 3 and raw.shape[0] == 3:
        interleaved = np.moveaxis(raw, 0, 2)
        return b"P6\n%d %d\n255\n" % (raw.shape[2], raw.shape[1]) + interleaved.tobytes()
    raise ValueError(f"cannot render image of shape {image.shape}")


def _attack_cell(args) -> tuple[dict, dict[str, bytes]]:
    cfg, n_users, seed = args
    dataset = load_dataset(cfg)
    spec = model_spec_for(cfg, dataset)
    model = build(spec, cfg.seed)
    theta = flatten(model).values.copy()
    batch = cfg.attack_batch or cfg.batch_size
    flcfg = fl_config_for(cfg, n_users=n_users, batch_size=batch, seed=seed)
    partition = partition_iid(dataset, n_users, seed)
    table = fl_core.make_seed_table(flcfg)
    everyone = tuple(range(n_users))
    _, aggregate, _, _, _ = fl_core.run_round(
        model, dataset, partition, flcfg, theta, 0, table,
        participants=everyone, survivors=everyone)
    rng = fl_core.derive_rng(seed, _TAG_ATTACK, n_users)
    result = adversary_lab.dlg_attack(
        model, theta, aggregate, batch, cfg.attack_iterations, rng,
        step_size=cfg.attack_step_size, max_restarts=cfg.attack_max_restarts)
    target = min(cfg.target_user, n_users - 1)
    truth_idx = fl_core.batch_indices_for(flcfg, partition, target, 0)
    truth = dataset.images[truth_idx].reshape(result.images.shape)
    scores, exact, _ = adversary_lab.match_and_score(truth, result.images)
    result.psnr_db, result.exact = scores, exact

    row = _base_row(cfg, flcfg, model, seed)
    row.update(round=0, psnr_mean_db=float(scores.mean()))
    files = {}
    for i in range(len(truth)):
        stem = f"attack_n{n_users}_seed{seed}_img{i}"
        files[f"{stem}_true.pnm"] = _to_pnm(truth[i])
        files[f"{stem}_recon.pnm"] = _to_pnm(result.images[i])
        files[f"{stem}_recon.f64"] = result.images[i].astype("<f8").tobytes()
    return row, files


def cmd_attack(cfg: ExperimentConfig, outdir: Path, jobs: int) -> None:
    if cfg.protocol != "fedsgd":
        raise ConfigError(f"the attack command replays fedsgd batches; "
                          f"configured protocol is {cfg.protocol!r}")
    cells = [(cfg, n, s) for n in cfg.attack_n_grid for s in cfg.attack_seeds]
    results = _run_cells(_attack_cell, cells, jobs)
    rows = []
    for row, files in results:
        rows.append(row)
        for name, payload in files.items():
            (outdir / name).write_bytes(payload)
    report.write_report(outdir / "attack.csv", rows)


# ---------------------------------------------------------------------------
# dp-sweep


def _dp_cell(args) -> list[dict]:
    cfg, n_users, epsilon, seed = args
    dataset = load_dataset(cfg)
    spec = model_spec_for(cfg, dataset)
    flcfg = fl_config_for(cfg, n_users=n_users, seed=seed)
    partition = partition_iid(dataset, n_users, seed)
    params = dp_params_for(cfg, epsilon)
    post = _dp_hook(params, seed)

    model = build(spec, seed)
    final_acc = None
    for log in fl_core.train(model, dataset, partition, flcfg, post_aggregate=post):
        final_acc = log.accuracy

    sample_rounds = tuple(r for r in cfg.mi_sample_rounds if r < cfg.rounds) or (0,)
    probe_cfg = fl_config_for(cfg, n_users=n_users, seed=seed,
                              rounds=max(sample_rounds) + 1)
    fresh = build(spec, seed)
    samples, _ = mi_lab.run_leakage_experiment(
        fresh, dataset, partition, probe_cfg, min(cfg.target_user, n_users - 1),
        sample_rounds, cfg.mi_k_samples, post)
    denom = mi_lab.normalization_bits(flcfg, dataset, partition,
                                      min(cfg.target_user, n_users - 1))
    project = cfg.mi_project_dim or None
    rows = []
    for t in sorted(samples):
        est = mi_lab.estimate_round_leakage(
            samples[t], mine_config_for(cfg), denom,
            replicates=cfg.mi_replicates, project_dim=project, project_seed=seed)
        row = _base_row(cfg, flcfg, build(spec, seed), seed)
        row.update(round=t, epsilon=epsilon, sigma_dp=params.sigma,
                   accuracy=final_acc, mi_bits=est.mi_bits,
                   mi_normalized=est.normalized,
                   ci_low_bits=est.ci_low_bits, ci_high_bits=est.ci_high_bits)
        rows.append(row)
    return rows


def cmd_dp_sweep(cfg: ExperimentConfig, outdir: Path, jobs: int) -> None:
    cells = [(cfg, n, e, s) for n in cfg.dp_n_grid for e in cfg.dp_epsilon_grid
             for s in cfg.sweep_seeds]
    rows = [row for cell_rows in _run_cells(_dp_cell, cells, jobs)
            for row in cell_rows]
    report.write_report(outdir / "dp_sweep.csv", rows)


# ---------------------------------------------------------------------------
# demo-counterexample


def cmd_demo_counterexample(cfg: ExperimentConfig, outdir: Path, jobs: int) -> None:
    main_run = adversary_lab.sparsity_counterexample(seed=cfg.seed,
                                                     in_span_control=False)
    control = adversary_lab.sparsity_counterexample(seed=cfg.seed,
                                                    in_span_control=True)
    with open(outdir / "counterexample.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schema_version", "construction", "trials", "accuracy",
                         "distinguishing_coord"])
        for tag, rep in (("disjoint_support", main_run), ("in_span_control", control)):
            writer.writerow([report.SCHEMA_VERSION, tag, rep.trials,
                             report.format_cell(rep.accuracy),
                             rep.distinguishing_coord])
    lines = []
    for tag, rep in (("disjoint support", main_run), ("in-span control", control)):
        lines.append(f"== {tag}: detector reads coordinate {rep.distinguishing_coord}, "
                     f"accuracy {rep.accuracy:.3f} over {rep.trials} trials")
        lines.append(rep.table())
        lines.append("")
    (outdir / "counterexample.txt").write_text("\n".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------


_DISPATCH = {
    "train": cmd_train,
    "leakage": cmd_leakage,
    "bounds": cmd_bounds,
    "attack": cmd_attack,
    "dp-sweep": cmd_dp_sweep,
    "demo-counterexample": cmd_demo_counterexample,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flprivlab",
        description="federated-learning privacy laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="sectioned key-value config file")
        p.add_argument("--out", required=True, help="output directory for reports")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--jobs", type=int, default=1, help="sweep-cell process pool size")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    outdir = Path(args.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        _DISPATCH[args.command](cfg, outdir, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
