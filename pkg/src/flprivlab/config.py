"""Experiment configuration: sectioned key-value files round-tripped through
one flat dataclass.

Every key is declared in _SCHEMA with its section, type, and default;
unknown sections or keys are configuration errors, as is any cross-field
violation. parse(serialize(cfg)) == cfg holds field for field.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

from .data_io import (CIFAR10_ENTROPY_BITS, MNIST_ENTROPY_BITS, Dataset,
                      load_cifar10, load_mnist, synth_images)
from .fl_core import PROTOCOLS, FLConfig
from .mi_lab import MineConfig
from .model_zoo import ARCHS, ModelSpec
from .secure_agg import QuantSpec
from .adversary_lab import DPParams

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "parse_config",
           "serialize_config", "save_config", "load_dataset", "model_spec_for",
           "fl_config_for", "mine_config_for", "dp_params_for"]


class ConfigError(ValueError):
    """Unusable configuration; the message lists every offending field."""


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    name: str = "experiment"
    protocol: str = "fedsgd"
    n_users: int = 10
    sample_k: int | None = None
    batch_size: int = 32
    rounds: int = 5
    local_epochs: int = 1
    lr: float = 0.5
    mu_prox: float = 0.0
    dropout_prob: float = 0.0
    model: str = "linear"
    seed: int = 0
    target_user: int = 0
    # [data]
    data_kind: str = "synth"
    images_path: str = ""
    labels_path: str = ""
    cifar_paths: tuple[str, ...] = ()
    subset: int = 2000
    entropy_bits: float = 0.0
    synth_n: int = 2000
    synth_height: int = 28
    synth_width: int = 28
    synth_channels: int = 1
    synth_classes: int = 10
    synth_noise: float = 0.15
    synth_seed: int = 7
    # [secure_agg]
    sa_enabled: bool = True
    sa_scale: float = 65536.0
    sa_modulus: int = 2 ** 32
    sa_clip: float = 0.125
    # [dp]
    dp_enabled: bool = False
    dp_epsilon: float = 10.0
    dp_delta: float = 1.0 / 1200.0
    dp_clip_norm: float = 1.0
    dp_epsilon_grid: tuple[float, ...] = (5.0, 10.0, 5000.0)
    dp_n_grid: tuple[int, ...] = (2, 10)
    # [mi]
    mi_k_samples: int = 256
    mi_sample_rounds: tuple[int, ...] = (1,)
    mi_replicates: int = 3
    mi_iterations: int = 1000
    mi_step_size: float = 1e-3
    mi_ema_decay: float = 0.99
    mi_hidden: tuple[int, ...] = (100, 100)
    mi_seed: int = 0
    mi_project_dim: int = 8
    accumulative_rounds: tuple[int, ...] = ()
    accumulative_runs: int = 128
    encode_images: int = 64
    # [bounds]
    c_tilde: float = 1.0
    eigen_threshold: float = 1e-8
    grad_samples: int = 256
    sigma_grid: tuple[float, ...] = ()
    bounds_n_grid: tuple[int, ...] = (1, 2, 5, 10, 20)
    bounds_b_grid: tuple[int, ...] = (32,)
    # [sweep]
    sweep_n_grid: tuple[int, ...] = (2, 5, 10, 20)
    sweep_b_grid: tuple[int, ...] = ()
    sweep_seeds: tuple[int, ...] = (0,)
    # [attack]
    attack_iterations: int = 300
    attack_step_size: float = 1.0
    attack_batch: int = 0
    attack_n_grid: tuple[int, ...] = (1, 2, 5)
    attack_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    attack_max_restarts: int = 4


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_opt_int(raw: str) -> int | None:
    raw = raw.strip()
    return None if raw == "" else int(raw)


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    return tuple(int(v) for v in raw.split(",")) if raw else ()


def _parse_float_list(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    return tuple(float(v) for v in raw.split(",")) if raw else ()


def _parse_str_list(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    return tuple(v.strip() for v in raw.split(",") if v.strip()) if raw else ()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


# (section, key, field, parser)
_SCHEMA = [
    ("experiment", "name", "name", str),
    ("experiment", "protocol", "protocol", str),
    ("experiment", "n_users", "n_users", int),
    ("experiment", "sample_k", "sample_k", _parse_opt_int),
    ("experiment", "batch_size", "batch_size", int),
    ("experiment", "rounds", "rounds", int),
    ("experiment", "local_epochs", "local_epochs", int),
    ("experiment", "lr", "lr", float),
    ("experiment", "mu_prox", "mu_prox", float),
    ("experiment", "dropout_prob", "dropout_prob", float),
    ("experiment", "model", "model", str),
    ("experiment", "seed", "seed", int),
    ("experiment", "target_user", "target_user", int),
    ("data", "kind", "data_kind", str),
    ("data", "images_path", "images_path", str),
    ("data", "labels_path", "labels_path", str),
    ("data", "cifar_paths", "cifar_paths", _parse_str_list),
    ("data", "subset", "subset", int),
    ("data", "entropy_bits", "entropy_bits", float),
    ("data", "synth_n", "synth_n", int),
    ("data", "synth_height", "synth_height", int),
    ("data", "synth_width", "synth_width", int),
    ("data", "synth_channels", "synth_channels", int),
    ("data", "synth_classes", "synth_classes", int),
    ("data", "synth_noise", "synth_noise", float),
    ("data", "synth_seed", "synth_seed", int),
    ("secure_agg", "enabled", "sa_enabled", _parse_bool),
    ("secure_agg", "scale", "sa_scale", float),
    ("secure_agg", "modulus", "sa_modulus", int),
    ("secure_agg", "clip", "sa_clip", float),
    ("dp", "enabled", "dp_enabled", _parse_bool),
    ("dp", "epsilon", "dp_epsilon", float),
    ("dp", "delta", "dp_delta", float),
    ("dp", "clip_norm", "dp_clip_norm", float),
    ("dp", "epsilon_grid", "dp_epsilon_grid", _parse_float_list),
    ("dp", "n_grid", "dp_n_grid", _parse_int_list),
    ("mi", "k_samples", "mi_k_samples", int),
    ("mi", "sample_rounds", "mi_sample_rounds", _parse_int_list),
    ("mi", "replicates", "mi_replicates", int),
    ("mi", "iterations", "mi_iterations", int),
    ("mi", "step_size", "mi_step_size", float),
    ("mi", "ema_decay", "mi_ema_decay", float),
    ("mi", "hidden", "mi_hidden", _parse_int_list),
    ("mi", "seed", "mi_seed", int),
    ("mi", "project_dim", "mi_project_dim", int),
    ("mi", "accumulative_rounds", "accumulative_rounds", _parse_int_list),
    ("mi", "accumulative_runs", "accumulative_runs", int),
    ("mi", "encode_images", "encode_images", int),
    ("bounds", "c_tilde", "c_tilde", float),
    ("bounds", "eigen_threshold", "eigen_threshold", float),
    ("bounds", "grad_samples", "grad_samples", int),
    ("bounds", "sigma_grid", "sigma_grid", _parse_float_list),
    ("bounds", "n_grid", "bounds_n_grid", _parse_int_list),
    ("bounds", "b_grid", "bounds_b_grid", _parse_int_list),
    ("sweep", "n_grid", "sweep_n_grid", _parse_int_list),
    ("sweep", "b_grid", "sweep_b_grid", _parse_int_list),
    ("sweep", "seeds", "sweep_seeds", _parse_int_list),
    ("attack", "iterations", "attack_iterations", int),
    ("attack", "step_size", "attack_step_size", float),
    ("attack", "batch_size", "attack_batch", int),
    ("attack", "n_grid", "attack_n_grid", _parse_int_list),
    ("attack", "seeds", "attack_seeds", _parse_int_list),
    ("attack", "max_restarts", "attack_max_restarts", int),
]

_KNOWN = {(s, k) for s, k, _, _ in _SCHEMA}
_SECTIONS = tuple(dict.fromkeys(s for s, _, _, _ in _SCHEMA))


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    problems = []
    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        for key in parser[section]:
            if (section, key) not in _KNOWN:
                problems.append(f"unknown key {key!r} in [{section}]")
    if problems:
        raise ConfigError("; ".join(problems))

    values = {}
    for section, key, field_name, cast in _SCHEMA:
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                values[field_name] = cast(raw)
            except ValueError as exc:
                problems.append(f"[{section}] {key} = {raw!r}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in _SECTIONS:
        parser.add_section(section)
    for section, key, field_name, _ in _SCHEMA:
        parser.set(section, key, _fmt(getattr(cfg, field_name)))
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))


def validate_config(cfg: ExperimentConfig) -> None:
    bad = []
    if cfg.protocol not in PROTOCOLS:
        bad.append(f"protocol {cfg.protocol!r} not in {PROTOCOLS}")
    if cfg.model not in ARCHS:
        bad.append(f"model {cfg.model!r} not in {ARCHS}")
    if cfg.data_kind not in ("mnist", "cifar10", "synth"):
        bad.append(f"data kind {cfg.data_kind!r} not in ('mnist', 'cifar10', 'synth')")
    if cfg.n_users < 1:
        bad.append(f"n_users must be >= 1, got {cfg.n_users}")
    if cfg.sample_k is not None and not (1 <= cfg.sample_k <= cfg.n_users):
        bad.append(f"sample_k {cfg.sample_k} outside 1..{cfg.n_users}")
    if cfg.batch_size < 1:
        bad.append(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.rounds < 0:
        bad.append(f"rounds must be >= 0, got {cfg.rounds}")
    if cfg.local_epochs < 1:
        bad.append(f"local_epochs must be >= 1, got {cfg.local_epochs}")
    if cfg.lr <= 0:
        bad.append(f"lr must be positive, got {cfg.lr}")
    if cfg.mu_prox < 0:
        bad.append(f"mu_prox must be >= 0, got {cfg.mu_prox}")
    if not (0.0 <= cfg.dropout_prob < 1.0):
        bad.append(f"dropout_prob must be in [0, 1), got {cfg.dropout_prob}")
    if not (0 <= cfg.target_user < cfg.n_users):
        bad.append(f"target_user {cfg.target_user} outside 0..{cfg.n_users - 1}")
    if cfg.data_kind == "mnist" and (not cfg.images_path or not cfg.labels_path):
        bad.append("mnist data needs images_path and labels_path")
    if cfg.data_kind == "cifar10" and not cfg.cifar_paths:
        bad.append("cifar10 data needs cifar_paths")
    if cfg.data_kind == "synth":
        if cfg.synth_n < cfg.synth_classes:
            bad.append(f"synth_n {cfg.synth_n} below synth_classes {cfg.synth_classes}")
        if cfg.synth_channels not in (1, 3):
            bad.append(f"synth_channels must be 1 or 3, got {cfg.synth_channels}")
    if cfg.subset < 0:
        bad.append(f"subset must be >= 0, got {cfg.subset}")
    if cfg.entropy_bits < 0:
        bad.append(f"entropy_bits must be >= 0 (0 = kind default), got {cfg.entropy_bits}")
    if cfg.sa_scale <= 0 or cfg.sa_clip <= 0 or cfg.sa_modulus < 2:
        bad.append(f"bad secure_agg numbers: scale={cfg.sa_scale} "
                   f"modulus={cfg.sa_modulus} clip={cfg.sa_clip}")
    elif cfg.sa_enabled and cfg.n_users * cfg.sa_scale * cfg.sa_clip >= cfg.sa_modulus / 2:
        bad.append(f"secure_agg wrap risk: {cfg.n_users} users * scale {cfg.sa_scale:g} "
                   f"* clip {cfg.sa_clip:g} >= modulus/2")
    if cfg.dp_epsilon <= 0 or any(e <= 0 for e in cfg.dp_epsilon_grid):
        bad.append("dp epsilon values must be positive")
    if not (0.0 < cfg.dp_delta < 1.0):
        bad.append(f"dp delta must be in (0, 1), got {cfg.dp_delta}")
    if cfg.dp_clip_norm <= 0:
        bad.append(f"dp clip_norm must be positive, got {cfg.dp_clip_norm}")
    if cfg.mi_k_samples < 2:
        bad.append(f"mi k_samples must be >= 2, got {cfg.mi_k_samples}")
    if cfg.mi_replicates < 3:
        bad.append(f"mi replicates must be >= 3, got {cfg.mi_replicates}")
    if any(r < 0 for r in cfg.mi_sample_rounds):
        bad.append(f"mi sample_rounds must be non-negative, got {cfg.mi_sample_rounds}")
    if len(cfg.mi_hidden) != 2 or any(h < 1 for h in cfg.mi_hidden):
        bad.append(f"mi hidden must be two positive widths, got {cfg.mi_hidden}")
    if cfg.mi_iterations < 1:
        bad.append(f"mi iterations must be >= 1, got {cfg.mi_iterations}")
    if cfg.mi_step_size <= 0:
        bad.append(f"mi step_size must be positive, got {cfg.mi_step_size}")
    if not (0.0 < cfg.mi_ema_decay < 1.0):
        bad.append(f"mi ema_decay must be in (0, 1), got {cfg.mi_ema_decay}")
    if cfg.mi_project_dim < 0:
        bad.append(f"mi project_dim must be >= 0 (0 = off), got {cfg.mi_project_dim}")
    if any(t < 1 for t in cfg.accumulative_rounds):
        bad.append(f"accumulative_rounds must be >= 1, got {cfg.accumulative_rounds}")
    if cfg.accumulative_runs < 2:
        bad.append(f"accumulative_runs must be >= 2, got {cfg.accumulative_runs}")
    if cfg.encode_images < 1:
        bad.append(f"encode_images must be >= 1, got {cfg.encode_images}")
    if cfg.c_tilde <= 0:
        bad.append(f"c_tilde must be positive, got {cfg.c_tilde}")
    if not (0 < cfg.eigen_threshold < 1):
        bad.append(f"eigen_threshold must be in (0, 1), got {cfg.eigen_threshold}")
    if cfg.grad_samples < 2:
        bad.append(f"grad_samples must be >= 2, got {cfg.grad_samples}")
    if any(s <= 0 for s in cfg.sigma_grid):
        bad.append("sigma_grid values must be positive")
    if any(n < 1 for n in cfg.bounds_n_grid) or not cfg.bounds_n_grid:
        bad.append(f"bounds n_grid must be non-empty positive ints, got {cfg.bounds_n_grid}")
    if any(b < 1 for b in cfg.bounds_b_grid) or not cfg.bounds_b_grid:
        bad.append(f"bounds b_grid must be non-empty positive ints, got {cfg.bounds_b_grid}")
    if any(n < 2 for n in cfg.sweep_n_grid) or not cfg.sweep_n_grid:
        bad.append(f"sweep n_grid must be >= 2 users per cell, got {cfg.sweep_n_grid}")
    if any(b < 1 for b in cfg.sweep_b_grid):
        bad.append(f"sweep b_grid must be positive, got {cfg.sweep_b_grid}")
    if not cfg.sweep_seeds:
        bad.append("sweep seeds must be non-empty")
    if any(n < 1 for n in cfg.dp_n_grid) or not cfg.dp_n_grid:
        bad.append(f"dp n_grid must be non-empty positive ints, got {cfg.dp_n_grid}")
    if cfg.attack_iterations < 1:
        bad.append(f"attack iterations must be >= 1, got {cfg.attack_iterations}")
    if cfg.attack_step_size <= 0:
        bad.append(f"attack step_size must be positive, got {cfg.attack_step_size}")
    if cfg.attack_batch < 0:
        bad.append(f"attack batch_size must be >= 0 (0 = experiment batch), "
                   f"got {cfg.attack_batch}")
    if any(n < 1 for n in cfg.attack_n_grid) or not cfg.attack_n_grid:
        bad.append(f"attack n_grid must be non-empty positive ints, got {cfg.attack_n_grid}")
    if not cfg.attack_seeds:
        bad.append("attack seeds must be non-empty")
    if cfg.attack_max_restarts < 0:
        bad.append(f"attack max_restarts must be >= 0, got {cfg.attack_max_restarts}")
    if bad:
        raise ConfigError("; ".join(bad))


# ---------------------------------------------------------------------------
# Builders


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    try:
        return _load_dataset(cfg)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from exc


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_kind == "mnist":
        ds = load_mnist(cfg.images_path, cfg.labels_path)
    elif cfg.data_kind == "cifar10":
        ds = load_cifar10(cfg.cifar_paths)
    else:
        shape = ((cfg.synth_height, cfg.synth_width) if cfg.synth_channels == 1
                 else (cfg.synth_channels, cfg.synth_height, cfg.synth_width))
        default_bits = CIFAR10_ENTROPY_BITS if cfg.synth_channels == 3 else MNIST_ENTROPY_BITS
        ds = synth_images(cfg.synth_n, shape, cfg.synth_classes, cfg.synth_noise,
                          cfg.synth_seed, default_bits)
    if cfg.entropy_bits > 0:
        ds.entropy_bits_per_image = cfg.entropy_bits
    if cfg.subset and cfg.subset < len(ds):
        ds = ds.subset(range(cfg.subset))
    return ds


def model_spec_for(cfg: ExperimentConfig, dataset: Dataset) -> ModelSpec:
    shape = dataset.sample_shape
    if cfg.model == "cnn" and len(shape) == 2:
        shape = (1,) + shape
    classes = dataset.class_count
    if classes < 2:
        raise ConfigError(f"dataset has {classes} classes; need >= 2 to train")
    return ModelSpec(cfg.model, tuple(shape), classes)


def fl_config_for(cfg: ExperimentConfig, n_users: int | None = None,
                  batch_size: int | None = None, seed: int | None = None,
                  rounds: int | None = None) -> FLConfig:
    n = cfg.n_users if n_users is None else n_users
    return FLConfig(
        n_users=n,
        batch_size=cfg.batch_size if batch_size is None else batch_size,
        rounds=cfg.rounds if rounds is None else rounds,
        lr=cfg.lr,
        protocol=cfg.protocol,
        local_epochs=cfg.local_epochs,
        mu_prox=cfg.mu_prox,
        sample_k=cfg.sample_k if cfg.sample_k is None or cfg.sample_k <= n else n,
        dropout_prob=cfg.dropout_prob,
        sa_enabled=cfg.sa_enabled,
        quant=QuantSpec(scale=cfg.sa_scale, modulus=cfg.sa_modulus, clip=cfg.sa_clip),
        seed=cfg.seed if seed is None else seed,
    )


def mine_config_for(cfg: ExperimentConfig, seed: int | None = None) -> MineConfig:
    return MineConfig(
        hidden=tuple(cfg.mi_hidden),
        iterations=cfg.mi_iterations,
        step_size=cfg.mi_step_size,
        ema_decay=cfg.mi_ema_decay,
        seed=cfg.mi_seed if seed is None else seed,
    )


def dp_params_for(cfg: ExperimentConfig, epsilon: float | None = None) -> DPParams:
    return DPParams(epsilon=cfg.dp_epsilon if epsilon is None else epsilon,
                    delta=cfg.dp_delta, clip_norm=cfg.dp_clip_norm)
