"""Federated training loop: FedSGD, FedAvg, FedProx.

Every protocol reports an update x_i such that the server rule
theta(t+1) = theta(t) - lr * mean_i(x_i) applies uniformly: FedSGD sends the
mini-batch gradient, FedAvg/FedProx send (theta - theta_local) / lr after E
local epochs. Aggregation goes through the secure_agg ring codec when
enabled, so the server only ever sees the decoded mean. All randomness is
derived from the config seed through tagged SeedSequence streams; a rerun of
the same config replays bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import secure_agg
from .data_io import Dataset, sample_batch
from .model_zoo import Model, evaluate, flatten
from .secure_agg import MaskedUpdate, QuantSpec, SeedTable

__all__ = [
    "FLConfig",
    "ModelUpdate",
    "RoundLog",
    "PROTOCOLS",
    "derive_rng",
    "sample_clients",
    "local_update",
    "batch_indices_for",
    "server_step",
    "aggregate_updates",
    "run_round",
    "make_seed_table",
    "train",
]

PROTOCOLS = ("fedsgd", "fedavg", "fedprox")

# SeedSequence domain tags so independent streams never collide.
_TAG_BATCH = 1
_TAG_PARTICIPATION = 2
_TAG_DROPOUT = 3
_TAG_MASK = 4
_TAG_POST = 5


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(t) for t in tags]]))


@dataclass(frozen=True)
class FLConfig:
    n_users: int
    batch_size: int
    rounds: int
    lr: float
    protocol: str = "fedsgd"
    local_epochs: int = 1
    mu_prox: float = 0.0
    sample_k: int | None = None
    dropout_prob: float = 0.0
    sa_enabled: bool = True
    quant: QuantSpec = field(default_factory=lambda: QuantSpec(clip=0.125))
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError(f"n_users must be >= 1, got {self.n_users}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}, expected one of {PROTOCOLS}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.sample_k is not None and not (1 <= self.sample_k <= self.n_users):
            raise ValueError(f"sample_k {self.sample_k} outside 1..{self.n_users}")
        if not (0.0 <= self.dropout_prob < 1.0):
            raise ValueError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.mu_prox < 0:
            raise ValueError(f"mu_prox must be >= 0, got {self.mu_prox}")
        if self.sa_enabled:
            self.quant.check_wrap(self.n_users)

    @property
    def k(self) -> int:
        return self.n_users if self.sample_k is None else self.sample_k


@dataclass(frozen=True)
class ModelUpdate:
    user_id: int
    round_idx: int
    values: np.ndarray


@dataclass(frozen=True)
class RoundLog:
    round_idx: int
    params_before: np.ndarray
    params_after: np.ndarray
    updates: tuple[ModelUpdate, ...]
    aggregate: np.ndarray
    participants: tuple[int, ...]
    survivors: tuple[int, ...]
    accuracy: float
    clipped_coords: int


def sample_clients(n_users: int, k: int, round_idx: int, seed: int) -> tuple[int, ...]:
    """Uniform k-subset of users, deterministic per (seed, round)."""
    if not (1 <= k <= n_users):
        raise ValueError(f"k {k} outside 1..{n_users}")
    rng = derive_rng(seed, _TAG_PARTICIPATION, round_idx)
    return tuple(sorted(int(u) for u in rng.choice(n_users, size=k, replace=False)))


def local_update(model: Model, theta: np.ndarray, dataset: Dataset, indices: np.ndarray,
                 cfg: FLConfig, rng: np.random.Generator, user_id: int,
                 round_idx: int) -> ModelUpdate:
    """One user's round contribution under the configured protocol."""
    if cfg.protocol == "fedsgd":
        batch = sample_batch(indices, cfg.batch_size, rng)
        images = model.prep_images(dataset.images[batch])
        _, grad = model.loss_grad(theta, images, dataset.labels[batch])
        return ModelUpdate(user_id, round_idx, grad)

    if cfg.batch_size > indices.size:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds user {user_id}'s "
                         f"local dataset size {indices.size}")
    theta_local = theta.copy()
    n_batches = indices.size // cfg.batch_size
    for _ in range(cfg.local_epochs):
        order = rng.permutation(indices)
        for b in range(n_batches):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            images = model.prep_images(dataset.images[batch])
            extra = None
            if cfg.protocol == "fedprox" and cfg.mu_prox != 0.0:
                extra = cfg.mu_prox * (theta_local - theta)
            _, grad = model.loss_grad(theta_local, images, dataset.labels[batch],
                                      extra_grad=extra)
            theta_local = theta_local - cfg.lr * grad
    return ModelUpdate(user_id, round_idx, (theta - theta_local) / cfg.lr)


def batch_indices_for(cfg: FLConfig, partition, user: int, round_idx: int,
                      rep: int = 0) -> np.ndarray:
    """The mini-batch a FedSGD user drew in a given round/repetition.

    Replays the same seeded stream local_update used, so attack harnesses can
    recover the ground-truth batch. Only meaningful for fedsgd, where the
    batch draw is the stream's first use."""
    if cfg.protocol != "fedsgd":
        raise ValueError(f"batch replay is only defined for fedsgd, not {cfg.protocol}")
    rng = derive_rng(cfg.seed, _TAG_BATCH, round_idx, rep, user)
    return sample_batch(partition[user], cfg.batch_size, rng)


def server_step(theta: np.ndarray, updates, lr: float) -> np.ndarray:
    """theta - lr * mean(updates). Updates must share a round and a length."""
    updates = list(updates)
    if not updates:
        raise ValueError("server_step needs at least one update")
    rounds = {u.round_idx for u in updates}
    if len(rounds) != 1:
        raise ValueError(f"updates from mixed rounds {sorted(rounds)}")
    lengths = {u.values.size for u in updates}
    if lengths != {theta.size}:
        raise ValueError(f"update lengths {sorted(lengths)} vs parameter size {theta.size}")
    mean = np.mean([u.values for u in updates], axis=0)
    return theta - lr * mean


def aggregate_updates(updates, survivors, participants, round_idx: int,
                      cfg: FLConfig, table: SeedTable | None) -> tuple[np.ndarray, int]:
    """Mean update over survivors, via the SA ring when enabled.

    Returns (mean vector, clipped coordinate count). With SA on, each
    survivor's clear update is quantized and masked against every other
    participant; the decode strips the dropped users' mask halves.
    """
    updates = list(updates)
    if not updates:
        raise ValueError("no surviving updates to aggregate")
    if not cfg.sa_enabled:
        return np.mean([u.values for u in updates], axis=0), 0
    assert table is not None
    clipped_total = 0
    messages: list[MaskedUpdate] = []
    for u in updates:
        ring, clipped = secure_agg.quantize(u.values, cfg.quant)
        clipped_total += clipped
        peers = tuple(p for p in participants if p != u.user_id)
        messages.append(secure_agg.mask(ring, u.user_id, peers, round_idx, table, cfg.quant))
    ring_sum = secure_agg.decode_aggregate(messages, survivors, table, cfg.quant)
    return secure_agg.dequantize(ring_sum, len(updates), cfg.quant), clipped_total


def run_round(model: Model, dataset: Dataset, partition, cfg: FLConfig,
              theta: np.ndarray, round_idx: int, table: SeedTable | None,
              rep: int = 0, participants: tuple[int, ...] | None = None,
              survivors: tuple[int, ...] | None = None,
              post_aggregate: Callable[[np.ndarray, int, int], np.ndarray] | None = None,
              ) -> tuple[tuple[ModelUpdate, ...], np.ndarray, tuple[int, ...], tuple[int, ...], int]:
    """Compute one round's updates and decoded aggregate without advancing theta.

    rep tags the batch streams so repeated draws of the same round (the MI
    sampling procedure) see fresh batches while staying reproducible.
    """
    if participants is None:
        participants = sample_clients(cfg.n_users, cfg.k, round_idx, cfg.seed)
    if survivors is None:
        if cfg.dropout_prob > 0.0:
            drop_rng = derive_rng(cfg.seed, _TAG_DROPOUT, round_idx, rep)
            keep = drop_rng.random(len(participants)) >= cfg.dropout_prob
            survivors = tuple(u for u, k in zip(participants, keep) if k)
        else:
            survivors = participants
    if not survivors:
        zero = np.zeros_like(theta)
        return (), zero, participants, survivors, 0

    updates = tuple(
        local_update(model, theta, dataset, partition[u], cfg,
                     derive_rng(cfg.seed, _TAG_BATCH, round_idx, rep, u),
                     u, round_idx)
        for u in survivors
    )
    aggregate, clipped = aggregate_updates(updates, survivors, participants,
                                           round_idx, cfg, table)
    if post_aggregate is not None:
        aggregate = post_aggregate(aggregate, round_idx, rep)
    return updates, aggregate, participants, survivors, clipped


def make_seed_table(cfg: FLConfig) -> SeedTable | None:
    if not cfg.sa_enabled:
        return None
    return SeedTable(int(np.random.SeedSequence([cfg.seed, _TAG_MASK])
                         .generate_state(1, dtype=np.uint64)[0]),
                     range(cfg.n_users))


def train(model: Model, dataset: Dataset, partition, cfg: FLConfig,
          eval_dataset: Dataset | None = None,
          post_aggregate: Callable[[np.ndarray, int, int], np.ndarray] | None = None,
          ) -> Iterator[RoundLog]:
    """Run cfg.rounds federated rounds, yielding one RoundLog per round.

    partition: list of per-user index arrays (one per user id 0..n_users-1).
    Accuracy is evaluated on eval_dataset (default: the training dataset).
    The starting point is the model's current parameters and the model is
    left holding the final ones; rebuild or reset it to repeat a run.
    """
    if len(partition) != cfg.n_users:
        raise ValueError(f"partition has {len(partition)} users, config says {cfg.n_users}")
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    table = make_seed_table(cfg)
    theta = flatten(model).values.copy()
    for t in range(cfg.rounds):
        updates, aggregate, participants, survivors, clipped = run_round(
            model, dataset, partition, cfg, theta, t, table,
            post_aggregate=post_aggregate)
        theta_new = theta - cfg.lr * aggregate if survivors else theta.copy()
        accuracy = evaluate(model, theta_new, eval_dataset)
        yield RoundLog(t, theta, theta_new, updates, aggregate, participants,
                       survivors, accuracy, clipped)
        theta = theta_new
