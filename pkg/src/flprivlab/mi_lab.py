"""Neural mutual-information estimation for federated updates.

The estimator maximizes the Donsker-Varadhan objective
mean_k T(x_k, z_k) - log(mean_k exp(T(x_k, zbar_k))) with zbar a within-batch
shuffle of z. The statistic network is two ReLU hidden layers of 100 on the
concatenated pair, trained full-batch with Adam at 1e-3. The gradient of the
log term uses an exponential moving average of the denominator so the
mini-max bias correction from the MINE recipe carries over; all exponentials
live in log space.

Sampling procedures: per-round pairs condition every repetition on the same
incoming model state and let the final repetition advance the model;
accumulative pairs rerun training end to end with the target user's dataset
redrawn per run.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import fl_core, nn_core
from .data_io import Dataset
from .fl_core import FLConfig, RoundLog
from .model_zoo import Model, evaluate, flatten
from .nn_core import Tape, Tensor

__all__ = [
    "MineConfig",
    "LeakageEstimate",
    "SampleSet",
    "EstimatorNumericsError",
    "MemoryGuardError",
    "mine_estimate",
    "random_project",
    "estimate_round_leakage",
    "estimate_accumulative",
    "collect_round_samples",
    "run_leakage_experiment",
    "collect_accumulative_samples",
    "normalization_bits",
    "encode_local_dataset",
    "save_sample_set",
    "load_sample_set",
]

LN2 = math.log(2.0)

# z coordinates past this need an explicit projection before estimation.
MEMORY_CAP_COORDS = 2_000_000

_TAG_ACCUM = 7


class EstimatorNumericsError(FloatingPointError):
    """Statistic network left the finite range during training."""


class MemoryGuardError(ValueError):
    """Input dimensionality too large; reduce with random_project first."""


@dataclass(frozen=True)
class MineConfig:
    hidden: tuple[int, int] = (100, 100)
    iterations: int = 1000
    step_size: float = 1e-3
    ema_decay: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden must be two positive layer widths, got {self.hidden}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError(f"ema_decay must be in (0, 1), got {self.ema_decay}")


@dataclass(frozen=True)
class LeakageEstimate:
    """MI in bits with a 95% confidence interval over estimator seeds.

    mi_bits and normalized are clamped at 0 for reporting; the raw replicate
    values stay available in replicate_bits.
    """

    mi_bits: float
    ci_low_bits: float
    ci_high_bits: float
    replicate_bits: tuple[float, ...]
    denominator_bits: float
    normalized: float
    n_samples: int


@dataclass
class SampleSet:
    """Paired MI samples: x[k] is the secret view, z[k] the server view."""

    x: np.ndarray
    z: np.ndarray
    round_idx: int = -1
    target_user: int = -1

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.x.ndim != 2 or self.z.ndim != 2 or len(self.x) != len(self.z):
            raise ValueError(f"paired 2-d arrays required, got x{self.x.shape} z{self.z.shape}")

    def __len__(self) -> int:
        return len(self.x)


def _standardize(a: np.ndarray) -> np.ndarray:
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (a - mu) / sd


class _Adam:
    def __init__(self, tensors, step_size: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = tensors
        self.step_size = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in tensors]
        self.v = [np.zeros_like(t.data) for t in tensors]
        self.t = 0

    def ascend(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.tensors):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data += self.step_size * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)
            p.zero_grad()


def _statistic_net(in_dim: int, hidden: tuple[int, int], rng: np.random.Generator):
    dims = [in_dim, hidden[0], hidden[1], 1]
    tensors = []
    for i in range(3):
        bound = 1.0 / math.sqrt(dims[i])
        tensors.append(Tensor(rng.uniform(-bound, bound, (dims[i], dims[i + 1]))))
        tensors.append(Tensor(rng.uniform(-bound, bound, (dims[i + 1],))))
    return tensors


def _net_forward(tape: Tape, inp: Tensor, tensors) -> Tensor:
    w0, b0, w1, b1, w2, b2 = tensors
    h = nn_core.relu(tape, nn_core.affine(tape, inp, w0, b0))
    h = nn_core.relu(tape, nn_core.affine(tape, h, w1, b1))
    return nn_core.affine(tape, h, w2, b2)


def mine_estimate(x: np.ndarray, z: np.ndarray, cfg: MineConfig) -> float:
    """Donsker-Varadhan lower bound on I(x; z) in nats.

    Inputs are standardized per coordinate (an invertible affine recode, so
    the target quantity is unchanged); zero-variance coordinates pass
    through, which makes fully deterministic inputs come out at exactly 0.

    The rows are split half and half by a seeded permutation: the statistic
    net trains on one half and the bound is scored on the other, so sample
    noise the net memorizes never enters the estimate. Returns the best
    moving average the held-out objective reaches over the run; past that
    point the net is fitting train noise and the held-out score only decays.
    Fewer than four rows cannot be split and score on the training rows
    instead.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.ndim != 2 or z.ndim != 2 or len(x) != len(z):
        raise ValueError(f"paired 2-d arrays required, got x{x.shape} z{z.shape}")
    k = len(x)
    if k < 2:
        raise ValueError(f"need at least 2 sample pairs, got {k}")
    if not (np.isfinite(x).all() and np.isfinite(z).all()):
        raise EstimatorNumericsError("sample pairs contain non-finite values")
    if x.shape[1] + z.shape[1] > MEMORY_CAP_COORDS:
        raise MemoryGuardError(
            f"pair dimension {x.shape[1]} + {z.shape[1]} exceeds "
            f"{MEMORY_CAP_COORDS}; reduce with random_project")

    xs = _standardize(x)
    zs = _standardize(z)
    if not (xs.any() and zs.any()):
        return 0.0  # a constant side carries no information
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6D696E65]))
    net = _statistic_net(xs.shape[1] + zs.shape[1], cfg.hidden, rng)
    adam = _Adam(net, cfg.step_size)

    if k >= 4:
        order = rng.permutation(k)
        train, held = order[k // 2:], order[:k // 2]
    else:
        train = held = np.arange(k)
    xt, zt = xs[train], zs[train]
    xh, zh = xs[held], zs[held]
    joint_t = np.concatenate([xt, zt], axis=1)
    joint_h = np.concatenate([xh, zh], axis=1)
    kt, kh = len(train), len(held)
    log_kt, log_kh = math.log(kt), math.log(kh)
    log_ema = None
    obj_ema = None
    best = -math.inf
    for _ in range(cfg.iterations):
        perm = rng.permutation(kt)
        batch = np.concatenate([joint_t, np.concatenate([xt, zt[perm]], axis=1)],
                               axis=0)
        tape = Tape()
        out = _net_forward(tape, Tensor(batch), net)
        t_all = out.data[:, 0]
        t_joint, t_marg = t_all[:kt], t_all[kt:]
        log_mean_exp = float(np.logaddexp.reduce(t_marg) - log_kt)
        if not np.isfinite(log_mean_exp):
            raise EstimatorNumericsError("objective left the finite range")

        hperm = rng.permutation(kh)
        hbatch = np.concatenate([joint_h, np.concatenate([xh, zh[hperm]], axis=1)],
                                axis=0)
        t_held = _net_forward(Tape(), Tensor(hbatch), net).data[:, 0]
        objective = (float(t_held[:kh].mean())
                     - float(np.logaddexp.reduce(t_held[kh:]) - log_kh))
        if not np.isfinite(objective):
            raise EstimatorNumericsError("objective left the finite range")
        if log_ema is None:
            log_ema = log_mean_exp
            obj_ema = objective
        else:
            log_ema = np.logaddexp(math.log(cfg.ema_decay) + log_ema,
                                   math.log1p(-cfg.ema_decay) + log_mean_exp)
            obj_ema = cfg.ema_decay * obj_ema + (1.0 - cfg.ema_decay) * objective
        best = max(best, obj_ema)

        seed_grad = np.empty((2 * kt, 1))
        seed_grad[:kt, 0] = 1.0 / kt
        seed_grad[kt:, 0] = -np.exp(t_marg - log_ema) / kt
        tape.backward([(out, seed_grad)])
        adam.ascend()
        if not all(np.isfinite(p.data).all() for p in net):
            raise EstimatorNumericsError("statistic network parameters diverged")
    return float(best)


def random_project(vectors: np.ndarray, target_dim: int, seed: int,
                   orthogonal: bool = False) -> np.ndarray:
    """Fixed seeded Gaussian projection to target_dim columns.

    orthogonal=True orthonormalizes the projection columns; with
    target_dim == d that is an invertible rotation, which is what the MI
    invariance checks use.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError(f"vectors must be [n, d], got shape {vectors.shape}")
    d = vectors.shape[1]
    if not (1 <= target_dim <= d):
        raise ValueError(f"target_dim {target_dim} outside 1..{d}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70726F6A]))
    g = rng.standard_normal((d, target_dim))
    if orthogonal:
        q, r = np.linalg.qr(g)
        g = q * np.sign(np.diag(r))
    else:
        g = g / math.sqrt(target_dim)
    return vectors @ g


def _estimate(x: np.ndarray, z: np.ndarray, cfg: MineConfig, denominator_bits: float,
              replicates: int, project_dim: int | None, project_seed: int) -> LeakageEstimate:
    if replicates < 3:
        raise ValueError(f"need >= 3 estimator replicates for a CI, got {replicates}")
    if not denominator_bits > 0:
        raise ValueError(f"denominator_bits must be positive, got {denominator_bits}")
    if project_dim is not None:
        # one seed for both sides: equal-width pairs get the same matrix,
        # which keeps an additive x-in-z relation coordinate-aligned
        if x.shape[1] > project_dim:
            x = random_project(x, project_dim, project_seed)
        if z.shape[1] > project_dim:
            z = random_project(z, project_dim, project_seed)
    values = np.array([
        mine_estimate(x, z, replace(cfg, seed=cfg.seed + r)) / LN2
        for r in range(replicates)
    ])
    mean = float(values.mean())
    sem = float(values.std(ddof=1) / math.sqrt(replicates))
    tq = float(stats.t.ppf(0.975, replicates - 1))
    mi_bits = max(0.0, mean)
    normalized = min(1.0, max(0.0, mi_bits / denominator_bits))
    return LeakageEstimate(mi_bits, mean - tq * sem, mean + tq * sem,
                           tuple(float(v) for v in values), denominator_bits,
                           normalized, len(x))


def estimate_round_leakage(samples: SampleSet, cfg: MineConfig, denominator_bits: float,
                           replicates: int = 3, project_dim: int | None = None,
                           project_seed: int = 0) -> LeakageEstimate:
    """Per-round leakage I(x_i; aggregate) in bits with a seed-replicate CI."""
    return _estimate(samples.x, samples.z, cfg, denominator_bits, replicates,
                     project_dim, project_seed)


def estimate_accumulative(samples: SampleSet, cfg: MineConfig, denominator_bits: float,
                          replicates: int = 3, project_dim: int | None = None,
                          project_seed: int = 0,
                          round_width: int | None = None) -> LeakageEstimate:
    """Accumulative leakage I(D_i; concatenated aggregates) in bits.

    z rows are the d*T concatenation; anything beyond the memory cap must
    come in pre-projected or with project_dim set.

    round_width averages the T consecutive blocks of that width into one
    per-round mean before estimation. The mean is a deterministic function
    of the transcript, so the result stays a lower bound, and it keeps z at
    the fingerprint width: round noise shrinks with T while the dataset
    signal persists, which is what makes the accumulation visible at all.
    """
    z = samples.z
    if round_width is not None:
        if z.shape[1] % round_width:
            raise ValueError(f"z width {z.shape[1]} is not a multiple of "
                             f"round_width {round_width}")
        z = z.reshape(len(z), -1, round_width).mean(axis=1)
    if z.shape[1] > MEMORY_CAP_COORDS and project_dim is None:
        raise MemoryGuardError(
            f"accumulative z dimension {z.shape[1]} exceeds "
            f"{MEMORY_CAP_COORDS}; pass project_dim or pre-project")
    return _estimate(samples.x, z, cfg, denominator_bits, replicates,
                     project_dim, project_seed)


# ---------------------------------------------------------------------------
# Sampling procedures


def normalization_bits(cfg: FLConfig, dataset: Dataset, partition, target_user: int) -> float:
    """Denominator for the normalized leakage fraction: the entropy of what
    the update exposes. FedSGD exposes one mini-batch, FedAvg/FedProx expose
    the whole local dataset."""
    per_image = dataset.entropy_bits_per_image
    if cfg.protocol == "fedsgd":
        return cfg.batch_size * per_image
    return len(partition[target_user]) * per_image


def collect_round_samples(model: Model, dataset: Dataset, partition, cfg: FLConfig,
                          theta: np.ndarray, round_idx: int, table, k_samples: int,
                          target_user: int, post_aggregate=None,
                          ) -> tuple[SampleSet, np.ndarray]:
    """Draw k_samples (x_target, sum-of-updates) pairs for one round.

    Every repetition starts from the same incoming theta and redraws every
    user's mini-batches; the final repetition's aggregate is returned so the
    caller can advance the global model with it.
    """
    if not (0 <= target_user < cfg.n_users):
        raise ValueError(f"target_user {target_user} outside 0..{cfg.n_users - 1}")
    if k_samples < 1:
        raise ValueError(f"k_samples must be >= 1, got {k_samples}")
    participants = tuple(range(cfg.n_users))
    xs = np.empty((k_samples, theta.size))
    zs = np.empty((k_samples, theta.size))
    advance = None
    for rep in range(k_samples):
        updates, aggregate, _, survivors, _ = fl_core.run_round(
            model, dataset, partition, cfg, theta, round_idx, table,
            rep=rep, participants=participants, survivors=participants,
            post_aggregate=post_aggregate)
        by_user = {u.user_id: u for u in updates}
        xs[rep] = by_user[target_user].values
        zs[rep] = aggregate * len(survivors)
        advance = aggregate
    return SampleSet(xs, zs, round_idx, target_user), advance


def run_leakage_experiment(model: Model, dataset: Dataset, partition, cfg: FLConfig,
                           target_user: int, sample_rounds, k_samples: int,
                           post_aggregate=None,
                           ) -> tuple[dict[int, SampleSet], list[RoundLog]]:
    """Full training run that pauses at sample_rounds to draw MI pairs.

    MI rounds run with full participation and no dropout so the target's
    update is always present; other rounds follow the config. Returns the
    per-round sample sets and the round logs."""
    sample_rounds = set(int(r) for r in sample_rounds)
    bad = [r for r in sample_rounds if not (0 <= r < cfg.rounds)]
    if bad:
        raise ValueError(f"sample rounds {sorted(bad)} outside 0..{cfg.rounds - 1}")
    table = fl_core.make_seed_table(cfg)
    theta = flatten(model).values.copy()
    samples: dict[int, SampleSet] = {}
    logs: list[RoundLog] = []
    for t in range(cfg.rounds):
        if t in sample_rounds:
            sset, aggregate = collect_round_samples(
                model, dataset, partition, cfg, theta, t, table, k_samples,
                target_user, post_aggregate)
            samples[t] = sset
            participants = tuple(range(cfg.n_users))
            theta_new = theta - cfg.lr * aggregate
            logs.append(RoundLog(t, theta, theta_new, (), aggregate, participants,
                                 participants, evaluate(model, theta_new, dataset), 0))
        else:
            updates, aggregate, participants, survivors, clipped = fl_core.run_round(
                model, dataset, partition, cfg, theta, t, table,
                post_aggregate=post_aggregate)
            theta_new = theta - cfg.lr * aggregate if survivors else theta.copy()
            logs.append(RoundLog(t, theta, theta_new, updates, aggregate, participants,
                                 survivors, evaluate(model, theta_new, dataset), clipped))
        theta = logs[-1].params_after
    return samples, logs


def encode_local_dataset(dataset: Dataset, indices, max_images: int = 64,
                         model: Model | None = None,
                         params: np.ndarray | None = None) -> np.ndarray:
    """Summary vector for a local dataset, over its first
    min(max_images, |D_i|) indices.

    Without a model: the per-class mean image, concatenated class-major,
    zeros for absent classes. Softmax-family gradients expose
    class-conditional pixel averages, so these are the coordinates along
    which round aggregates actually vary with the local data.

    With a model and parameter vector: the full-batch gradient over the
    selected images at those parameters. This fingerprint lives in the same
    coordinate system as the transcribed aggregates, so a projection applied
    to both sides keeps matching coordinates matched."""
    idx = np.asarray(indices)[:max_images]
    if model is not None:
        if params is None:
            raise ValueError("model given without a parameter vector")
        images = model.prep_images(dataset.images[idx])
        _, grad = model.loss_grad(params, images, dataset.labels[idx])
        return grad
    width = int(np.prod(dataset.sample_shape))
    flat = dataset.images[idx].reshape(len(idx), -1)
    labels = dataset.labels[idx]
    out = np.zeros(dataset.class_count * width)
    for c in range(dataset.class_count):
        rows = flat[labels == c]
        if len(rows):
            out[c * width:(c + 1) * width] = rows.mean(axis=0)
    return out


def collect_accumulative_samples(model: Model, dataset: Dataset, partition,
                                 cfg: FLConfig, target_user: int, total_rounds: int,
                                 k_runs: int, max_images: int = 64,
                                 post_aggregate=None) -> SampleSet:
    """K full training re-runs with the target user's dataset redrawn each run.

    x[k] is the redrawn dataset's gradient fingerprint at the shared initial
    parameters; z[k] concatenates the per-round aggregate sums over
    total_rounds. Slicing z columns to d*T gives the T-round prefix, so one
    collection serves a whole T grid.
    """
    if not (0 <= target_user < cfg.n_users):
        raise ValueError(f"target_user {target_user} outside 0..{cfg.n_users - 1}")
    if total_rounds < 1 or k_runs < 1:
        raise ValueError(f"need total_rounds >= 1 and k_runs >= 1, "
                         f"got {total_rounds}, {k_runs}")
    table = fl_core.make_seed_table(cfg)
    theta0 = flatten(model).values.copy()
    local_size = len(partition[target_user])
    participants = tuple(range(cfg.n_users))
    d = theta0.size
    xs = np.empty((k_runs, d))
    zs = np.empty((k_runs, d * total_rounds))
    for run in range(k_runs):
        redraw_rng = fl_core.derive_rng(cfg.seed, _TAG_ACCUM, run)
        target_idx = np.sort(redraw_rng.choice(len(dataset), size=local_size, replace=False))
        part_k = list(partition)
        part_k[target_user] = target_idx
        xs[run] = encode_local_dataset(dataset, target_idx, max_images,
                                       model=model, params=theta0)
        theta = theta0.copy()
        for t in range(total_rounds):
            _, aggregate, _, survivors, _ = fl_core.run_round(
                model, dataset, part_k, cfg, theta, t, table,
                rep=run, participants=participants, survivors=participants,
                post_aggregate=post_aggregate)
            zs[run, t * d:(t + 1) * d] = aggregate * len(survivors)
            theta = theta - cfg.lr * aggregate
    return SampleSet(xs, zs, -1, target_user)


# ---------------------------------------------------------------------------
# Sample-set container format: little-endian header (u32 K, u32 d_x, u32 d_z,
# i32 round_idx, i32 target_user) then the x and z payloads as little-endian
# f64, row-major.

_SS_HEADER = struct.Struct("<IIIii")


def save_sample_set(samples: SampleSet) -> bytes:
    k = len(samples)
    header = _SS_HEADER.pack(k, samples.x.shape[1], samples.z.shape[1],
                             samples.round_idx, samples.target_user)
    return (header
            + samples.x.astype("<f8").tobytes()
            + samples.z.astype("<f8").tobytes())


def load_sample_set(payload: bytes) -> SampleSet:
    if len(payload) < _SS_HEADER.size:
        raise ValueError(f"sample-set payload too short: {len(payload)} bytes")
    k, dx, dz, round_idx, target_user = _SS_HEADER.unpack(payload[:_SS_HEADER.size])
    expected = _SS_HEADER.size + 8 * k * (dx + dz)
    if len(payload) != expected:
        raise ValueError(f"sample-set payload length {len(payload)}, expected {expected}")
    lo = _SS_HEADER.size
    x = np.frombuffer(payload[lo:lo + 8 * k * dx], dtype="<f8").reshape(k, dx)
    z = np.frombuffer(payload[lo + 8 * k * dx:], dtype="<f8").reshape(k, dz)
    return SampleSet(x.copy(), z.copy(), round_idx, target_user)
