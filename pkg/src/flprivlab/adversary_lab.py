"""Adversary-side tooling: Gaussian-mechanism DP, gradient inversion, and
the sparse-support counterexample.

The DLG attack minimizes ||grad_theta L(dummy) - observed||^2 over dummy
inputs and soft labels with plain gradient descent. The objective's input
gradient is a gradient-of-a-gradient; with a first-order tape it is realized
as a Hessian-vector product by central differences over a parameter-space
perturbation along v = 2 (g - g*), costing two extra first-order passes per
iteration and working for every zoo architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core
from .model_zoo import Model
from .nn_core import Tape, Tensor

__all__ = [
    "DPParams",
    "ReconstructionResult",
    "CounterexampleReport",
    "AttackDivergedError",
    "dp_sigma",
    "clip_and_noise",
    "psnr",
    "match_and_score",
    "dlg_attack",
    "sparsity_counterexample",
]

PSNR_CAP_DB = 100.0


class AttackDivergedError(RuntimeError):
    """No finite iterate survived the restart budget."""


# ---------------------------------------------------------------------------
# Differential privacy


def dp_sigma(epsilon: float, delta: float) -> float:
    """Gaussian mechanism noise scale sqrt(2 ln(1.25/delta)) / epsilon."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


@dataclass(frozen=True)
class DPParams:
    epsilon: float
    delta: float
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        dp_sigma(self.epsilon, self.delta)

    @property
    def sigma(self) -> float:
        return dp_sigma(self.epsilon, self.delta)


def clip_and_noise(values: np.ndarray, params: DPParams,
                   rng: np.random.Generator) -> np.ndarray:
    """Rescale to norm <= clip_norm, then add N(0, sigma^2) per coordinate."""
    values = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(values))
    scale = min(1.0, params.clip_norm / norm) if norm > 0 else 1.0
    return values * scale + params.sigma * rng.standard_normal(values.shape)


# ---------------------------------------------------------------------------
# Reconstruction scoring


def psnr(original: np.ndarray, reconstructed: np.ndarray
         ) -> tuple[np.ndarray, np.ndarray]:
    """Per-image PSNR in dB for batches of [0,1]-range images.

    Arrays are [n, ...] with matching shapes. An exact match has infinite
    PSNR; it is capped at 100 dB and flagged. Returns (db, exact_flags).
    """
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {original.shape} vs {reconstructed.shape}")
    if original.ndim < 2:
        raise ValueError(f"expected a batch [n, ...], got shape {original.shape}")
    n = len(original)
    mse = ((original - reconstructed) ** 2).reshape(n, -1).mean(axis=1)
    exact = mse == 0.0
    db = np.full(n, PSNR_CAP_DB)
    nonzero = ~exact
    db[nonzero] = np.minimum(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse[nonzero]))
    return db, exact


def match_and_score(true_images: np.ndarray, reconstructed: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy best-PSNR assignment of reconstructions to true images.

    Reconstruction order is arbitrary, so each true image is scored against
    its best remaining candidate, highest pairs first. Returns
    (psnr per true image, exact flags, assigned reconstruction index).
    """
    true_images = np.asarray(true_images, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if true_images.shape[1:] != reconstructed.shape[1:]:
        raise ValueError(f"image shape mismatch: {true_images.shape} vs {reconstructed.shape}")
    n_true, n_rec = len(true_images), len(reconstructed)
    if n_rec != n_true:
        raise ValueError(f"{n_rec} reconstructions for {n_true} images")
    table = np.empty((n_true, n_rec))
    exact_table = np.empty((n_true, n_rec), dtype=bool)
    for i in range(n_true):
        rep = np.broadcast_to(true_images[i], reconstructed.shape)
        table[i], exact_table[i] = psnr(rep, reconstructed)
    scores = np.full(n_true, -np.inf)
    exact = np.zeros(n_true, dtype=bool)
    assigned = np.full(n_true, -1, dtype=np.int64)
    used_t: set[int] = set()
    used_r: set[int] = set()
    order = np.dstack(np.unravel_index(np.argsort(-table, axis=None, kind="stable"),
                                       table.shape))[0]
    for ti, ri in order:
        if ti in used_t or ri in used_r:
            continue
        used_t.add(int(ti))
        used_r.add(int(ri))
        scores[ti] = table[ti, ri]
        exact[ti] = exact_table[ti, ri]
        assigned[ti] = ri
        if len(used_t) == n_true:
            break
    return scores, exact, assigned


# ---------------------------------------------------------------------------
# DLG gradient inversion


@dataclass
class ReconstructionResult:
    images: np.ndarray
    soft_labels: np.ndarray
    final_loss: float
    iterations_used: int
    restarts_used: int
    psnr_db: np.ndarray | None = None
    exact: np.ndarray | None = None


def _soft_xent_grads(model: Model, theta: np.ndarray, images: np.ndarray,
                     label_logits: np.ndarray, want_inputs: bool
                     ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Parameter gradient of mean soft-label cross-entropy, and optionally
    the input and label-logit gradients at the same point."""
    n = len(images)
    y = np.exp(nn_core.log_softmax(label_logits))
    model.set_flat(theta)
    tape = Tape()
    for _, t in model.params:
        t.zero_grad()
    x_t = Tensor(images)
    logits = model.logits(tape, x_t)
    logp = nn_core.log_softmax(logits.data)
    p = np.exp(logp)
    dlogits = (p - y) / n
    tape.backward([(logits, dlogits)])
    grad = np.concatenate([
        (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        for _, t in model.params
    ])
    if not want_inputs:
        return grad, None, None
    gx = x_t.grad if x_t.grad is not None else np.zeros_like(images)
    # dL/dy = -logp / n, then back through the label softmax
    dldy = -logp / n
    gy = y * (dldy - (dldy * y).sum(axis=1, keepdims=True))
    return grad, gx, gy


def dlg_attack(model: Model, theta: np.ndarray, observed: np.ndarray,
               batch_size: int, iterations: int, rng: np.random.Generator,
               step_size: float = 1.0, max_restarts: int = 4,
               fd_eps: float = 1e-6) -> ReconstructionResult:
    """Reconstruct batch_size inputs whose gradient matches the observed one.

    Gradient descent on dummy pixels (box-projected to [0,1]) and soft label
    logits; pure L2 gradient-match objective; the best iterate is kept. Each
    step backtracks (halving) until the loss decreases, then relaxes back
    toward step_size, so overshoot cannot stall the descent. A non-finite
    loss restarts from a fresh init at a tenth of the step, up to
    max_restarts times.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (model.d,):
        raise ValueError(f"observed gradient length {observed.shape}, expected ({model.d},)")
    shape = (batch_size,) + ((model.spec.flat_input,) if model.spec.arch != "cnn"
                             else tuple(model.spec.input_shape))

    best_loss = np.inf
    best_x = None
    best_y = None
    used = 0
    restarts = 0
    step = step_size
    while restarts <= max_restarts:
        x = rng.uniform(0.0, 1.0, shape)
        ylog = 0.1 * rng.standard_normal((batch_size, model.spec.class_count))
        grad, _, _ = _soft_xent_grads(model, theta, x, ylog, want_inputs=False)
        r = grad - observed
        loss = float(r @ r)
        diverged = not np.isfinite(loss)
        for it in range(iterations):
            if diverged:
                break
            used += 1
            if loss < best_loss:
                best_loss = loss
                best_x, best_y = x.copy(), ylog.copy()
                if loss == 0.0:
                    break
            v = 2.0 * r
            vnorm = float(np.linalg.norm(v))
            if vnorm == 0.0:
                break
            eps = fd_eps / vnorm
            _, gx_p, gy_p = _soft_xent_grads(model, theta + eps * v, x, ylog, True)
            _, gx_m, gy_m = _soft_xent_grads(model, theta - eps * v, x, ylog, True)
            dx = (gx_p - gx_m) / (2.0 * eps)
            dy = (gy_p - gy_m) / (2.0 * eps)
            if not (np.isfinite(dx).all() and np.isfinite(dy).all()):
                diverged = True
                break
            accepted = False
            for _ in range(30):
                x_c = np.clip(x - step * dx, 0.0, 1.0)
                y_c = ylog - step * dy
                grad_c, _, _ = _soft_xent_grads(model, theta, x_c, y_c, False)
                r_c = grad_c - observed
                loss_c = float(r_c @ r_c)
                if np.isfinite(loss_c) and loss_c < loss:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break  # no descent at any step: the iterate is a local floor
            x, ylog, r, loss = x_c, y_c, r_c, loss_c
            step = min(step * 1.25, step_size)
        if not diverged:
            break
        restarts += 1
        step = step_size * 0.1 ** (restarts)
    if best_x is None:
        raise AttackDivergedError(
            f"no finite iterate in {restarts} restarts (last step {step:g})")
    images = best_x.reshape((batch_size,) + _image_shape(model))
    return ReconstructionResult(images, np.exp(nn_core.log_softmax(best_y)),
                                best_loss, used, restarts)


def _image_shape(model: Model) -> tuple[int, ...]:
    shape = tuple(model.spec.input_shape)
    if len(shape) == 3 and shape[0] == 1:
        return shape[1:]
    return shape


# ---------------------------------------------------------------------------
# Sparse-support counterexample


@dataclass(frozen=True)
class CounterexampleReport:
    """Outcome of the distinguishing game against the aggregate.

    accuracy near 1 in the disjoint-support construction, near 0.5 in the
    in-span control; the detector reads only distinguishing_coord.
    """

    accuracy: float
    trials: int
    distinguishing_coord: int
    in_span_control: bool
    decisions: tuple[tuple[int, int], ...]  # rows: (truth, guess) counts 2x2

    def table(self) -> str:
        lines = ["truth\\guess  cand_a  cand_b"]
        for truth, row in enumerate(self.decisions):
            lines.append(f"cand_{'ab'[truth]}        {row[0]:6d}  {row[1]:6d}")
        return "\n".join(lines)


def sparsity_counterexample(trials: int = 1000, seed: int = 0,
                            in_span_control: bool = False,
                            span_dim: int = 3) -> CounterexampleReport:
    """Distinguishing game that defeats the sum's hiding for sparse supports.

    Users 1..3 draw updates supported on coordinates 0..span_dim-1. The
    secret user is one of two fixed candidates. In the main construction the
    candidates differ on coordinate span_dim, which no other user touches,
    so thresholding that single coordinate of the aggregate identifies the
    secret every time. The control moves both candidates inside the shared
    span; the same detector then sees 0 on its coordinate and must guess.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    d = span_dim + 2
    coord = span_dim
    cand_a = np.zeros(d)
    cand_b = np.zeros(d)
    if in_span_control:
        cand_a[0] = 1.0
        cand_b[0] = -1.0
    else:
        cand_a[coord] = 1.0
        cand_b[coord] = -1.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x73706172]))
    counts = np.zeros((2, 2), dtype=np.int64)
    hits = 0
    for _ in range(trials):
        truth = int(rng.integers(0, 2))
        secret = cand_a if truth == 0 else cand_b
        others = np.zeros(d)
        others[:span_dim] = rng.standard_normal((3, span_dim)).sum(axis=0)
        agg = others + secret
        gap_a = abs(agg[coord] - cand_a[coord])
        gap_b = abs(agg[coord] - cand_b[coord])
        if gap_a == gap_b:
            guess = int(rng.integers(0, 2))
        else:
            guess = 0 if gap_a < gap_b else 1
        counts[truth, guess] += 1
        hits += guess == truth
    return CounterexampleReport(hits / trials, trials, coord, in_span_control,
                                tuple(tuple(int(v) for v in row) for row in counts))
