"""Closed-form upper bounds on per-round and multi-round update leakage.

Two per-round regimes share the vanishing log term (d*/2) * log(N/(N-1)):
case 1 bounds the remainder through a fourth-moment constant C0 of the
whitened single-example gradients; case 2 goes through the smoothed-density
route with C1 = 2(1 + sigma + log(2pi) - log(sigma)) and
C2 = 4(h(g) - (1/2) log|Sigma_g|). The simplified form takes the best
available candidate pair. Everything computes in nats internally and
reports bits unless asked otherwise.

The constants themselves are population quantities; estimate_rank and
estimate_constants provide the desk-scale plug-in proxies from a matrix of
sampled per-example gradients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Candidate",
    "ConstantsEstimate",
    "DegenerateGradientsError",
    "case1_candidate",
    "case2_candidate",
    "per_round_case1",
    "per_round_case2",
    "simplified_bound",
    "multi_round_bound",
    "dropout_collusion_bound",
    "user_sampling_bound",
    "estimate_rank",
    "estimate_constants",
    "gaussian_entropy_nats",
    "lemma1_check",
]

LN2 = math.log(2.0)
_UNITS = ("bits", "nats")


class DegenerateGradientsError(ValueError):
    """Gradient sample has zero covariance; no constants can be estimated."""


def _convert(nats: float, unit: str) -> float:
    if unit not in _UNITS:
        raise ValueError(f"unit must be one of {_UNITS}, got {unit!r}")
    return nats / LN2 if unit == "bits" else nats


def _check_common(n_users: int, batch_size: int, d_star: int) -> None:
    if n_users < 2:
        raise ValueError(f"bound needs n_users >= 2, got {n_users}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if d_star < 1:
        raise ValueError(f"d_star must be >= 1, got {d_star}")


def _log_term_nats(n_users: int, d_star: int) -> float:
    return 0.5 * d_star * math.log(n_users / (n_users - 1.0))


@dataclass(frozen=True)
class Candidate:
    """One (C1_hat, C2_hat) pair for the simplified per-round bound."""

    c1_hat: float
    c2_hat: float
    label: str = ""


def case1_candidate(c0: float) -> Candidate:
    if c0 < 0:
        raise ValueError(f"C0 must be >= 0, got {c0}")
    return Candidate(c0, 0.0, "case1")


def case2_constants(sigma: float) -> float:
    """C1 for smoothing scale sigma."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return 2.0 * (1.0 + sigma + math.log(2.0 * math.pi) - math.log(sigma))


def case2_candidate(sigma: float, h_g_nats: float, logdet_nats: float) -> Candidate:
    c1 = case2_constants(sigma)
    c2 = 4.0 * (h_g_nats - 0.5 * logdet_nats)
    s4 = sigma ** 4
    return Candidate(c1 / s4, c2 / s4, "case2")


def per_round_case1(n_users: int, batch_size: int, d_star: int, c0: float,
                    unit: str = "bits") -> float:
    """C0 d*/((N-1) B) + (d*/2) log(N/(N-1))."""
    _check_common(n_users, batch_size, d_star)
    if c0 < 0:
        raise ValueError(f"C0 must be >= 0, got {c0}")
    nats = c0 * d_star / ((n_users - 1.0) * batch_size) + _log_term_nats(n_users, d_star)
    return _convert(nats, unit)


def per_round_case2(n_users: int, batch_size: int, d_star: int, sigma: float,
                    h_g_nats: float, logdet_nats: float, unit: str = "bits") -> float:
    """(d* C1 - C2)/((N-1) B sigma^4) + (d*/2) log(N/(N-1))."""
    _check_common(n_users, batch_size, d_star)
    c1 = case2_constants(sigma)
    c2 = 4.0 * (h_g_nats - 0.5 * logdet_nats)
    nats = (d_star * c1 - c2) / ((n_users - 1.0) * batch_size * sigma ** 4) \
        + _log_term_nats(n_users, d_star)
    return _convert(nats, unit)


def simplified_bound(n_users: int, batch_size: int, d_star: int, candidates,
                     unit: str = "bits") -> float:
    """Log term plus the minimum of (d* C1_hat - C2_hat)/((N-1) B) over the
    supplied candidate pairs."""
    _check_common(n_users, batch_size, d_star)
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one candidate pair")
    best = min((d_star * c.c1_hat - c.c2_hat) / ((n_users - 1.0) * batch_size)
               for c in candidates)
    return _convert(best + _log_term_nats(n_users, d_star), unit)


def multi_round_bound(per_round: float, rounds: int) -> float:
    """Chain rule over rounds: T identical per-round budgets."""
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    return per_round * rounds


def dropout_collusion_bound(surviving_honest: int, batch_size: int, d_star: int,
                            candidates, unit: str = "bits") -> float:
    """Simplified bound with N replaced by the surviving honest count |N_s|.

    Fewer honest peers means less crowd noise, so the bound grows as
    |N_s| shrinks; below 2 the aggregate offers no hiding at all and the
    bound is undefined."""
    if surviving_honest < 2:
        raise ValueError(f"bound undefined for surviving_honest={surviving_honest}: "
                         f"need at least 2 honest users in the sum")
    return simplified_bound(surviving_honest, batch_size, d_star, candidates, unit)


def user_sampling_bound(n_users: int, sample_k: int, rounds: int, batch_size: int,
                        d_star: int, c0: float, unit: str = "bits") -> float:
    """Expected leakage under per-round sampling of K of N users.

    A user participates in rounds * K/N rounds on average; each participated
    round leaks at most the case-1 per-round bound among the K-user sum."""
    if not (2 <= sample_k <= n_users):
        raise ValueError(f"sample_k must be in 2..{n_users}, got {sample_k}")
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    t_i = rounds * sample_k / n_users
    return t_i * per_round_case1(sample_k, batch_size, d_star, c0, unit)


# ---------------------------------------------------------------------------
# Plug-in constant estimation from sampled per-example gradients


def _gradient_eigs(grads: np.ndarray):
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2:
        raise ValueError(f"gradient sample must be [m, d], got shape {grads.shape}")
    m = len(grads)
    if m < 2:
        raise ValueError(f"need at least 2 gradient samples, got {m}")
    centered = grads - grads.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = s ** 2 / (m - 1)
    return u, s, eigvals


def estimate_rank(grads: np.ndarray, eigen_threshold: float = 1e-8) -> int:
    """Effective support dimension d*: eigenvalues of the sample covariance
    above eigen_threshold times the largest. All-zero gradients give 0."""
    if not (0 < eigen_threshold < 1):
        raise ValueError(f"eigen_threshold must be in (0, 1), got {eigen_threshold}")
    _, _, eigvals = _gradient_eigs(grads)
    if eigvals.size == 0 or eigvals[0] <= 0.0:
        return 0
    return int(np.count_nonzero(eigvals > eigen_threshold * eigvals[0]))


@dataclass(frozen=True)
class ConstantsEstimate:
    d_star: int
    c0: float
    h_g_nats: float
    logdet_nats: float
    n_samples: int


def estimate_constants(grads: np.ndarray, d_star: int | None = None,
                       c_tilde: float = 1.0, eigen_threshold: float = 1e-8,
                       ) -> ConstantsEstimate:
    """Plug-in proxies on the d*-dimensional support.

    Whiten the centered gradients on their top-d* eigenspace, then:
    C0 = c_tilde * max_j E[g_j^4]; h(g) falls back to the Gaussian entropy of
    the support covariance; logdet is the sum of the kept log-eigenvalues.
    Fewer than 100 samples warns, the constants get noisy below that.
    """
    u, s, eigvals = _gradient_eigs(grads)
    m = len(u)
    if eigvals.size == 0 or eigvals[0] <= 0.0:
        raise DegenerateGradientsError("gradient sample covariance is zero")
    if m < 100:
        warnings.warn(f"estimating bound constants from only {m} gradients",
                      stacklevel=2)
    if d_star is None:
        d_star = int(np.count_nonzero(eigvals > eigen_threshold * eigvals[0]))
    if not (1 <= d_star <= eigvals.size):
        raise ValueError(f"d_star {d_star} outside 1..{eigvals.size}")
    if eigvals[d_star - 1] <= 0.0:
        raise DegenerateGradientsError(f"support eigenvalue {d_star} is zero")
    # whitened coordinates have unit sample variance: u_j * sqrt(m - 1)
    whitened = u[:, :d_star] * math.sqrt(m - 1)
    c0 = c_tilde * float((whitened ** 4).mean(axis=0).max())
    logdet = float(np.log(eigvals[:d_star]).sum())
    h_g = 0.5 * (d_star * math.log(2.0 * math.pi * math.e) + logdet)
    return ConstantsEstimate(int(d_star), c0, h_g, logdet, m)


# ---------------------------------------------------------------------------
# Smoothed-entropy identity


def gaussian_entropy_nats(cov: np.ndarray) -> float:
    """Differential entropy of N(mu, cov) in nats."""
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive definite")
    return 0.5 * (d * math.log(2.0 * math.pi * math.e) + logdet)


def lemma1_check(sigma: float, cov: np.ndarray, q_entropy_nats: float) -> float:
    """Relative entropy of sqrt(sigma)-scaled q against the matched Gaussian:

    -h(q) - (d/2) log(sigma) + (d/2) log(2 pi) + (1/2) log|cov| + sigma d / 2

    in nats. With sigma = 1 and q Gaussian with the same cov this is 0.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive definite")
    return (-q_entropy_nats - 0.5 * d * math.log(sigma)
            + 0.5 * d * math.log(2.0 * math.pi) + 0.5 * logdet + 0.5 * sigma * d)
