"""Co-divide: two-component 1-D GMM over per-sample losses, and alternative splitters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

VAR_FLOOR = 1e-6
BETA_MIN = 1e-4
STRATEGIES = ("gmm", "small_loss_topk", "fixed_threshold")

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmParams:
    beta: float
    mu_c: float
    var_c: float
    mu_n: float
    var_n: float
    degenerate: bool = False
    n_iter: int = 0
    log_likelihood: list = field(default_factory=list)


def _log_normal(x: np.ndarray, mu: float, var: float) -> np.ndarray:
    return -0.5 * (_LOG_2PI + math.log(var) + (x - mu) ** 2 / var)


def _log_joint(x: np.ndarray, p: GmmParams) -> tuple[np.ndarray, np.ndarray]:
    lc = math.log(p.beta) + _log_normal(x, p.mu_c, p.var_c)
    ln = math.log(1.0 - p.beta) + _log_normal(x, p.mu_n, p.var_n)
    return lc, ln


def responsibilities(x, p: GmmParams) -> np.ndarray:
    """E-step: (N, 2) posterior of (clean, noisy) per sample."""
    x = np.asarray(x, dtype=np.float64)
    lc, ln = _log_joint(x, p)
    m = np.maximum(lc, ln)
    lse = m + np.log(np.exp(lc - m) + np.exp(ln - m))
    return np.stack([np.exp(lc - lse), np.exp(ln - lse)], axis=-1)


def log_likelihood(x, p: GmmParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    lc, ln = _log_joint(x, p)
    return float(np.sum(np.logaddexp(lc, ln)))


def fit_gmm_em(losses, max_iter: int = 100, tol: float = 1e-8) -> GmmParams:
    """Fit beta*N(mu_c, var_c) + (1-beta)*N(mu_n, var_n) by EM; mu_c <= mu_n on return."""
    x = np.asarray(losses, dtype=np.float64).reshape(-1)
    if x.size < 4:
        raise ValueError("need at least 4 losses to fit a two-component mixture")
    if not np.all(np.isfinite(x)):
        raise ValueError("losses must be finite")
    spread = float(np.var(x))
    if spread < VAR_FLOOR * 1e-6 or np.ptp(x) < 1e-12:
        mu = float(np.mean(x))
        return GmmParams(1.0 - BETA_MIN, mu, VAR_FLOOR, mu, VAR_FLOOR, degenerate=True)

    var0 = max(spread, VAR_FLOOR)
    p = GmmParams(0.5, float(np.percentile(x, 25)), var0, float(np.percentile(x, 75)), var0)
    history = [log_likelihood(x, p)]
    for it in range(1, max_iter + 1):
        r = responsibilities(x, p)
        nc, nn = r[:, 0].sum(), r[:, 1].sum()
        beta = float(np.clip(nc / x.size, BETA_MIN, 1.0 - BETA_MIN))
        mu_c = float(r[:, 0] @ x / nc) if nc > 0 else p.mu_c
        mu_n = float(r[:, 1] @ x / nn) if nn > 0 else p.mu_n
        var_c = max(float(r[:, 0] @ (x - mu_c) ** 2 / nc), VAR_FLOOR) if nc > 0 else p.var_c
        var_n = max(float(r[:, 1] @ (x - mu_n) ** 2 / nn), VAR_FLOOR) if nn > 0 else p.var_n
        p = GmmParams(beta, mu_c, var_c, mu_n, var_n)
        history.append(log_likelihood(x, p))
        if history[-1] - history[-2] < tol:
            break
    if p.mu_c > p.mu_n:
        p = GmmParams(1.0 - p.beta, p.mu_n, p.var_n, p.mu_c, p.var_c)
    p.n_iter = it
    p.log_likelihood = history
    return p


def posterior_clean(loss, params: GmmParams):
    """Posterior probability that a loss came from the clean (low-mean) component."""
    if params.degenerate:
        return np.ones_like(np.asarray(loss, dtype=np.float64)) if np.ndim(loss) else 1.0
    w = responsibilities(np.asarray(loss, dtype=np.float64), params)[..., 0]
    return w if np.ndim(loss) else float(w)


@dataclass
class Partition:
    clean: np.ndarray
    noisy: np.ndarray
    weights: Optional[np.ndarray] = None
    gmm: Optional[GmmParams] = None


def partition(
    losses,
    strategy: str = "gmm",
    threshold: float = 0.5,
    assumed_noise_rate: float = 0.3,
    cutoff: Optional[float] = None,
    gmm: Optional[GmmParams] = None,
) -> Partition:
    """Split sample indices into clean / noisy.

    gmm: clean iff posterior w > threshold (fits a GMM unless one is given).
    small_loss_topk: the round((1 - rate) * N) smallest losses are clean.
    fixed_threshold: clean iff loss < cutoff; the default cutoff is log(N), the
    InfoNCE loss of a uniform guess over an N-pair batch.
    """
    x = np.asarray(losses, dtype=np.float64).reshape(-1)
    n = x.size
    if strategy == "gmm":
        params = gmm if gmm is not None else fit_gmm_em(x)
        w = np.atleast_1d(posterior_clean(x, params))
        mask = w > threshold
        result = Partition(np.flatnonzero(mask), np.flatnonzero(~mask), w, params)
    elif strategy == "small_loss_topk":
        n_clean = int(math.floor((1.0 - assumed_noise_rate) * n + 0.5))
        order = np.argsort(x, kind="stable")
        mask = np.zeros(n, dtype=bool)
        mask[order[:n_clean]] = True
        result = Partition(np.flatnonzero(mask), np.flatnonzero(~mask))
    elif strategy == "fixed_threshold":
        mask = x < (math.log(n) if cutoff is None else cutoff)
        result = Partition(np.flatnonzero(mask), np.flatnonzero(~mask))
    else:
        raise ValueError(f"unknown partition strategy {strategy!r}; expected one of {STRATEGIES}")
    return result


def fidelity(noisy_idx, z) -> dict:
    """Agreement between a predicted noisy set and latent noise flags."""
    z = np.asarray(z, dtype=bool)
    pred = np.zeros(z.size, dtype=bool)
    pred[np.asarray(noisy_idx, dtype=int)] = True
    n_noisy_pred = int(pred.sum())
    return {
        "agreement": float(np.mean(pred == z)) if z.size else 1.0,
        "true_noisy_in_noisy": float(np.mean(z[pred])) if n_noisy_pred else 0.0,
        "noisy_recall": float(np.mean(pred[z])) if z.any() else 1.0,
        "clean_recall": float(np.mean(~pred[~z])) if (~z).any() else 1.0,
    }
