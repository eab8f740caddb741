"""InfoNCE, evidential (Dirichlet) statistics and losses, and the co-training objective.

All losses take a K x K similarity matrix (numpy array or Tensor) whose
diagonal holds the labeled positives, and return Tensors so they can be
differentiated back to parameters or input pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .tensor import Tensor, digamma, lgamma, logsumexp


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _diag_mask(n_rows: int, n_cols: int, targets: Optional[np.ndarray]) -> np.ndarray:
    targets = np.arange(n_rows) if targets is None else np.asarray(targets)
    y = np.zeros((n_rows, n_cols))
    y[np.arange(n_rows), targets] = 1.0
    return y


def info_nce_rows(sim, tau: float, targets: Optional[np.ndarray] = None) -> Tensor:
    """Per-row InfoNCE: -log softmax(S[i] / tau)[target_i]. Targets default to the diagonal."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s = _as_tensor(sim) / tau
    y = _diag_mask(s.shape[0], s.shape[1], targets)
    return logsumexp(s, axis=1) - (s * y).sum(axis=1)


def info_nce(sim, tau: float, reduction: str = "mean") -> tuple[Tensor, np.ndarray]:
    """Return (reduced loss, per-row losses as a plain array)."""
    rows = info_nce_rows(sim, tau)
    return _reduce(rows, reduction), rows.data.copy()


def _reduce(rows: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return rows.mean()
    if reduction == "sum":
        return rows.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def evidence(sim, tau: float):
    """exp(tanh(s / tau)); every component lies in [1/e, e]."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(sim, Tensor):
        return (sim / tau).tanh().exp()
    return np.exp(np.tanh(np.asarray(sim, dtype=np.float64) / tau))


@dataclass
class DirichletState:
    evidence: np.ndarray
    alpha: np.ndarray
    concentration: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    uncertainty: np.ndarray
    dst_singleton_masses: np.ndarray
    dst_ignorance: np.ndarray


def dirichlet_stats(e) -> DirichletState:
    """Dirichlet moments and belief masses for evidence of shape (K,) or (N, K)."""
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("evidence must be non-negative")
    k = e.shape[-1]
    alpha = e + 1.0
    a = alpha.sum(axis=-1, keepdims=True)
    u = k / a
    return DirichletState(
        evidence=e,
        alpha=alpha,
        concentration=a[..., 0],
        mean=alpha / a,
        variance=alpha * (a - alpha) / (a * a * (a + 1.0)),
        uncertainty=u[..., 0],
        dst_singleton_masses=e / a,
        dst_ignorance=u[..., 0],
    )


def kl_dirichlet_to_uniform(alpha):
    """KL(Dir(alpha) || Dir(1)) along the last axis. Tensor in, Tensor out; arrays give arrays."""
    if isinstance(alpha, Tensor):
        if np.any(alpha.data < 1.0):
            raise ValueError("alpha must be >= 1")
        k = alpha.shape[-1]
        a = alpha.sum(axis=-1, keepdims=True)
        t1 = lgamma(a).sum(axis=-1)
        t2 = lgamma(alpha).sum(axis=-1)
        t4 = ((alpha - 1.0) * (digamma(alpha) - digamma(a))).sum(axis=-1)
        return t1 - t2 - float(special.gammaln(k)) + t4
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 1.0):
        raise ValueError("alpha must be >= 1")
    k = alpha.shape[-1]
    a = alpha.sum(axis=-1, keepdims=True)
    return (
        special.gammaln(a[..., 0])
        - special.gammaln(alpha).sum(axis=-1)
        - special.gammaln(k)
        + ((alpha - 1.0) * (special.digamma(alpha) - special.digamma(a))).sum(axis=-1)
    )


@dataclass
class EdlParts:
    mse: Tensor  # per-row sum of squared error plus variance
    kl: Tensor  # per-row KL to the uniform Dirichlet
    rows: Tensor  # mse + lam * kl
    uncertainty: Tensor  # per-row K / A


def edl_rows(
    sim,
    tau: float,
    lam: float,
    targets: Optional[np.ndarray] = None,
    remove_target_evidence: bool = False,
) -> EdlParts:
    """Per-row evidential loss over the rows of a similarity (sub-)matrix.

    Row i is a K-way classification whose label is column ``targets[i]``
    (the diagonal by default).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if lam < 0:
        raise ValueError("KL weight must be non-negative")
    s = _as_tensor(sim)
    n, k = s.shape
    y = _diag_mask(n, k, targets)
    e = evidence(s, tau)
    alpha = e + 1.0
    a = alpha.sum(axis=1, keepdims=True)
    p = alpha / a
    var = alpha * (a - alpha) / (a * a * (a + 1.0))
    mse = ((p - y).square() + var).sum(axis=1)
    kl_alpha = y + (1.0 - y) * alpha if remove_target_evidence else alpha
    kl = kl_dirichlet_to_uniform(kl_alpha)
    return EdlParts(mse=mse, kl=kl, rows=mse + kl * lam, uncertainty=float(k) / a.reshape(n))


def edl_loss(sim, tau: float, lam: float, reduction: str = "sum") -> tuple[Tensor, dict]:
    """Evidential loss summed (default) over rows, with its MSE / KL breakdown."""
    parts = edl_rows(sim, tau, lam)
    total = _reduce(parts.rows, reduction)
    breakdown = {
        "mse": float(_reduce(parts.mse, reduction).item()),
        "kl": float(_reduce(parts.kl, reduction).item()),
        "per_sample": parts.rows.data.copy(),
    }
    return total, breakdown


@dataclass
class LossBreakdown:
    match_loss: float
    edl_mse: float
    edl_kl: float
    total: float
    per_sample_infonce: np.ndarray
    total_tensor: Optional[Tensor] = None


def total_loss(
    clean_and_aug_sim,
    noisy_sim,
    tau_infonce: float,
    tau_evidence: float,
    lam: float,
    lam_edl: float,
    noisy_targets: Optional[np.ndarray] = None,
    match_reduction: str = "mean",
    edl_reduction: str = "sum",
    remove_target_evidence: bool = False,
) -> LossBreakdown:
    """L_match over the clean + augmented pairs plus lam_edl * L_EDL over the noisy rows.

    ``noisy_sim`` holds the noisy rows against every batch column; their
    labeled columns are ``noisy_targets``.
    """
    zero = Tensor(np.zeros(()))
    if clean_and_aug_sim is not None and clean_and_aug_sim.shape[0] > 0:
        rows = info_nce_rows(clean_and_aug_sim, tau_infonce)
        match = _reduce(rows, match_reduction)
        per_sample = rows.data.copy()
    else:
        match, per_sample = zero, np.zeros(0)
    mse = kl = zero
    total = match
    if noisy_sim is not None and noisy_sim.shape[0] > 0 and lam_edl != 0.0:
        parts = edl_rows(noisy_sim, tau_evidence, lam, noisy_targets, remove_target_evidence)
        mse = _reduce(parts.mse, edl_reduction)
        kl = _reduce(parts.kl, edl_reduction)
        total = match + (mse + kl * lam) * lam_edl
    return LossBreakdown(
        match_loss=match.item(),
        edl_mse=mse.item(),
        edl_kl=kl.item(),
        total=total.item(),
        per_sample_infonce=per_sample,
        total_tensor=total,
    )
