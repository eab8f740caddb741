"""Dual-network co-training: warmup, co-divide, co-augment, cross-exchange, update.

Two encoders A and B see the same minibatches. In each batch every model
partitions the batch by its own InfoNCE losses and builds masked copies of its
noisy pairs; then A is updated on B's sets and B on A's.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import augment as aug
from .encoder import EncoderConfig, EncoderParams, embed_batch, embed_tiles, init_encoder
from .losses import info_nce, total_loss
from .partition import fidelity, fit_gmm_em, partition
from .synth import PairRecord
from .tensor import Tensor, concat, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("paul", "infonce_baseline", "match_only", "edl_only")
POLICIES = ("model_a", "model_b", "mean_embedding")


@dataclass
class TrainConfig:
    epochs: int = 5
    warmup_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-4
    lr_schedule: str = "cosine"
    tau_infonce: float = 0.07
    tau_evidence: float = 1.0
    lam: float = 0.005
    lam_edl: float = 1.0
    eta: float = 0.5
    connectivity: int = 4
    partition_strategy: str = "gmm"
    clean_threshold: float = 0.5
    assumed_noise_rate: float = 0.3
    fixed_cutoff: Optional[float] = None
    gmm_scope: str = "batch"
    guidance: str = "edl"
    fill_strategy: str = "zero"
    match_reduction: str = "mean"
    edl_reduction: str = "sum"
    kl_remove_target: bool = False
    seed: int = 0
    variant: str = "paul"
    output_dim: int = 64
    hidden: int = 128
    resolution: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if self.gmm_scope not in ("batch", "epoch"):
            raise ValueError("gmm_scope must be 'batch' or 'epoch'")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            resolution=self.resolution, hidden=self.hidden, output_dim=self.output_dim
        )

    def augment_config(self) -> aug.AugmentConfig:
        return aug.AugmentConfig(
            guidance=self.guidance,
            eta=self.eta,
            connectivity=self.connectivity,
            fill_strategy=self.fill_strategy,
            tau_evidence=self.tau_evidence,
            tau_infonce=self.tau_infonce,
            lam=self.lam,
        )


class Adam:
    """Adaptive moment estimation over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base: float, step: int, total: int, schedule: str = "cosine") -> float:
    if schedule == "constant" or total <= 1:
        return base
    t = min(step, total - 1) / (total - 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainData:
    q: np.ndarray
    r: np.ndarray
    z: Optional[np.ndarray] = None

    @classmethod
    def from_records(cls, records: Sequence[PairRecord]) -> "TrainData":
        return cls(
            np.stack([p.query.pixels for p in records]),
            np.stack([p.reference.pixels for p in records]),
            np.asarray([p.z for p in records], dtype=int),
        )

    def __len__(self) -> int:
        return self.q.shape[0]


@dataclass
class TrainerState:
    model_a: EncoderParams
    model_b: EncoderParams
    opt_a: Adam
    opt_b: Adam
    epoch: int = 0
    step: int = 0
    log: list = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainerState:
    enc = config.encoder_config()
    a = init_encoder(enc, seed=2 * config.seed + 1)
    b = init_encoder(enc, seed=2 * config.seed + 2)
    return TrainerState(a, b, Adam(a.parameters()), Adam(b.parameters()))


def _rng(config: TrainConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, *stream])


def _batches(n: int, config: TrainConfig, epoch: int) -> list[np.ndarray]:
    order = _rng(config, 7, epoch).permutation(n)
    out = []
    for i in range(0, n, config.batch_size):
        idx = order[i : i + config.batch_size]
        if idx.size < 2:
            log.warning("skipping batch of size %d (K-way framing needs K >= 2)", idx.size)
            continue
        out.append(idx)
    return out


def steps_per_epoch(n: int, config: TrainConfig) -> int:
    full, rem = divmod(n, config.batch_size)
    return full + (1 if rem >= 2 else 0)


def total_steps(n: int, config: TrainConfig) -> int:
    return steps_per_epoch(n, config) * (config.warmup_epochs + config.epochs)


def _update(model: EncoderParams, opt: Adam, loss: Tensor, lr: float) -> None:
    opt.zero_grad()
    loss.backward()
    opt.step(lr)


def per_sample_infonce(model: EncoderParams, q: np.ndarray, r: np.ndarray, tau: float) -> np.ndarray:
    with no_grad():
        eq = embed_batch(model, q).data
        er = embed_batch(model, r).data
    _, rows = info_nce(eq @ er.T, tau)
    return rows


def _models(state: TrainerState, config: TrainConfig):
    if config.variant == "infonce_baseline":
        return [("a", state.model_a, state.opt_a)]
    return [("a", state.model_a, state.opt_a), ("b", state.model_b, state.opt_b)]


def warmup(state: TrainerState, data: TrainData, config: TrainConfig) -> TrainerState:
    """Plain InfoNCE on every pair for ``warmup_epochs``."""
    total = total_steps(len(data), config)
    for _ in range(config.warmup_epochs):
        for b, idx in enumerate(_batches(len(data), config, state.epoch)):
            lr = cosine_lr(config.learning_rate, state.step, total, config.lr_schedule)
            rec = {"epoch": state.epoch, "batch": b, "phase": "warmup", "lr": lr}
            for name, model, opt in _models(state, config):
                sim = embed_batch(model, data.q[idx]) @ embed_batch(model, data.r[idx]).transpose()
                loss, _ = info_nce(sim, config.tau_infonce, config.match_reduction)
                _update(model, opt, loss, lr)
                rec[f"loss_{name}"] = loss.item()
            state.log.append(rec)
            state.step += 1
        state.epoch += 1
    return state


@dataclass
class Division:
    clean: np.ndarray
    noisy: np.ndarray
    augmented: aug.AugmentedSet
    info: dict


def co_divide(
    model: EncoderParams,
    q: np.ndarray,
    r: np.ndarray,
    config: TrainConfig,
    z: Optional[np.ndarray] = None,
    gmm=None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    losses = per_sample_infonce(model, q, r, config.tau_infonce)
    part = partition(
        losses,
        config.partition_strategy,
        threshold=config.clean_threshold,
        assumed_noise_rate=config.assumed_noise_rate,
        cutoff=config.fixed_cutoff,
        gmm=gmm,
    )
    info = {"n_clean": int(part.clean.size), "n_noisy": int(part.noisy.size)}
    if part.gmm is not None:
        info.update(mu_c=part.gmm.mu_c, mu_n=part.gmm.mu_n, beta=part.gmm.beta, degenerate=part.gmm.degenerate)
    if z is not None:
        info["fidelity"] = fidelity(part.noisy, z)
    return part.clean, part.noisy, info


def divide_and_augment(
    model: EncoderParams,
    q: np.ndarray,
    r: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    z: Optional[np.ndarray] = None,
    gmm=None,
) -> Division:
    clean, noisy, info = co_divide(model, q, r, config, z, gmm)
    if config.variant == "edl_only":
        augmented = aug.AugmentedSet(np.zeros(0, dtype=int), q[:0], r[:0])
    else:
        augmented = aug.co_augment(model, q, r, noisy, config.augment_config(), rng)
    info["n_aug"] = len(augmented)
    return Division(clean, noisy, augmented, info)


def exchange_loss(model: EncoderParams, q: np.ndarray, r: np.ndarray, peer: Division, config: TrainConfig):
    """Objective for ``model`` built from its peer's clean / augmented / noisy sets."""
    eq = embed_batch(model, q)
    er = embed_batch(model, r)
    match_q, match_r = [], []
    if peer.clean.size:
        match_q.append(eq[peer.clean])
        match_r.append(er[peer.clean])
    if len(peer.augmented):
        match_q.append(embed_batch(model, peer.augmented.q_pixels))
        match_r.append(embed_batch(model, peer.augmented.r_pixels))
    match_sim = None
    if match_q:
        mq = match_q[0] if len(match_q) == 1 else concat(match_q)
        mr = match_r[0] if len(match_r) == 1 else concat(match_r)
        match_sim = mq @ mr.transpose()
    lam_edl = 0.0 if config.variant == "match_only" else config.lam_edl
    noisy_sim = eq[peer.noisy] @ er.transpose() if peer.noisy.size else None
    return total_loss(
        match_sim,
        noisy_sim,
        config.tau_infonce,
        config.tau_evidence,
        config.lam,
        lam_edl,
        noisy_targets=peer.noisy,
        match_reduction=config.match_reduction,
        edl_reduction=config.edl_reduction,
        remove_target_evidence=config.kl_remove_target,
    )


def _epoch_gmms(state: TrainerState, data: TrainData, config: TrainConfig) -> dict:
    if config.gmm_scope != "epoch" or config.partition_strategy != "gmm":
        return {"a": None, "b": None}
    out = {}
    for name, model in (("a", state.model_a), ("b", state.model_b)):
        losses = np.concatenate(
            [
                per_sample_infonce(model, data.q[idx], data.r[idx], config.tau_infonce)
                for idx in _batches(len(data), config, state.epoch)
            ]
        )
        out[name] = fit_gmm_em(losses)
    return out


def train_epoch(
    state: TrainerState,
    data: TrainData,
    config: TrainConfig,
    on_division: Optional[Callable[[TrainerState, int, str, Division], None]] = None,
) -> TrainerState:
    """One pass over the data: per batch co-divide, co-augment, exchange, update.

    ``on_division(state, batch, model_name, division)`` sees each model's
    division before the exchange (used for saliency dumps).
    """
    total = total_steps(len(data), config)
    if config.variant == "infonce_baseline":
        for b, idx in enumerate(_batches(len(data), config, state.epoch)):
            lr = cosine_lr(config.learning_rate, state.step, total, config.lr_schedule)
            sim = embed_batch(state.model_a, data.q[idx]) @ embed_batch(state.model_a, data.r[idx]).transpose()
            loss, _ = info_nce(sim, config.tau_infonce, config.match_reduction)
            _update(state.model_a, state.opt_a, loss, lr)
            state.log.append({"epoch": state.epoch, "batch": b, "phase": "train", "lr": lr, "loss_a": loss.item()})
            state.step += 1
        state.epoch += 1
        return state

    gmms = _epoch_gmms(state, data, config)
    for b, idx in enumerate(_batches(len(data), config, state.epoch)):
        lr = cosine_lr(config.learning_rate, state.step, total, config.lr_schedule)
        q, r = data.q[idx], data.r[idx]
        z = data.z[idx] if data.z is not None else None
        div = {
            name: divide_and_augment(model, q, r, config, _rng(config, 11, state.epoch, b, k), z, gmms[name])
            for k, (name, model) in enumerate((("a", state.model_a), ("b", state.model_b)))
        }
        if on_division is not None:
            for name in ("a", "b"):
                on_division(state, b, name, div[name])
        rec = {"epoch": state.epoch, "batch": b, "phase": "train", "lr": lr}
        # A learns from B's division and B from A's
        for name, model, opt, peer in (
            ("a", state.model_a, state.opt_a, "b"),
            ("b", state.model_b, state.opt_b, "a"),
        ):
            d = div[peer]
            br = exchange_loss(model, q, r, d, config)
            _update(model, opt, br.total_tensor, lr)
            rec[f"loss_{name}"] = br.total
            rec[f"match_{name}"] = br.match_loss
            rec[f"edl_mse_{name}"] = br.edl_mse
            rec[f"edl_kl_{name}"] = br.edl_kl
            rec[f"partition_{peer}"] = dict(div[peer].info, clean=d.clean.tolist(), noisy=d.noisy.tolist())
            rec[f"update_{name}"] = {
                "from": peer,
                "clean": d.clean.tolist(),
                "noisy": d.noisy.tolist(),
                "aug_rows": d.augmented.source_rows.tolist(),
            }
        state.log.append(rec)
        state.step += 1
    state.epoch += 1
    return state


def train(
    config: TrainConfig,
    data: TrainData,
    state: Optional[TrainerState] = None,
    on_epoch_end: Optional[Callable[[TrainerState], None]] = None,
    on_division: Optional[Callable] = None,
) -> TrainerState:
    """Warmup followed by ``epochs`` co-training epochs (baseline: plain InfoNCE throughout)."""
    state = state if state is not None else init_state(config)
    if state.epoch < config.warmup_epochs:
        warmup(state, data, config)
        if on_epoch_end:
            on_epoch_end(state)
    while state.epoch < config.warmup_epochs + config.epochs:
        train_epoch(state, data, config, on_division)
        if on_epoch_end:
            on_epoch_end(state)
    return state


def select_inference_model(state: TrainerState, policy: str = "model_a") -> Callable:
    """Return tiles -> (N, d) unit-norm embeddings for the chosen policy."""
    if policy == "model_a":
        return lambda tiles: embed_tiles(state.model_a, tiles)
    if policy == "model_b":
        return lambda tiles: embed_tiles(state.model_b, tiles)
    if policy == "mean_embedding":

        def fn(tiles):
            m = embed_tiles(state.model_a, tiles) + embed_tiles(state.model_b, tiles)
            return m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)

        return fn
    raise ValueError(f"unknown inference policy {policy!r}; expected one of {POLICIES}")


def partition_agreement(model: EncoderParams, data: TrainData, config: TrainConfig, strategy: str) -> float:
    """Fraction of training pairs whose per-batch partition label matches latent z."""
    if data.z is None:
        raise ValueError("latent noise flags unavailable")
    cfg = TrainConfig(**{**asdict(config), "partition_strategy": strategy})
    hits = 0
    for idx in _batches(len(data), cfg, 0):
        _, noisy, _ = co_divide(model, data.q[idx], data.r[idx], cfg)
        hits += fidelity(noisy, data.z[idx])["agreement"] * idx.size
    return hits / len(data)
