import math
from dataclasses import replace

import numpy as np
import pytest

from paul import augment as aug
from paul.cotrain import (
    Adam,
    Division,
    _batches,
    TrainConfig,
    TrainData,
    co_divide,
    cosine_lr,
    exchange_loss,
    init_state,
    partition_agreement,
    select_inference_model,
    steps_per_epoch,
    total_steps,
    train,
    warmup,
)
from paul.encoder import params_digest
from paul.synth import Tile, WorldMap, make_dataset
from paul.tensor import Tensor

TINY = TrainConfig(
    epochs=2,
    warmup_epochs=1,
    batch_size=16,
    learning_rate=1e-3,
    resolution=8,
    hidden=16,
    output_dim=8,
    eta=0.3,
    seed=3,
)


@pytest.fixture(scope="module")
def data():
    world = WorldMap(5, size=256, n_landmarks=20)
    return TrainData.from_records(make_dataset(world, 48, 0.3, seed=5, resolution=8))


@pytest.fixture(scope="module")
def trained(data):
    return train(TINY, data)


def empty_aug(q):
    return aug.AugmentedSet(np.zeros(0, dtype=int), q[:0], q[:0])


class TestSchedule:
    def test_endpoints(self):
        total = 120
        assert cosine_lr(1e-3, 0, total) == 1e-3
        assert cosine_lr(1e-3, total - 1, total) < 1e-6 * 1e-3
        assert cosine_lr(1e-3, (total - 1) / 2, total) == pytest.approx(5e-4)

    def test_constant(self):
        assert cosine_lr(1e-3, 50, 100, "constant") == 1e-3

    def test_logged_lrs(self, trained, data):
        lrs = [rec["lr"] for rec in trained.log]
        assert len(lrs) == total_steps(len(data), TINY)
        assert lrs[0] == TINY.learning_rate and lrs[-1] < 1e-6 * TINY.learning_rate
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_steps_skip_singleton_batch(self):
        cfg = replace(TINY, batch_size=16)
        assert steps_per_epoch(33, cfg) == 2
        assert steps_per_epoch(34, cfg) == 3


class TestAdam:
    def test_first_step_is_lr_sign(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p])
        p.grad = np.array([0.5, -3.0])
        opt.step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
        assert p.grad is None

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        opt = Adam([p])
        for _ in range(500):
            loss = (p * p).sum()
            loss.backward()
            opt.step(0.05)
        assert abs(p.data[0]) < 1e-2


class TestExchange:
    def test_update_uses_peer_partition(self, data):
        """Each model's update sets equal the peer's division, recomputed independently."""
        cfg = replace(TINY, epochs=1)
        seen = []

        def hook(state, b, name, div):
            model = state.model_b if name == "b" else state.model_a
            seen.append((b, name, model.copy(), div.clean.tolist(), div.noisy.tolist()))

        state = train(cfg, data, on_division=hook)
        recs = [r for r in state.log if r["phase"] == "train"]
        batches = _batches(len(data), cfg, cfg.warmup_epochs)
        for b, name, model, clean, noisy in seen:
            rec = recs[b]
            learner = "a" if name == "b" else "b"
            assert rec[f"update_{learner}"]["from"] == name
            assert rec[f"update_{learner}"]["clean"] == clean
            assert rec[f"update_{learner}"]["noisy"] == noisy
            idx = batches[b]
            c, n, _ = co_divide(model, data.q[idx], data.r[idx], cfg)
            assert c.tolist() == clean and n.tolist() == noisy

    def test_queries_outside_peer_sets_do_not_matter(self, data):
        cfg = TINY
        model = init_state(cfg).model_a
        q, r = data.q[:8].copy(), data.r[:8]
        peer = Division(np.array([0, 1, 2]), np.array([5]), empty_aug(q), {})
        base = exchange_loss(model, q, r, peer, cfg).total
        q[3] += 0.5
        q[7] = 0.0
        assert exchange_loss(model, q, r, peer, cfg).total == base
        q[5] += 0.5
        assert exchange_loss(model, q, r, peer, cfg).total != base

    def test_match_only_drops_edl(self, data):
        cfg = replace(TINY, variant="match_only")
        model = init_state(cfg).model_a
        q, r = data.q[:8], data.r[:8]
        peer = Division(np.array([0, 1, 2]), np.array([4, 5]), empty_aug(q), {})
        br = exchange_loss(model, q, r, peer, cfg)
        full = exchange_loss(model, q, r, peer, TINY)
        assert br.total == pytest.approx(br.match_loss)
        assert full.total > br.total

    def test_records_partition_and_fidelity(self, trained, data):
        rec = [r for r in trained.log if r["phase"] == "train"][0]
        for name in ("a", "b"):
            part = rec[f"partition_{name}"]
            assert sorted(part["clean"] + part["noisy"]) == list(range(TINY.batch_size))
            assert 0.0 <= part["fidelity"]["agreement"] <= 1.0


class TestBaseline:
    def test_never_updates_b(self, data):
        cfg = replace(TINY, variant="infonce_baseline")
        before = params_digest(init_state(cfg).model_b)
        state = train(cfg, data)
        assert params_digest(state.model_b) == before
        assert params_digest(state.model_a) != params_digest(init_state(cfg).model_a)
        assert not any("partition_a" in r or "loss_b" in r for r in state.log)


class TestTraining:
    def test_deterministic(self, data, trained):
        again = train(TINY, data)
        assert params_digest(again.model_a) == params_digest(trained.model_a)
        assert params_digest(again.model_b) == params_digest(trained.model_b)

    def test_seed_changes_run(self, data, trained):
        other = train(replace(TINY, seed=4), data)
        assert params_digest(other.model_a) != params_digest(trained.model_a)

    def test_zero_epochs_leaves_state(self, data):
        cfg = replace(TINY, warmup_epochs=0, epochs=0)
        fresh = init_state(cfg)
        state = train(cfg, data)
        assert params_digest(state.model_a) == params_digest(fresh.model_a)
        assert state.step == 0 and state.log == []

    def test_warmup_lowers_loss_and_models_differ(self, data):
        cfg = replace(TINY, warmup_epochs=6, epochs=0, lr_schedule="constant")
        state = warmup(init_state(cfg), data, cfg)
        losses = [r["loss_a"] for r in state.log]
        per = steps_per_epoch(len(data), cfg)
        assert np.mean(losses[-per:]) < np.mean(losses[:per])
        assert params_digest(state.model_a) != params_digest(state.model_b)

    def test_resume_finished_is_noop(self, data, trained):
        before = params_digest(trained.model_a), trained.step
        train(TINY, data, state=trained)
        assert (params_digest(trained.model_a), trained.step) == before

    def test_epoch_scope_gmm(self, data):
        state = train(replace(TINY, gmm_scope="epoch", epochs=1), data)
        assert all(math.isfinite(r["loss_a"]) for r in state.log)

    @pytest.mark.parametrize("variant", ["edl_only", "match_only"])
    def test_variants_run(self, data, variant):
        state = train(replace(TINY, variant=variant, epochs=1), data)
        rec = state.log[-1]
        assert math.isfinite(rec["loss_a"]) and math.isfinite(rec["loss_b"])
        if variant == "edl_only":
            assert rec["update_a"]["aug_rows"] == []

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(variant="mixup")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)


class TestInference:
    def test_policies(self, trained, data):
        tiles = [Tile((0.0, 0.0), 64.0, px) for px in data.q[:5]]
        a = select_inference_model(trained, "model_a")(tiles)
        b = select_inference_model(trained, "model_b")(tiles)
        m = select_inference_model(trained, "mean_embedding")(tiles)
        np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-12)
        expect = (a + b) / np.linalg.norm(a + b, axis=1, keepdims=True)
        np.testing.assert_allclose(m, expect, atol=1e-12)

    def test_mean_of_identical_models(self, trained, data):
        twin = replace(trained, model_b=trained.model_a)
        tiles = [Tile((0.0, 0.0), 64.0, px) for px in data.q[:4]]
        np.testing.assert_allclose(
            select_inference_model(twin, "mean_embedding")(tiles),
            select_inference_model(twin, "model_a")(tiles),
            atol=1e-12,
        )

    def test_unknown_policy(self, trained):
        with pytest.raises(ValueError):
            select_inference_model(trained, "ensemble")


def test_partition_agreement_bounds(trained, data):
    for strategy in ("gmm", "fixed_threshold", "small_loss_topk"):
        assert 0.0 <= partition_agreement(trained.model_a, data, TINY, strategy) <= 1.0
    with pytest.raises(ValueError):
        partition_agreement(trained.model_a, TrainData(data.q, data.r), TINY, "gmm")
