import numpy as np
import pytest

from paul.encoder import (
    EncoderConfig,
    embed,
    embed_batch,
    embed_tiles,
    init_encoder,
    load_checkpoint,
    params_digest,
    save_checkpoint,
    similarity_matrix,
)
from paul.synth import Tile
from paul.tensor import DimensionError, Tensor, grad_check

CFG = EncoderConfig()
SMALL = EncoderConfig(resolution=8, hidden=16, output_dim=8)


def tiles(n, res=32, seed=0):
    rng = np.random.default_rng(seed)
    return [Tile((float(i), 0.0), 64.0, rng.uniform(0, 1, (3, res, res))) for i in range(n)]


@pytest.fixture(scope="module")
def model():
    return init_encoder(CFG, seed=1)


class TestEmbed:
    def test_deterministic(self, model):
        t = tiles(1)[0]
        np.testing.assert_array_equal(embed(model, t), embed(model, t))

    def test_unit_norm(self, model):
        e = embed_tiles(model, tiles(100, seed=1), chunk=32)
        assert e.shape == (100, CFG.output_dim)
        assert np.all(np.abs(np.linalg.norm(e, axis=1) - 1.0) < 1e-6)

    def test_batch_matches_single(self, model):
        ts = tiles(5, seed=2)
        batch = embed_batch(model, np.stack([t.pixels for t in ts])).data
        for t, row in zip(ts, batch):
            np.testing.assert_allclose(embed(model, t), row, atol=1e-12)

    def test_resolution_mismatch(self, model):
        with pytest.raises(DimensionError):
            embed(model, np.zeros((3, 16, 16)))

    def test_pixel_gradient(self):
        params = init_encoder(SMALL, seed=2)
        x = np.random.default_rng(3).uniform(0, 1, (2, 3, 8, 8))
        for coord in (0, 5):
            assert grad_check(lambda t: embed_batch(params, t)[:, coord].sum(), x) < 1e-4

    def test_parameter_gradient(self):
        params = init_encoder(SMALL, seed=4)
        x = np.random.default_rng(5).uniform(0, 1, (3, 3, 8, 8))
        w3 = params.tensors["w3"]

        def f(w):
            params.tensors["w3"] = w
            out = embed_batch(params, x)[:, 1].sum()
            params.tensors["w3"] = w3
            return out

        assert grad_check(f, w3.data.copy()) < 1e-4

    def test_seeds_differ(self):
        t = tiles(1, seed=6)[0]
        assert not np.allclose(embed(init_encoder(CFG, 1), t), embed(init_encoder(CFG, 2), t))


class TestParams:
    def test_count_fixed_by_config(self):
        a, b = init_encoder(CFG, 1), init_encoder(CFG, 2)
        expect = sum(int(np.prod(s)) for s in CFG.shapes().values())
        assert a.num_parameters() == b.num_parameters() == expect

    def test_not_aliased(self):
        a, b = init_encoder(CFG, 1), init_encoder(CFG, 1)
        for x, y in zip(a.parameters(), b.parameters()):
            assert not np.shares_memory(x.data, y.data)
        c = a.copy()
        c.tensors["w1"].data[0, 0] += 1.0
        assert a.tensors["w1"].data[0, 0] != c.tensors["w1"].data[0, 0]

    def test_fan_in_bounds(self):
        p = init_encoder(CFG, 3)
        for name, shape in CFG.shapes().items():
            data = p.tensors[name].data
            if name.startswith("w"):
                assert np.abs(data).max() <= np.sqrt(6.0 / shape[0])
            else:
                assert not data.any()

    def test_bad_resolution(self):
        with pytest.raises(ValueError):
            EncoderConfig(resolution=30)


class TestSimilarity:
    def test_self_diagonal(self, model):
        e = embed_tiles(model, tiles(6, seed=7))
        np.testing.assert_allclose(np.diag(similarity_matrix(e, e)), 1.0, atol=1e-12)

    def test_orthogonal(self):
        s = similarity_matrix(np.eye(4), np.eye(4)[[1, 0, 3, 2]])
        assert s[0, 0] == 0.0 and s[0, 1] == 1.0

    def test_naive_oracle_and_transpose(self, model):
        q = embed_tiles(model, tiles(5, seed=8))
        r = embed_tiles(model, tiles(5, seed=9))
        s = similarity_matrix(q, r)
        naive = np.array([[sum(a * b for a, b in zip(qi, rj)) for rj in r] for qi in q])
        np.testing.assert_allclose(s, naive, atol=1e-10)
        np.testing.assert_array_equal(similarity_matrix(r, q), s.T)
        assert np.all(np.abs(s) <= 1 + 1e-9)

    def test_tensor_inputs(self):
        q = np.eye(3)
        out = similarity_matrix(Tensor(q, requires_grad=True), q)
        assert isinstance(out, Tensor)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            similarity_matrix(np.ones((3, 4)), np.ones((2, 4)))
        with pytest.raises(DimensionError):
            similarity_matrix(np.ones((3, 4)), np.ones((3, 5)))


class TestCheckpoint:
    def test_roundtrip(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "m.ckpt", {"epoch": 3})
        back, header = load_checkpoint(tmp_path / "m.ckpt", CFG)
        assert header["epoch"] == 3 and header["seed"] == model.init_seed
        assert params_digest(back) == params_digest(model)
        assert not (tmp_path / "m.ckpt.tmp").exists()

    def test_config_mismatch(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "m.ckpt")
        with pytest.raises(DimensionError):
            load_checkpoint(tmp_path / "m.ckpt", EncoderConfig(output_dim=32))

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_little_endian_body(self, tmp_path):
        p = init_encoder(SMALL, seed=0)
        save_checkpoint(p, tmp_path / "s.ckpt")
        raw = (tmp_path / "s.ckpt").read_bytes()
        body = np.frombuffer(raw[-8 * p.num_parameters() :], dtype="<f8")
        np.testing.assert_array_equal(body, p.flat())
