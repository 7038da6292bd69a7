import numpy as np
import pytest
from scipy.special import entr

from attnormals import autodiff as ad
from attnormals import model
from attnormals.autodiff import Tensor

from gradcheck_cases import PIPELINE_EPS, pipeline_case


# wider than the grad-check config so random draws rarely kill the whole head
WIDE = model.ModelConfig(k=10, D=16, H=2, mlp_widths=(16, 16, 16), ffn_hidden=16, fc_widths=(16, 16, 3))


def params_for(cfg=WIDE, seed=0):
    return model.init_params(model.ModelConfig(**{**cfg.__dict__, "seed": seed}))


def random_patch(rng, k):
    c = rng.normal(size=(k, 3))
    return c - c.mean(axis=0)


def entropy(attn):
    return float(entr(attn).sum(axis=-1).mean())


class TestConfig:
    def test_defaults(self):
        cfg = model.ModelConfig()
        assert (cfg.k, cfg.D, cfg.H, cfg.head_dim) == (50, 64, 4, 16)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(H=0), dict(D=6, H=4, mlp_widths=(8, 8, 6)), dict(mlp_widths=(32, 64)), dict(fc_widths=(8, 4)), dict(k=0)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            model.ModelConfig(**kwargs)

    def test_train_config(self):
        cfg = model.TrainConfig()
        assert cfg.lr_at(0) == 5e-4
        assert cfg.lr_at(399) == 5e-4
        assert cfg.lr_at(400) == pytest.approx(5e-5)
        assert cfg.lr_at(899) == pytest.approx(5e-6)
        with pytest.raises(ValueError):
            model.TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            model.TrainConfig(lr=0)


class TestInit:
    def test_temperature_starts_at_one(self):
        p = params_for()
        assert p.temperature == 1.0
        assert p.log_t.item() == 0.0

    def test_kaiming_bounds_and_zero_bias(self):
        p = model.init_params(model.ModelConfig(seed=3))
        for name, t in p.items():
            if name.endswith(".b"):
                np.testing.assert_array_equal(t.data, 0)
            elif name != "log_t":
                assert np.abs(t.data).max() <= np.sqrt(6.0 / t.shape[0])

    def test_projection_shapes(self):
        cfg = model.ModelConfig()
        p = model.init_params(cfg)
        assert p["attn0.wq"].shape == (64, 16)
        assert p["attn.o.w"].shape == (64, 64)
        assert sum(1 for n in p if n.endswith(".wq")) == 4

    def test_seeded(self):
        a, b = params_for(seed=5), params_for(seed=5)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)


class TestMlpFeatures:
    def test_zero_weights(self):
        p = params_for()
        for name, t in p.items():
            if name.startswith("mlp"):
                t.data[...] = 0
        np.testing.assert_array_equal(model.mlp_features(np.ones((5, 3)), p).data, 0)

    def test_single_point(self):
        assert model.mlp_features(np.ones((1, 3)), params_for()).shape == (1, WIDE.D)

    def test_row_permutation(self):
        rng = np.random.default_rng(0)
        x = random_patch(rng, 10)
        perm = rng.permutation(10)
        p = params_for()
        np.testing.assert_array_equal(model.mlp_features(x[perm], p).data, model.mlp_features(x, p).data[perm])

    def test_shape_error(self):
        with pytest.raises(ValueError):
            model.mlp_features(np.ones((5, 2)), params_for())


class TestTsa:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.w = [Tensor(rng.normal(size=(8, 4))) for _ in range(3)]
        self.rng = rng

    def test_single_row(self):
        f = Tensor(self.rng.normal(size=(1, 8)))
        out, attn = model.tsa(f, *self.w, 2.0)
        np.testing.assert_array_equal(attn, [[1.0]])
        np.testing.assert_allclose(out.data, (f.data / 2.0) @ self.w[2].data, rtol=1e-15)

    def test_identical_rows_uniform(self):
        f = Tensor(np.tile(self.rng.normal(size=(1, 8)), (6, 1)))
        out, attn = model.tsa(f, *self.w, 1.0)
        np.testing.assert_allclose(attn, 1 / 6, atol=1e-15)
        np.testing.assert_allclose(out.data, np.tile(out.data[:1], (6, 1)), atol=1e-14)

    def test_rows_are_convex_combinations(self):
        f = Tensor(self.rng.normal(size=(7, 8)))
        out, attn = model.tsa(f, *self.w, 1.3)
        np.testing.assert_allclose(attn.sum(axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(out.data, attn @ ((f.data / 1.3) @ self.w[2].data), atol=1e-12)

    def test_entropy_grows_with_temperature(self):
        for _ in range(20):
            f = Tensor(self.rng.normal(size=(10, 8)) * 2)
            e1 = entropy(model.tsa(f, *self.w, 1.0)[1])
            e2 = entropy(model.tsa(f, *self.w, 2.0)[1])
            assert e2 > e1

    def test_non_positive_temperature(self):
        f = Tensor(np.ones((3, 8)))
        for t in (0.0, -1.0):
            with pytest.raises(ValueError, match="non-positive temperature"):
                model.tsa(f, *self.w, t)


class TestTmhsa:
    def test_single_head_identity_output(self):
        cfg = model.ModelConfig(k=6, D=8, H=1, mlp_widths=(8, 8, 8), ffn_hidden=8, fc_widths=(4, 3))
        p = model.init_params(cfg)
        p["attn.o.w"].data[...] = np.eye(8)
        f = Tensor(np.random.default_rng(2).normal(size=(6, 8)))
        out = model.tmhsa(f, p)
        ref, _ = model.tsa(f, p["attn0.wq"], p["attn0.wk"], p["attn0.wv"], 1.0)
        np.testing.assert_allclose(out.data, ref.data, rtol=1e-14)

    def test_zero_values(self):
        p = params_for()
        for h in range(WIDE.H):
            p[f"attn{h}.wv"].data[...] = 0
        out = model.tmhsa(Tensor(np.random.default_rng(3).normal(size=(10, 16))), p)
        np.testing.assert_array_equal(out.data, 0)

    @pytest.mark.parametrize("k,D,H", [(5, 8, 2), (10, 16, 4), (50, 32, 4)])
    def test_shapes(self, k, D, H):
        cfg = model.ModelConfig(k=k, D=D, H=H, mlp_widths=(8, 8, D), ffn_hidden=8, fc_widths=(3,))
        out, attn = model.tmhsa(Tensor(np.ones((k, D))), model.init_params(cfg), return_attention=True)
        assert out.shape == (k, D)
        assert attn.shape == (H, k, k)

    def test_entropy_monotone_in_temperature(self):
        rng = np.random.default_rng(4)
        p = params_for()
        f = Tensor(rng.normal(size=(10, 16)) * 3)
        values = []
        for t in (0.25, 0.5, 1, 2, 4):
            p.log_t.data[...] = np.log(t)
            values.append(entropy(model.tmhsa(f, p, return_attention=True)[1]))
        assert np.all(np.diff(values) >= 0)


class TestForward:
    def test_unit_output(self):
        rng = np.random.default_rng(5)
        p = params_for()
        for _ in range(100):
            n, amap = model.forward(random_patch(rng, 10), p)
            assert abs(np.linalg.norm(n) - 1) < 1e-12
            np.testing.assert_allclose(amap.per_head.sum(axis=-1), 1, atol=1e-9)

    def test_deterministic(self):
        x = random_patch(np.random.default_rng(6), 10)
        p = params_for()
        np.testing.assert_array_equal(model.forward(x, p)[0], model.forward(x, p)[0])

    def test_rotation_changes_prediction(self):
        x = random_patch(np.random.default_rng(7), 10)
        p = params_for()
        c, s = np.cos(0.7), np.sin(0.7)
        r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        n0, n1 = model.forward(x, p)[0], model.forward(x @ r.T, p)[0]
        assert abs(abs(n1 @ (r @ n0)) - 1) > 1e-6 or abs(abs(n1 @ n0) - 1) > 1e-6

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        p = params_for()
        for _ in range(20):
            x = random_patch(rng, 10)
            perm = rng.permutation(10)
            np.testing.assert_allclose(model.forward(x[perm], p)[0], model.forward(x, p)[0], atol=1e-9)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        p = params_for()
        xs = np.stack([random_patch(rng, 10) for _ in range(7)])
        batch = model.predict_normals(xs, p, batch_size=3)
        for x, n in zip(xs, batch):
            np.testing.assert_allclose(model.forward(x, p)[0], n, atol=1e-14)


class TestAttentionExport:
    def test_zero_logits_uniform(self):
        p = params_for()
        for h in range(WIDE.H):
            p[f"attn{h}.wq"].data[...] = 0
            p[f"attn{h}.wk"].data[...] = 0
        amap = model.export_attention(random_patch(np.random.default_rng(10), 10), p)
        np.testing.assert_allclose(amap.per_head, 0.1, atol=1e-15)
        np.testing.assert_allclose(amap.received, 0.1, atol=1e-15)

    def test_received_is_distribution(self):
        rng = np.random.default_rng(11)
        p = params_for()
        for _ in range(20):
            amap = model.export_attention(random_patch(rng, 10), p)
            assert np.all(amap.per_head >= 0) and np.all(amap.per_head <= 1)
            assert np.all(amap.received >= 0)
            assert abs(amap.received.sum() - 1) < 1e-9

    def test_batched_received(self):
        rng = np.random.default_rng(12)
        p = params_for()
        xs = np.stack([random_patch(rng, 10) for _ in range(4)])
        rows = model.predict_attention(xs, p)
        np.testing.assert_allclose(rows[2], model.export_attention(xs[2], p).received, atol=1e-14)


class TestSineLoss:
    def test_values(self):
        assert model.sine_loss([[1.0, 2, 3]], [[1.0, 2, 3]]).item() == pytest.approx(0.0, abs=1e-15)
        assert model.sine_loss([[1.0, 0, 0]], [[0.0, 1, 0]]).item() == 1.0
        v = np.array([[1.0, 1, 0]]) / np.sqrt(2)
        assert model.sine_loss(v, [[1.0, 0, 0]]).item() == pytest.approx(np.sin(np.pi / 4), abs=1e-15)

    def test_sign_blind(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            p, g = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
            a = model.sine_loss(p, g).item()
            assert a == model.sine_loss(p, -g).item()
            assert 0.0 <= a <= 1.0

    def test_zero_vector(self):
        with pytest.raises(ValueError, match="zero vector in loss"):
            model.sine_loss([[0.0, 0, 0]], [[0.0, 0, 1]])
        with pytest.raises(ValueError, match="zero vector in loss"):
            model.sine_loss([[1.0, 0, 0]], [[0.0, 0, 0]])


class TestGradients:
    def test_full_pipeline_grad_check(self):
        for seed in range(3):
            build, leaves, _ = pipeline_case(seed)
            assert ad.grad_check(build, leaves, eps=PIPELINE_EPS) < 1e-4

    def test_temperature_gradient_is_live(self):
        rng = np.random.default_rng(14)
        nonzero = 0
        for i in range(100):
            p = params_for(seed=i)
            loss = model.batch_loss(random_patch(rng, 10)[None], rng.normal(size=(1, 3)), p)
            nonzero += abs(ad.backward(loss)[p.log_t].item()) > 0
        assert nonzero >= 99


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": Tensor([[1.5, -2.0]])}
        state = model.AdamState()
        state.m["w"] = np.array([[0.2, 0.2]])
        state.v["w"] = np.array([[0.1, 0.1]])
        state.step = 3
        model.adam_step(p, {"w": np.zeros((1, 2))}, state, 1e-3)
        fresh = {"w": Tensor([[1.5, -2.0]])}
        model.adam_step(fresh, {"w": np.zeros((1, 2))}, model.AdamState(), 1e-3)
        np.testing.assert_array_equal(fresh["w"].data, [[1.5, -2.0]])
        np.testing.assert_allclose(state.m["w"], 0.18)
        np.testing.assert_allclose(state.v["w"], 0.0999)

    def test_first_step_hand_value(self):
        p = {"w": Tensor([[0.0]])}
        model.adam_step(p, {"w": np.array([[0.5]])}, model.AdamState(), 1e-3)
        assert p["w"].data[0, 0] == pytest.approx(-1e-3, rel=1e-7)

    def test_constant_gradient_step_tends_to_lr(self):
        p = {"w": Tensor([[0.0]])}
        state = model.AdamState()
        prev = 0.0
        for _ in range(10000):
            model.adam_step(p, {"w": np.array([[0.3]])}, state, 1e-3)
            step, prev = prev - p["w"].data[0, 0], p["w"].data[0, 0]
        assert step == pytest.approx(1e-3, rel=0.01)

    def test_non_finite(self):
        with pytest.raises(FloatingPointError, match="diverged"):
            model.adam_step({"w": Tensor([[0.0]])}, {"w": np.array([[np.nan]])}, model.AdamState(), 1e-3)


def planar_dataset(n, k, seed=0):
    rng = np.random.default_rng(seed)
    base = np.column_stack([rng.uniform(-1, 1, size=(k, 2)), np.zeros(k)])
    base -= base.mean(axis=0)
    return model.PatchSet(np.repeat(base[None], n, axis=0), np.tile([0.0, 0.0, 1.0], (n, 1)))


class TestTrain:
    def test_identical_planar_patches_converge(self):
        data = planar_dataset(32, 10)
        cfg = model.TrainConfig(epochs=200, batch_size=32, lr=1e-2, decay_epochs=(100, 150))
        _, losses = model.train(data, cfg, WIDE)
        assert losses[-1] < 1e-3

    def test_same_seed_same_curve(self):
        data = planar_dataset(40, 10)
        cfg = model.TrainConfig(epochs=5, batch_size=16, lr=1e-3)
        a = model.train(data, cfg, WIDE)
        b = model.train(data, cfg, WIDE)
        assert a[1] == b[1]
        for name in a[0]:
            np.testing.assert_array_equal(a[0][name].data, b[0][name].data)

    def test_frozen_temperature(self):
        rng = np.random.default_rng(15)
        data = model.PatchSet(np.stack([random_patch(rng, 10) for _ in range(20)]), rng.normal(size=(20, 3)))
        frozen, _ = model.train(data, model.TrainConfig(epochs=3, batch_size=8, learn_temperature=False), WIDE)
        learned, _ = model.train(data, model.TrainConfig(epochs=3, batch_size=8, lr=1e-2), WIDE)
        assert frozen.temperature == 1.0
        assert learned.temperature != 1.0

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            model.train(model.PatchSet(np.zeros((0, 10, 3)), np.zeros((0, 3))), model.TrainConfig(epochs=1), WIDE)

    def test_callback_and_pairs_input(self):
        rng = np.random.default_rng(16)
        pairs = [(random_patch(rng, 10), rng.normal(size=3)) for _ in range(6)]
        seen = []
        model.train(pairs, model.TrainConfig(epochs=2, batch_size=4), WIDE, callback=lambda e, l, p: seen.append(e))
        assert seen == [0, 1]


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        p = params_for(seed=4)
        p.log_t.data[...] = 0.37
        model.save_checkpoint(tmp_path / "m.ckpt", WIDE, p, {"note": "x"})
        cfg, q, extra = model.load_checkpoint(tmp_path / "m.ckpt")
        assert cfg == WIDE and extra == {"note": "x"}
        for name in p:
            np.testing.assert_array_equal(p[name].data, q[name].data)
        x = random_patch(np.random.default_rng(17), 10)
        np.testing.assert_array_equal(model.forward(x, p)[0], model.forward(x, q)[0])

    def test_same_params_same_bytes(self, tmp_path):
        model.save_checkpoint(tmp_path / "a", WIDE, params_for(seed=1))
        model.save_checkpoint(tmp_path / "b", WIDE, params_for(seed=1))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            model.load_checkpoint(tmp_path / "bad")

    def test_truncated(self, tmp_path):
        model.save_checkpoint(tmp_path / "m", WIDE, params_for())
        data = (tmp_path / "m").read_bytes()
        (tmp_path / "m").write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            model.load_checkpoint(tmp_path / "m")
