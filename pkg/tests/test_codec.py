import numpy as np
import pytest

from tailpcc import codec, metrics, train
from tailpcc.codec import Codec, LossError, LossWeights, ModelConfig
from tailpcc.nn import DimensionError, gradcheck
from tailpcc.nn import autograd as ag
from tailpcc.pcio import PointCloud, generate_synthetic
from tailpcc.taildrop import build_mask, channel_importance

SMALL = ModelConfig(C=8, C_xyz=4, hidden=16)


class TestModelConfig:
    def test_stage_arithmetic(self):
        assert ModelConfig().level_sizes(96) == [96, 48, 16, 4]
        assert ModelConfig().level_sizes(2048)[-1] == 86

    def test_pool_within_bound(self):
        cfg = ModelConfig()
        assert cfg.pool == 96 and cfg.pool <= cfg.max_upsample ** len(cfg.stages)

    @pytest.mark.parametrize("kw", [dict(stages=("1/5",)), dict(C=1), dict(C=300), dict(literal_xyz=True)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        cfg = ModelConfig(C=16, stages=("1/4", "1/2"))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncode:
    def test_latent_shapes(self):
        pc = generate_synthetic("plane", 96, seed=0)
        lat = Codec(ModelConfig()).encode(pc)
        assert lat.z.shape == (32, 4) and lat.z_xyz.shape == (16, 4) and lat.M == 4
        assert lat.d.sum() == 96

    def test_permutation_invariance(self, rng):
        pc = generate_synthetic("gaussian_clusters", 300, 2.0, seed=1)
        model = Codec(SMALL)
        a = model.encode(pc)
        perm = rng.permutation(pc.n)
        b = model.encode(PointCloud(pc.coords[perm]))
        # match anchors by position, then compare latents
        key_a = np.lexsort(a.sample_coords.T)
        key_b = np.lexsort(b.sample_coords.T)
        np.testing.assert_array_equal(a.sample_coords[key_a], b.sample_coords[key_b])
        np.testing.assert_allclose(a.z[:, key_a], b.z[:, key_b], atol=1e-6)
        np.testing.assert_allclose(a.z_xyz[:, key_a], b.z_xyz[:, key_b], atol=1e-6)

    def test_degenerate_cloud_is_finite(self):
        lat = Codec(SMALL).encode(PointCloud(np.full((50, 3), 0.3)))
        assert np.isfinite(lat.z).all() and np.isfinite(lat.z_xyz).all()

    def test_literal_coordinates(self):
        cfg = ModelConfig(C=8, C_xyz=3, hidden=16, literal_xyz=True)
        pc = generate_synthetic("plane", 96, seed=0)
        lat = Codec(cfg).encode(pc)
        np.testing.assert_allclose(lat.z_xyz.T, (lat.sample_coords - 0.5) * cfg.coord_scale)


class TestDecode:
    def test_output_bound_and_masks(self):
        model = Codec(SMALL)
        pc = generate_synthetic("sphere_surface", 256, seed=0)
        lat = model.encode(pc)
        for k in range(1, SMALL.C + 1):
            rho = 1 - k / SMALL.C
            mz = build_mask(channel_importance(lat.z), rho).bits
            mx = build_mask(channel_importance(lat.z_xyz), rho).bits
            out = model.decode(np.round(lat.z) * mz[:, None], np.round(lat.z_xyz) * mx[:, None], lat.d)
            assert 1 <= out.n <= lat.M * SMALL.pool
            assert np.isfinite(out.coords).all()

    def test_shape_mismatch(self):
        model = Codec(SMALL)
        with pytest.raises(DimensionError):
            model.decode(np.zeros((7, 3)), np.zeros((4, 3)), np.ones(3))
        with pytest.raises(DimensionError):
            model.decode(np.zeros((8, 3)), np.zeros((4, 2)), np.ones(3))

    def test_initial_counts_follow_density(self):
        model = Codec(SMALL)
        sc = model.scaffold(generate_synthetic("gaussian_clusters", 400, 4.0, seed=0))
        lat = model.encode(sc)
        out = model.decoder(lat.z.T, lat.z_xyz.T, lat.d, codec._gain(lat.M))
        np.testing.assert_allclose(out.counts.data, lat.d)

    def test_zeroed_features_stay_near_anchors(self, toy_combined, toy_test_split):
        ck, _ = toy_combined
        pc, other = toy_test_split[0], toy_test_split[1]
        lat = ck.model.encode(pc)
        out = ck.model.decode(np.zeros_like(lat.z), np.round(lat.z_xyz), lat.d)
        anchors = lat.sample_coords
        assert metrics.chamfer_distance(out, anchors) < metrics.chamfer_distance(out, other)


class TestLoss:
    def test_perfect_reconstruction_zero_rate(self):
        assert codec.total_loss(0.0, 0.0, 0.0, 0.0, 0.0, LossWeights()).total == 0.0

    def test_lambda_linearity(self):
        w1, w2 = LossWeights(lam=1e-3), LossWeights(lam=2e-3)
        a = codec.total_loss(0.01, 2.0, 0.3, 0.05, 4.0, w1).total
        b = codec.total_loss(0.01, 2.0, 0.3, 0.05, 4.0, w2).total
        assert b - a == pytest.approx(1e-3 * 4.0, abs=1e-15)

    def test_breakdown_recomputation(self):
        model = Codec(SMALL)
        sc = model.scaffold(generate_synthetic("plane", 128, seed=3))
        lb = train.cloud_loss(model, sc, 0.3, np.random.default_rng(0), LossWeights())
        w = lb.weights
        want = lb.cd + w.sigma * lb.dens + w.omega * lb.coord + w.eta * lb.points + w.lam * lb.bpp
        assert lb.total == pytest.approx(want, abs=1e-12)
        assert lb.recompute() == pytest.approx(lb.total, abs=1e-12)

    def test_nonfinite_term_named(self):
        with pytest.raises(LossError, match="bpp"):
            codec.total_loss(0.0, 0.0, 0.0, 0.0, float("nan"), LossWeights())

    def test_chamfer_loss_matches_metric(self, rng):
        a, b = rng.uniform(size=(40, 3)), rng.uniform(size=(55, 3))
        got = codec.chamfer_loss(ag.Tensor(a), b).item()
        assert got == pytest.approx(metrics.chamfer_distance(a, b), abs=1e-12)

    def test_full_loss_gradcheck(self):
        model = Codec(SMALL)
        # zero-initialised biases put every self-offset pre-activation on the
        # leaky-ReLU kink; check at a generic point as after any training step
        jitter = np.random.default_rng(2)
        for p in model.parameters().values():
            if not p.data.any():
                p.data = jitter.normal(0.0, 0.05, p.shape)
        sc = model.scaffold(generate_synthetic("gaussian_clusters", 64, 2.0, seed=0))
        fn = lambda: train.cloud_loss(model, sc, 0.25, np.random.default_rng(1), LossWeights()).tensor  # noqa: E731
        r = gradcheck(fn, model.parameters(), max_per_param=12, seed=0)
        assert r.fraction >= 0.99, r


class TestTrainer:
    def _scaffolds(self, model, n=3):
        return [model.scaffold(generate_synthetic(s, 128, 2.0, seed=i))
                for i, s in zip(range(n), ("plane", "sphere_surface", "gaussian_clusters"))]

    def test_deterministic(self):
        states = []
        for _ in range(2):
            model = Codec(SMALL)
            tr = train.Trainer(model, train.TrainConfig(epochs=2, batch_size=2))
            tr.fit(self._scaffolds(model))
            states.append(model.state_dict())
        for k in states[0]:
            np.testing.assert_array_equal(states[0][k], states[1][k])

    def test_schedule_and_ema(self):
        model = Codec(SMALL)
        tr = train.Trainer(model, train.TrainConfig(epochs=1, batch_size=3, lr_step=1))
        seen = []
        tr.fit(self._scaffolds(model), epochs=3, on_step=lambda r: seen.append((r.epoch, r.lr)))
        assert seen == [(0, 1e-3), (1, 5e-4), (2, 2.5e-4)]
        assert tr.norm.initialized and tr.norm.t == 4

    def test_feature_only_never_masks_coordinates(self, monkeypatch):
        model = Codec(SMALL)
        sc = self._scaffolds(model, 1)[0]
        masks = []
        real = train.build_mask
        monkeypatch.setattr(train, "build_mask", lambda imp, rho, training=False: masks.append(len(imp)) or real(imp, rho, training))
        train.cloud_loss(model, sc, 0.9, np.random.default_rng(0), LossWeights(), "feature_only")
        assert masks == [SMALL.C]

    def test_bad_strategy(self):
        with pytest.raises(ValueError):
            train.TrainConfig(strategy="random")
