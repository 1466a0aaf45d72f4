import json

import numpy as np
import pytest

from oracles import central_diff, max_rel_err
from replay_sentinel import nn_core as nn
from replay_sentinel import tcn_ae as ta
from replay_sentinel.errors import ModelFormatError, NumericalError
from replay_sentinel.nn_core import ConvFilter


def tiny_config(**kw):
    base = dict(d=2, n_filters=3, kernel_size=2, dilations=(1, 2), latent_channels=2,
                sample_factor=2, dropout_rate=0.0, T_train=16, batch_size=2, n_epochs=2, seed=5)
    base.update(kw)
    return ta.TcnAeConfig(**base)


def sine_mixture(T, d, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(T)[:, None]
    periods = rng.uniform(40, 400, size=(3, d))
    phases = rng.uniform(0, 2 * np.pi, size=(3, d))
    x = sum(np.sin(2 * np.pi * t / periods[i] + phases[i]) for i in range(3))
    return x + 0.05 * rng.normal(size=(T, d))


class TestConfig:
    def test_defaults(self):
        cfg = ta.TcnAeConfig()
        assert (cfg.n_filters, cfg.kernel_size, cfg.latent_channels, cfg.sample_factor) == (20, 3, 4, 4)
        assert cfg.dilations == (1, 2, 4, 8, 16)
        assert (cfg.batch_size, cfg.n_epochs, cfg.lr, cfg.T_train) == (32, 10, 1e-3, 1024)

    @pytest.mark.parametrize("bad", [dict(n_filters=0), dict(dilations=()), dict(dilations=(1, 0)),
                                     dict(T_train=1022), dict(dropout_rate=1.0), dict(lr=-1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ta.TcnAeConfig(**bad)

    def test_round_trip(self):
        cfg = ta.TcnAeConfig(dilations=(4, 1, 2), seed=9)
        again = ta.TcnAeConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg and again.dilations == (4, 1, 2)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ta.TcnAeConfig.from_dict({"n_filter": 3})


class TestBuild:
    def test_default_structure(self):
        m = ta.build_model(ta.TcnAeConfig())
        assert len(m.encoder_blocks) == 5 and len(m.decoder_blocks) == 5
        assert (m.enc_1x1.d_in, m.enc_1x1.d_out) == (20, 4)
        assert (m.dec_1x1.d_in, m.dec_1x1.d_out) == (20, 10)
        assert [b.conv1.dilation for b in m.encoder_blocks] == [1, 2, 4, 8, 16]
        assert all(f.causal for _, f in m.filters())
        # width changes need a 1x1 projection, equal widths use identity
        assert m.encoder_blocks[0].skip is not None and m.encoder_blocks[1].skip is None
        assert m.decoder_blocks[0].skip is not None

    def test_parameter_count_closed_form(self):
        for cfg in (ta.TcnAeConfig(), tiny_config(), ta.TcnAeConfig(d=20, latent_channels=8)):
            assert ta.build_model(cfg).n_params == ta.count_parameters(cfg)
        assert ta.count_parameters(ta.TcnAeConfig()) == 23908

    def test_same_seed_identical(self):
        a = ta.build_model(tiny_config(), rng_seed=3).parameters()
        b = ta.build_model(tiny_config(), rng_seed=3).parameters()
        c = ta.build_model(tiny_config(), rng_seed=4).parameters()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))


class TestResidualBlock:
    def _block(self, d, width, rate=0.0):
        rng = np.random.default_rng(0)
        c1 = ConvFilter(rng.normal(size=(2, d, width)), np.ones(width), np.zeros(width), 1)
        c2 = ConvFilter(rng.normal(size=(2, width, width)), np.ones(width), np.zeros(width), 2)
        skip = None if d == width else ConvFilter(rng.normal(size=(1, d, width)), np.ones(width), np.zeros(width))
        return ta.ResidualBlock(c1, c2, rate, skip)

    def test_zero_residual_branch(self):
        b = self._block(3, 3)
        b.conv2.g = np.zeros(3)
        x = np.random.default_rng(1).normal(size=(10, 3))
        np.testing.assert_array_equal(ta.residual_block_forward(x, b), x)

    @pytest.mark.parametrize("d", [1, 3, 5])
    def test_width(self, d):
        x = np.random.default_rng(2).normal(size=(7, d))
        assert ta.residual_block_forward(x, self._block(d, 3)).shape == (7, 3)

    def test_inference_ignores_rng(self):
        b = self._block(2, 4, rate=0.5)
        x = np.random.default_rng(3).normal(size=(9, 2))
        a = ta.residual_block_forward(x, b, training=False, rng=1)
        c = ta.residual_block_forward(x, b, training=False, rng=2)
        assert np.array_equal(a, c)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            ta.residual_block_forward(np.ones((5, 4)), self._block(2, 3))


class TestEncodeDecode:
    def test_shapes(self):
        m = ta.build_model(ta.TcnAeConfig())
        x = np.random.default_rng(0).normal(size=(1024, 10))
        g = ta.encode(m, x)
        assert g.shape == (256, 4)
        assert ta.decode(m, g).shape == (1024, 10)
        assert np.array_equal(ta.encode(m, x), g)

    def test_s1_keeps_length(self):
        m = ta.build_model(tiny_config(sample_factor=1))
        assert ta.encode(m, np.ones((11, 2))).shape == (11, 2)

    def test_zero_output_layer(self):
        m = ta.build_model(tiny_config())
        m.dec_1x1.g = np.zeros_like(m.dec_1x1.g)
        out = ta.reconstruct(m, np.random.default_rng(0).normal(size=(20, 2)))
        assert not np.any(out)

    def test_channel_mismatch(self):
        m = ta.build_model(tiny_config())
        with pytest.raises(ValueError):
            ta.encode(m, np.ones((8, 3)))
        with pytest.raises(ValueError):
            ta.decode(m, np.ones((4, 3)))

    @pytest.mark.parametrize("T", [15, 16, 17])
    def test_reconstruct_shape_and_determinism(self, T):
        m = ta.build_model(tiny_config())
        x = np.random.default_rng(T).normal(size=(T, 2))
        a, b = ta.reconstruct(m, x), ta.reconstruct(m, x)
        assert a.shape == x.shape and a.tobytes() == b.tobytes()

    def test_causal_reconstruction_prefix(self):
        # future samples cannot change the reconstruction of earlier whole pooling groups
        m = ta.build_model(tiny_config())
        x = np.random.default_rng(0).normal(size=(32, 2))
        y = x.copy()
        y[20:] += 5.0
        np.testing.assert_array_equal(ta.reconstruct(m, x)[:20], ta.reconstruct(m, y)[:20])


def jitter_biases(m, seed):
    # zero biases put exact zeros in front of ReLUs at t=0; move away from the kink
    rng = np.random.default_rng(seed)
    for _, f in m.filters():
        f.bias = 0.1 * rng.normal(size=f.bias.shape)
    return m


class TestGradients:
    def test_end_to_end_finite_difference(self):
        m = jitter_biases(ta.build_model(tiny_config(), rng_seed=1), 0)
        xb = np.random.default_rng(2).normal(size=(2, 16, 2))
        params = m.parameters()
        _, grads = ta.loss_and_grads(m, xb, training=False)

        def loss():
            return ta.loss_and_grads(m, xb, training=False)[0]

        fd = central_diff(loss, params, h=1e-6)
        for g, f in zip(grads, fd):
            assert max_rel_err(g, f, floor=1e-7) <= 1e-4

    def test_dropout_gradient_uses_same_mask(self):
        m = jitter_biases(ta.build_model(tiny_config(dropout_rate=0.3), rng_seed=1), 0)
        xb = np.random.default_rng(2).normal(size=(2, 16, 2))

        def loss():
            return ta.loss_and_grads(m, xb, training=True, rng=7)[0]

        _, grads = ta.loss_and_grads(m, xb, training=True, rng=7)
        fd = central_diff(loss, m.parameters()[:3], h=1e-6)
        for g, f in zip(grads[:3], fd):
            assert max_rel_err(g, f, floor=1e-7) <= 1e-4


class TestTraining:
    def test_subsequences(self):
        x = np.arange(1000.0)[:, None]
        w = ta.extract_training_subsequences(x, 100, 50, 0)
        assert w.shape == (50, 100, 1)
        assert np.all((w[:, 0, 0] >= 0) & (w[:, 0, 0] <= 900))
        assert np.all(np.diff(w[..., 0], axis=1) == 1)
        assert np.array_equal(w, ta.extract_training_subsequences(x, 100, 50, 0))
        full = ta.extract_training_subsequences(x, 1000, 3, 1)
        assert all(np.array_equal(f, x) for f in full)
        with pytest.raises(ValueError):
            ta.extract_training_subsequences(x, 1001, 1, 0)

    def test_draws_per_epoch(self):
        cfg = ta.TcnAeConfig()
        assert ta.subsequences_per_epoch(cfg, 10_000) == 32
        assert ta.subsequences_per_epoch(cfg, 40_000) == 64
        assert ta.subsequences_per_epoch(ta.TcnAeConfig(subsequences_per_epoch=7), 10_000) == 7

    def test_loss_decreases_on_sine_mixture(self):
        x = sine_mixture(8192, 3)
        m = ta.train(ta.build_model(ta.TcnAeConfig(d=3)), x)
        hist = [v for _, v in m.loss_history]
        assert len(hist) == 10 and hist[-1] < hist[0]

    def test_trained_reconstruction_beats_untrained(self):
        x = sine_mixture(512, 2, seed=1)
        cfg = tiny_config(n_filters=8, T_train=128, batch_size=4, n_epochs=15,
                          subsequences_per_epoch=8, lr=1e-2)
        m0 = ta.build_model(cfg)
        m1 = ta.train(m0, x)
        err0 = nn.logcosh_loss(x, ta.reconstruct(m0, x))[0]
        err1 = nn.logcosh_loss(x, ta.reconstruct(m1, x))[0]
        assert err1 < err0

    def test_lr_zero_is_null_update(self):
        m0 = ta.build_model(tiny_config(lr=0.0))
        m1 = ta.train(m0, sine_mixture(64, 2))
        assert all(np.array_equal(a, b) for a, b in zip(m0.parameters(), m1.parameters()))

    def test_deterministic_and_pure(self):
        x = sine_mixture(64, 2)
        m0 = ta.build_model(tiny_config(dropout_rate=0.2))
        before = [p.copy() for p in m0.parameters()]
        a, b = ta.train(m0, x), ta.train(m0, x)
        assert a.loss_history == b.loss_history
        assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        assert all(np.array_equal(p, q) for p, q in zip(before, m0.parameters()))
        assert m0.loss_history == []

    def test_continues_epoch_count(self):
        x = sine_mixture(64, 2)
        m = ta.train(ta.train(ta.build_model(tiny_config()), x), x)
        assert [e for e, _ in m.loss_history] == [1, 2, 3, 4]

    def test_non_finite_reports_epoch(self):
        m = ta.build_model(tiny_config())
        m.dec_1x1.bias = np.full(2, 1e308)
        with pytest.raises(NumericalError, match="epoch 1, batch 0"):
            ta.train(m, sine_mixture(64, 2))

    def test_shape_check(self):
        with pytest.raises(ValueError):
            ta.train(ta.build_model(tiny_config()), np.ones((64, 3)))


class TestSerialization:
    def _trained(self):
        return ta.train(ta.build_model(tiny_config(dilations=(2, 1))), sine_mixture(64, 2))

    def test_round_trip_bit_identical(self):
        m = self._trained()
        back = ta.load_model(ta.save_model(m))
        x = sine_mixture(40, 2, seed=4)
        assert ta.reconstruct(back, x).tobytes() == ta.reconstruct(m, x).tobytes()
        assert back.config == m.config and back.config.dilations == (2, 1)
        assert back.loss_history == m.loss_history
        assert back.adam.t == m.adam.t
        assert ta.save_model(back) == ta.save_model(m)

    def test_resume_matches_continuous_training(self):
        x = sine_mixture(64, 2)
        m = self._trained()
        a = ta.train(m, x)
        b = ta.train(ta.load_model(ta.save_model(m)), x)
        assert a.loss_history == b.loss_history

    def test_corrupted_payload(self):
        raw = ta.save_model(self._trained())
        doc = json.loads(raw)
        doc["loss_history"][0][1] += 1.0
        with pytest.raises(ModelFormatError, match="checksum"):
            ta.load_model(json.dumps(doc).encode())

    def test_truncated(self):
        raw = ta.save_model(self._trained())
        with pytest.raises(ModelFormatError):
            ta.load_model(raw[: len(raw) // 2])

    def test_version_mismatch(self):
        doc = json.loads(ta.save_model(self._trained()))
        doc["version"] = 99
        with pytest.raises(ModelFormatError, match="version"):
            ta.load_model(json.dumps(doc).encode())
