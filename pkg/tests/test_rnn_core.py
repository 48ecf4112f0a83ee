import math

import numpy as np
import pytest

from pedcross import features as ft
from pedcross import rnn_core as rc
from tests.conftest import random_sample


def scalar_sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_step_oracle(x, h, c, p):
    """Scalar-loop re-derivation of the LSTM gate equations."""
    hdim = len(h)
    h2, c2 = np.zeros(hdim), np.zeros(hdim)
    for k in range(hdim):
        def pre(row):
            return (sum(p.W_x[row, j] * x[j] for j in range(len(x)))
                    + sum(p.W_h[row, j] * h[j] for j in range(hdim))
                    + p.b[row])
        i = scalar_sigmoid(pre(k))
        f = scalar_sigmoid(pre(hdim + k))
        g = math.tanh(pre(2 * hdim + k))
        o = scalar_sigmoid(pre(3 * hdim + k))
        c2[k] = f * c[k] + i * g
        h2[k] = o * math.tanh(c2[k])
    return h2, c2


def gru_step_oracle(x, h, p):
    hdim = len(h)
    h2 = np.zeros(hdim)
    for k in range(hdim):
        def wx(row):
            return sum(p.W_x[row, j] * x[j] for j in range(len(x))) + p.b[row]

        def uh(row):
            return sum(p.W_h[row, j] * h[j] for j in range(hdim))

        z = scalar_sigmoid(wx(k) + uh(k))
        r = scalar_sigmoid(wx(hdim + k) + uh(hdim + k))
        n = math.tanh(wx(2 * hdim + k) + r * uh(2 * hdim + k))
        h2[k] = (1.0 - z) * n + z * h[k]
    return h2


def zero_cell(gates, hdim, d):
    return rc.CellParams(
        np.zeros((gates * hdim, d)), np.zeros((gates * hdim, hdim)), np.zeros(gates * hdim)
    )


def random_cell(gates, hdim, d, rng):
    return rc.CellParams(
        rng.normal(size=(gates * hdim, d)) * 0.5,
        rng.normal(size=(gates * hdim, hdim)) * 0.5,
        rng.normal(size=gates * hdim) * 0.5,
    )


class TestLstmStep:
    def test_zero_params_zero_state(self, rng):
        h2, c2 = rc.lstm_step(rng.random(3), np.zeros(4), np.zeros(4), zero_cell(4, 4, 3))
        np.testing.assert_array_equal(h2, 0.0)
        np.testing.assert_array_equal(c2, 0.0)

    def test_zero_params_unit_cell(self, rng):
        # all gates sigmoid(0)=0.5, g=0: c' = 0.5*c, h' = 0.5*tanh(0.5)
        h2, c2 = rc.lstm_step(rng.random(3), np.zeros(4), np.ones(4), zero_cell(4, 4, 3))
        np.testing.assert_allclose(c2, 0.5)
        np.testing.assert_allclose(h2, 0.5 * np.tanh(0.5), atol=1e-12)
        assert h2[0] == pytest.approx(0.2311, abs=1e-4)

    def test_matches_scalar_oracle(self, rng):
        p = random_cell(4, 5, 3, rng)
        x, h, c = rng.normal(size=3), rng.normal(size=5), rng.normal(size=5)
        h2, c2 = rc.lstm_step(x, h, c, p)
        eh, ec = lstm_step_oracle(x, h, c, p)
        np.testing.assert_allclose(h2, eh, atol=1e-6)
        np.testing.assert_allclose(c2, ec, atol=1e-6)


class TestGruStep:
    def test_zero_params_half_decay(self):
        h2 = rc.gru_step(np.ones(2), np.full(3, 0.8), zero_cell(3, 3, 2))
        np.testing.assert_allclose(h2, 0.4)

    def test_zero_params_zero_state(self):
        h2 = rc.gru_step(np.ones(2), np.zeros(3), zero_cell(3, 3, 2))
        np.testing.assert_array_equal(h2, 0.0)

    def test_matches_scalar_oracle(self, rng):
        p = random_cell(3, 4, 6, rng)
        x, h = rng.normal(size=6), rng.normal(size=4)
        np.testing.assert_allclose(rc.gru_step(x, h, p), gru_step_oracle(x, h, p), atol=1e-6)


class TestRnnForward:
    def test_length_one_equals_single_step(self, rng):
        cfg = rc.ModelConfig(rnn_type="lstm", hidden_dim=4, img_dim=6)
        model = rc.init_model(cfg, seed=1)
        x = rng.normal(size=(1, 6))
        readout = rc.rnn_forward(x, model)
        h2, _ = rc.lstm_step(x[0], np.zeros(4), np.zeros(4), model.cell("fw"))
        np.testing.assert_allclose(readout, h2)

    def test_bidirectional_readout_width(self, rng):
        cfg = rc.ModelConfig(rnn_type="bdlstm", hidden_dim=4, img_dim=6)
        model = rc.init_model(cfg, seed=1)
        readout = rc.rnn_forward(rng.normal(size=(5, 6)), model)
        assert readout.shape == (8,)

    def test_palindrome_with_tied_params(self, rng):
        cfg = rc.ModelConfig(rnn_type="bdgru", hidden_dim=3, img_dim=4)
        model = rc.init_model(cfg, seed=2)
        for suffix in ("W_x", "W_h", "b"):
            model.params[f"bw.{suffix}"] = model.params[f"fw.{suffix}"].copy()
        half = rng.normal(size=(3, 4))
        seq = np.concatenate([half, half[-2::-1]])  # palindrome
        readout = rc.rnn_forward(seq, model)
        np.testing.assert_allclose(readout[:3], readout[3:])

    def test_reversal_equivariance(self, rng):
        cfg = rc.ModelConfig(rnn_type="bdlstm", hidden_dim=3, img_dim=4)
        model = rc.init_model(cfg, seed=3)
        seq = rng.normal(size=(6, 4))
        readout = rc.rnn_forward(seq, model)
        swapped = model.copy()
        for suffix in ("W_x", "W_h", "b"):
            swapped.params[f"fw.{suffix}"], swapped.params[f"bw.{suffix}"] = (
                model.params[f"bw.{suffix}"].copy(),
                model.params[f"fw.{suffix}"].copy(),
            )
        readout_rev = rc.rnn_forward(seq[::-1], swapped)
        np.testing.assert_allclose(readout_rev[:3], readout[3:])
        np.testing.assert_allclose(readout_rev[3:], readout[:3])

    def test_empty_sequence_rejected(self):
        cfg = rc.ModelConfig(rnn_type="gru", hidden_dim=2, img_dim=3)
        model = rc.init_model(cfg)
        with pytest.raises(ValueError):
            rc.rnn_forward(np.zeros((0, 3)), model)


class TestHead:
    def model_with_zero_head(self, out_dim=1):
        cfg = rc.ModelConfig(rnn_type="lstm", hidden_dim=4, img_dim=3,
                             horizons=out_dim, dropout=0.5)
        model = rc.init_model(cfg, seed=4)
        model.params["head.W"][:] = 0.0
        model.params["head.b"][:] = 0.0
        return model

    def test_zero_head_gives_half(self, rng):
        model = self.model_with_zero_head(out_dim=8)
        probs = rc.head_forward(rng.normal(size=4), model)
        np.testing.assert_allclose(probs, 0.5)

    def test_eval_ignores_mask(self, rng):
        cfg = rc.ModelConfig(rnn_type="lstm", hidden_dim=4, img_dim=3, dropout=0.5)
        model = rc.init_model(cfg, seed=5)
        readout = rng.normal(size=4)
        p1 = rc.head_forward(readout, model, mode="eval", mask=np.zeros(4))
        p2 = rc.head_forward(readout, model, mode="eval")
        np.testing.assert_array_equal(p1, p2)

    def test_inverted_dropout_scaling(self, rng):
        cfg = rc.ModelConfig(rnn_type="lstm", hidden_dim=4, img_dim=3, dropout=0.5)
        model = rc.init_model(cfg, seed=6)
        mask = rc.dropout_mask(cfg, np.random.default_rng(0))
        surviving = mask > 0
        assert np.all(mask[surviving] == 2.0)

    def test_dropout_expectation_identity(self):
        # E[dropout(v)] == v over masks (inverted scaling), 1e5 Monte Carlo draws
        cfg = rc.ModelConfig(rnn_type="lstm", hidden_dim=4, img_dim=3, dropout=0.5)
        gen = np.random.default_rng(42)
        v = np.array([1.0, -2.0, 3.0, 0.5])
        acc = np.zeros(4)
        n = 100_000
        for _ in range(n):
            acc += v * rc.dropout_mask(cfg, gen)
        np.testing.assert_allclose(acc / n, v, rtol=0.01)

    def test_probabilities_strictly_inside_unit_interval(self, rng, small_model):
        sample = random_sample(rng, seq_len=5, img_dim=5)
        probs = rc.model_forward(sample, small_model)
        assert np.all(probs > 0.0) and np.all(probs < 1.0)


class TestModelForward:
    def test_eval_mode_deterministic(self, rng, small_model):
        sample = random_sample(rng, seq_len=4, img_dim=5)
        p1 = rc.model_forward(sample, small_model, mode="eval")
        p2 = rc.model_forward(sample, small_model, mode="eval")
        np.testing.assert_array_equal(p1, p2)

    def test_untrained_zero_head_is_half(self, rng):
        cfg = rc.ModelConfig(rnn_type="gru", hidden_dim=3, img_dim=5, horizons=8)
        model = rc.init_model(cfg, seed=7)
        model.params["head.W"][:] = 0.0
        model.params["head.b"][:] = 0.0
        sample = random_sample(rng, seq_len=3, img_dim=5, out_dim=8)
        np.testing.assert_allclose(rc.model_forward(sample, model), 0.5)

    def test_matches_composition_of_individual_ops(self, rng, small_model):
        sample = random_sample(rng, seq_len=4, img_dim=5)
        tables = small_model.embedding_tables()
        seq = np.stack([
            ft.assemble_input(
                sample.images[t],
                int(sample.looking[t]),
                int(sample.orientation[t]),
                int(sample.movement[t]),
                tuple(sample.centers[t]),
                tables,
                small_model.config.variables,
            )
            for t in range(sample.seq_len)
        ])
        expected = rc.head_forward(rc.rnn_forward(seq, small_model), small_model)
        np.testing.assert_allclose(
            rc.model_forward(sample, small_model), expected, atol=1e-6
        )

    def test_feature_width_mismatch_rejected(self, rng, small_model):
        sample = random_sample(rng, seq_len=4, img_dim=9)
        with pytest.raises(ValueError, match="img_dim"):
            rc.model_forward(sample, small_model)


class TestCheckpoint:
    @pytest.mark.parametrize("rnn_type", rc.RNN_TYPES)
    def test_roundtrip_reproduces_outputs_bit_exactly(self, tmp_path, rng, rnn_type):
        cfg = rc.ModelConfig(rnn_type=rnn_type, hidden_dim=3, img_dim=5,
                             variables=("looking", "center"), horizons=8)
        model = rc.init_model(cfg, seed=11)
        sample = random_sample(rng, seq_len=4, img_dim=5, out_dim=8)
        path = tmp_path / "m.pci"
        rc.save_model(model, path)
        loaded = rc.load_model(path)
        assert loaded.config == cfg
        p1 = rc.model_forward(sample, model)
        p2 = rc.model_forward(sample, loaded)
        np.testing.assert_array_equal(p1, p2)

    def test_resave_is_byte_stable(self, tmp_path):
        cfg = rc.ModelConfig(rnn_type="bdgru", hidden_dim=4, img_dim=7)
        model = rc.init_model(cfg, seed=9)
        a, b = tmp_path / "a.pci", tmp_path / "b.pci"
        rc.save_model(model, a)
        rc.save_model(rc.load_model(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_seed_recorded(self, tmp_path):
        model = rc.init_model(rc.ModelConfig(img_dim=4), seed=123)
        path = tmp_path / "m.pci"
        rc.save_model(model, path)
        assert rc.load_model(path).seed == 123

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "nope.pci"
        path.write_bytes(b"garbage!" + b"\0" * 8)
        with pytest.raises(ValueError, match="checkpoint"):
            rc.load_model(path)


class TestConfigValidation:
    def test_unknown_rnn_type(self):
        with pytest.raises(ValueError):
            rc.ModelConfig(rnn_type="transformer")

    def test_multi_layer_unsupported(self):
        with pytest.raises(ValueError):
            rc.ModelConfig(num_layers=2)

    def test_variable_order_normalized(self):
        cfg = rc.ModelConfig(variables=("center", "looking"))
        assert cfg.variables == ("looking", "center")

    def test_input_dim_with_all_variables(self):
        cfg = rc.ModelConfig(img_dim=512, variables=ft.ALL_VARIABLES)
        assert cfg.input_dim == 521
