import numpy as np
import pytest

from crosscare import autodiff as ad
from crosscare.model import GruNetwork, load_checkpoint, predict_probabilities, save_checkpoint

from fdcheck import assert_grads_match


def test_zero_weights_logits_equal_output_bias():
    model = GruNetwork(input_width=3, hidden_dim=4, seed=0)
    model.set_values({k: np.zeros_like(v.value) for k, v in model.params.items()})
    bias = 0.37
    values = model.get_values()
    values["cls.b2"] = np.array([[bias]])
    model.set_values(values)
    fp = model.forward(np.random.default_rng(0).normal(size=(2, 5, 3)))
    assert np.allclose(fp.logit_matrix(), bias)


def test_single_step_recurrence_defined():
    model = GruNetwork(input_width=3, hidden_dim=4, seed=1)
    fp = model.forward(np.ones((1, 1, 3)))
    assert fp.n_steps == 1
    assert fp.reprs[0].shape == (1, 4)


def test_hidden_states_bounded_by_one():
    model = GruNetwork(input_width=6, hidden_dim=8, n_layers=2, seed=2)
    x = np.random.default_rng(5).normal(scale=50.0, size=(3, 40, 6))
    fp = model.forward(x)
    for z in fp.reprs:
        assert np.all(np.abs(z.value) <= 1.0 + 1e-12)


def test_permuting_two_hours_changes_outputs_only_from_earlier_index():
    model = GruNetwork(input_width=4, hidden_dim=5, seed=3)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 8, 4))
    i, j = 2, 5
    x_perm = x.copy()
    x_perm[:, [i, j], :] = x_perm[:, [j, i], :]
    base = model.forward(x).logit_matrix()
    perm = model.forward(x_perm).logit_matrix()
    assert np.array_equal(base[:, :i], perm[:, :i])
    assert not np.allclose(base[:, i:], perm[:, i:])


def test_non_finite_input_rejected():
    model = GruNetwork(input_width=2, hidden_dim=2, seed=0)
    x = np.ones((1, 3, 2))
    x[0, 1, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        model.forward(x)


def test_eval_forward_deterministic_train_needs_rng():
    model = GruNetwork(input_width=3, hidden_dim=4, dropout=0.5, seed=4)
    x = np.random.default_rng(1).normal(size=(2, 6, 3))
    a = model.forward(x).logit_matrix()
    b = model.forward(x).logit_matrix()
    assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="dropout_rng"):
        model.forward(x, train=True)
    t1 = model.forward(x, train=True, dropout_rng=np.random.default_rng(7)).logit_matrix()
    t2 = model.forward(x, train=True, dropout_rng=np.random.default_rng(7)).logit_matrix()
    assert np.array_equal(t1, t2)


def test_full_model_gradient_check():
    # The acceptance suite runs this over 20 seeds; one seed here for speed.
    model = GruNetwork(input_width=8, hidden_dim=4, seed=11)
    x = np.random.default_rng(11).normal(size=(3, 5, 8))
    y = np.array([[0, 1, 0, 1, 1], [1, 0, 0, 0, 1], [0, 0, 1, 1, 0]], dtype=float)

    def build():
        fp = model.forward(x)
        return ad.mean(ad.bce_with_logits(ad.concat_cols(fp.logits), y))

    assert_grads_match(build, model.parameters())


def test_two_layer_gradient_check():
    model = GruNetwork(input_width=4, hidden_dim=3, n_layers=2, seed=13)
    x = np.random.default_rng(13).normal(size=(2, 4, 4))
    y = np.zeros((2, 4))

    def build():
        fp = model.forward(x)
        return ad.mean(ad.bce_with_logits(ad.concat_cols(fp.logits), y))

    assert_grads_match(build, model.parameters())


def test_predict_probabilities():
    logits = np.array([[0.0, 1000.0], [-1000.0, 0.0]])
    hourly = predict_probabilities(logits, "hourly")
    assert hourly[0, 0] == 0.5
    assert hourly[0, 1] == pytest.approx(1.0, abs=1e-12)  # clamped at +30, no overflow
    assert hourly[1, 0] == pytest.approx(0.0, abs=1e-12)
    final = predict_probabilities(logits, "single_at_24h")
    assert final.shape == (2, 1)
    assert final[0, 0] == hourly[0, 1]


def test_parameter_count_reported():
    model = GruNetwork(input_width=8, hidden_dim=4, seed=0)
    gru = 3 * (8 * 4 + 4 * 4 + 4)
    cls = (4 * 4 + 4) + (4 * 1 + 1)
    assert model.n_parameters() == gru + cls


def test_checkpoint_round_trip(tmp_path):
    model = GruNetwork(input_width=5, hidden_dim=6, n_layers=2, dropout=0.3, seed=21)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(model, path, extra={"task": "mortality"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"task": "mortality"}
    assert loaded.hidden_dim == 6 and loaded.n_layers == 2
    for name in model.parameter_names():
        assert np.array_equal(loaded.params[name].value, model.params[name].value)
    x = np.random.default_rng(2).normal(size=(2, 7, 5))
    assert np.array_equal(loaded.forward(x).logit_matrix(), model.forward(x).logit_matrix())
