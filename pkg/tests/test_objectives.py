import numpy as np
import pytest

from crosscare import autodiff as ad
from crosscare.model import GruNetwork
from crosscare.objectives import (
    DomainBatch,
    FishrState,
    GroupDroState,
    PenaltyConfig,
    compute_update,
    coral_penalty,
    domain_bce_loss,
    erm_loss,
    fishr_domain_variance,
    fishr_penalty,
    flatten_valid_reprs,
    groupdro_step,
    mldg_split,
    per_sample_classifier_gradients,
    vrex_penalty,
)

from fdcheck import assert_grads_match


def const_loss(x: float) -> ad.Node:
    return ad.constant(np.array([[x]]))


def random_batch(domain_id: str, seed: int, n=4, t=5, p=8) -> DomainBatch:
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(n, t, p))
    labels = (rng.random((n, t)) < 0.4).astype(float)
    mask = rng.random((n, t)) < 0.7
    mask[:, 0] = True  # every stay keeps at least one labelled hour
    return DomainBatch(domain_id, inputs, labels, mask)


# ---------------------------------------------------------------- ERM


def test_erm_is_arithmetic_mean_of_domain_losses():
    total = erm_loss([const_loss(0.2), const_loss(0.4)])
    assert total.value.item() == pytest.approx(0.3, abs=1e-15)


def test_perfect_predictions_give_near_zero_loss():
    model = GruNetwork(input_width=2, hidden_dim=2, seed=0)
    x = np.zeros((2, 3, 2))
    fp = model.forward(x)
    labels = (fp.logit_matrix() > 0).astype(float)
    # Force saturated logits through the classifier bias.
    values = model.get_values()
    values["cls.b2"] = np.array([[40.0]])
    model.set_values(values)
    fp = model.forward(x)
    loss = domain_bce_loss(fp, np.ones((2, 3)), np.ones((2, 3), dtype=bool))
    assert loss.value.item() < 1e-12


def test_domain_loss_pooled_vs_stay_averaged():
    model = GruNetwork(input_width=2, hidden_dim=3, seed=1)
    batch = random_batch("a", seed=5, n=3, t=4, p=2)
    fp = model.forward(batch.inputs)
    pooled = domain_bce_loss(fp, batch.labels, batch.mask, stay_averaged=False)
    by_stay = domain_bce_loss(fp, batch.labels, batch.mask, stay_averaged=True)
    losses = ad.bce_with_logits(ad.concat_cols(fp.logits), batch.labels).value
    m = batch.mask
    assert pooled.value.item() == pytest.approx(losses[m].sum() / m.sum())
    per_stay = (losses * m).sum(axis=1) / m.sum(axis=1)
    assert by_stay.value.item() == pytest.approx(per_stay.mean())


# ---------------------------------------------------------------- CORAL


def test_coral_identical_domains_zero():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 3))
    pen = coral_penalty([ad.constant(z), ad.constant(z.copy())])
    assert abs(pen.value.item()) < 1e-10


def test_coral_hand_computed_pair():
    z_a = ad.constant(np.array([[0.0], [2.0]]))
    z_b = ad.constant(np.array([[1.0], [3.0]]))
    pen = coral_penalty([z_a, z_b])
    assert pen.value.item() == pytest.approx(1.0, abs=1e-12)
    # Squared mean term gives the same number here (diff of means is 1).
    pen_sq = coral_penalty([z_a, z_b], squared_mean_term=True)
    assert pen_sq.value.item() == pytest.approx(1.0, abs=1e-12)


def test_coral_three_domains_sums_three_pairs():
    rng = np.random.default_rng(3)
    zs = [ad.constant(rng.normal(size=(5, 2))) for _ in range(3)]
    total = coral_penalty(zs).value.item()
    pair_sum = sum(
        coral_penalty([zs[i], zs[j]]).value.item()
        for i in range(3)
        for j in range(i + 1, 3)
    )
    assert total == pytest.approx(pair_sum, rel=1e-12)


def test_coral_positive_under_mean_shift():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(8, 3))
    pen = coral_penalty([ad.constant(z), ad.constant(z + 0.5)])
    assert pen.value.item() > 1e-4


# ---------------------------------------------------------------- VREx


def test_vrex_penalty_two_domain_arithmetic():
    losses = [const_loss(0.1), const_loss(0.3)]
    pen = vrex_penalty(losses)
    assert pen.value.item() == pytest.approx(0.01, abs=1e-15)
    total = ad.add(erm_loss(losses), ad.scale(pen, 100.0))
    assert total.value.item() == pytest.approx(1.2, abs=1e-12)


def test_vrex_equal_losses_zero_penalty():
    assert vrex_penalty([const_loss(0.5)] * 3).value.item() == 0.0


# ---------------------------------------------------------------- Fishr


def test_per_sample_gradient_hand_example():
    hiddens = ad.constant(np.array([[1.0, 0.0]]))
    logits = ad.constant(np.array([[0.0]]))  # sigma = 0.5
    g = per_sample_classifier_gradients(hiddens, logits, np.array([0.0]))
    assert np.allclose(g.value, np.array([[0.5, 0.0, 0.5]]))


def test_per_sample_gradient_zero_when_probability_matches_label():
    hiddens = ad.constant(np.array([[0.3, -0.2]]))
    logits = ad.constant(np.array([[40.0]]))  # sigma ~= 1
    g = per_sample_classifier_gradients(hiddens, logits, np.array([1.0]))
    assert np.max(np.abs(g.value)) < 1e-12


def test_per_sample_gradients_match_autodiff_per_sample(tol=1e-10):
    # The closed form must agree with one backward pass per sample.
    model = GruNetwork(input_width=3, hidden_dim=4, seed=8)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(5, 1, 3))
    y = (rng.random(5) < 0.5).astype(float)
    fp = model.forward(x)
    closed = per_sample_classifier_gradients(
        fp.hiddens[0], fp.logits[0], y
    ).value
    w2, b2 = model.params["cls.w2"], model.params["cls.b2"]
    for i in range(5):
        fp_i = model.forward(x[i : i + 1])
        loss_i = ad.bce_with_logits(fp_i.logits[0], np.array([[y[i]]]))
        ad.zero_grads(model.parameters())
        ad.backward(ad.sum_(loss_i))
        row = np.concatenate([w2.grad.ravel(), b2.grad.ravel()])
        assert np.linalg.norm(row - closed[i]) <= tol * max(1.0, np.linalg.norm(row))


def test_fishr_penalty_two_domain_arithmetic_no_ema():
    state = FishrState()
    v1 = ad.constant(np.array([[1.0]]))
    v2 = ad.constant(np.array([[3.0]]))
    pen = fishr_penalty(["a", "b"], [v1, v2], state, ema=0.0)
    assert pen.value.item() == pytest.approx(1.0, abs=1e-15)
    assert state.smoothed["a"].item() == 1.0


def test_fishr_ema_smoothing_and_freeze():
    state = FishrState()
    fishr_penalty(["a"], [ad.constant(np.array([[2.0]]))], state, ema=0.5)
    fishr_penalty(["a"], [ad.constant(np.array([[4.0]]))], state, ema=0.5)
    assert state.smoothed["a"].item() == pytest.approx(3.0)  # 0.5*2 + 0.5*4
    frozen = FishrState()
    fishr_penalty(["a"], [ad.constant(np.array([[2.0]]))], frozen, ema=1.0)
    fishr_penalty(["a"], [ad.constant(np.array([[9.0]]))], frozen, ema=1.0)
    assert frozen.smoothed["a"].item() == 2.0


def test_fishr_identical_domains_zero_penalty():
    model = GruNetwork(input_width=3, hidden_dim=4, seed=9)
    batch = random_batch("a", seed=9, p=3)
    twin = DomainBatch("b", batch.inputs.copy(), batch.labels.copy(), batch.mask.copy())
    state = FishrState()
    variances = [
        fishr_domain_variance(model.forward(b.inputs), b.labels, b.mask)
        for b in (batch, twin)
    ]
    pen = fishr_penalty(["a", "b"], variances, state, ema=0.0)
    assert abs(pen.value.item()) < 1e-10


# ---------------------------------------------------------------- GroupDRO


def test_groupdro_weight_update_arithmetic():
    state = GroupDroState(["a", "b"], q=np.array([0.5, 0.5]))
    loss, q = groupdro_step([const_loss(1.0), const_loss(2.0)], state, eta=1.0)
    e = np.e
    assert np.allclose(q, [1 / (1 + e), e / (1 + e)], atol=1e-12)
    assert loss.value.item() == pytest.approx((1 + 2 * e) / (1 + e))
    assert q.sum() == pytest.approx(1.0, abs=1e-12)


def test_groupdro_equal_losses_keep_uniform():
    state = GroupDroState(["a", "b", "c"])
    _, q = groupdro_step([const_loss(0.7)] * 3, state, eta=0.5)
    assert np.allclose(q, 1.0 / 3.0, atol=1e-15)


def test_groupdro_concentrates_on_worst_domain():
    state = GroupDroState(["lo", "hi"])
    hi_weight = []
    for _ in range(50):
        _, q = groupdro_step([const_loss(0.2), const_loss(0.9)], state, eta=0.1)
        hi_weight.append(q[1])
    assert all(b > a for a, b in zip(hi_weight, hi_weight[1:]))
    assert hi_weight[-1] > 0.95
    assert state.q.sum() == pytest.approx(1.0, abs=1e-12)


def test_groupdro_simplex_every_step_random_losses():
    rng = np.random.default_rng(12)
    state = GroupDroState(["a", "b", "c", "d"])
    for _ in range(200):
        losses = [const_loss(v) for v in rng.uniform(0, 3, size=4)]
        _, q = groupdro_step(losses, state, eta=0.05)
        assert abs(q.sum() - 1.0) < 1e-12
        assert (q >= 0).all()


# ---------------------------------------------------------------- MLDG


def test_mldg_split_sizes_and_errors():
    rng = np.random.default_rng(0)
    s, v = mldg_split(["a", "b", "c"], 1, rng)
    assert len(s) == 2 and len(v) == 1 and set(s + v) == {"a", "b", "c"}
    s, v = mldg_split(["a", "b", "c"], 0, rng)
    assert s == ["a", "b", "c"] and v == []
    with pytest.raises(ValueError):
        mldg_split(["a"], 1, rng)
    with pytest.raises(ValueError):
        mldg_split(["a", "b"], 2, rng)


def test_mldg_first_order_formula_on_quadratic_toy():
    # L_e(theta) = (theta - c_e)^2, meta-train {0, 1}, meta-test {2}.
    theta, alpha, beta = 1.5, 0.1, 0.5

    def loss_at(value: float, centers: list[float]) -> tuple[ad.Node, ad.Node]:
        p = ad.leaf(np.array([[value]]))
        losses = [ad.square(ad.sub(p, const_loss(c))) for c in centers]
        return p, erm_loss(losses)

    p, loss_s = loss_at(theta, [0.0, 1.0])
    ad.backward(loss_s)
    g_s = p.grad.item()
    assert g_s == pytest.approx(2 * theta - 2 * 0.5)

    inner = theta - alpha * g_s
    p2, loss_v = loss_at(inner, [2.0])
    ad.backward(loss_v)
    g_v = p2.grad.item()
    assert g_v == pytest.approx(2 * (inner - 2.0))

    direction = g_s + beta * g_v
    assert direction == pytest.approx(2.0 + 0.5 * 2 * (1.3 - 2.0))


def test_mldg_beta_zero_uses_meta_train_gradient_only():
    model = GruNetwork(input_width=8, hidden_dim=4, seed=30)
    batches = [random_batch("a", 31), random_batch("b", 32)]
    cfg = PenaltyConfig(mldg_beta=0.0, mldg_n_meta_test=1)
    res = compute_update(
        model, batches, "mldg", cfg, step=0, split_rng=np.random.default_rng(1)
    )
    # Recompute g_S by hand for the same split.
    s_ids, _ = mldg_split(["a", "b"], 1, np.random.default_rng(1))
    chosen = [b for b in batches if b.domain_id in s_ids]
    fp = model.forward(chosen[0].inputs)
    loss = domain_bce_loss(fp, chosen[0].labels, chosen[0].mask)
    ad.zero_grads(model.parameters())
    ad.backward(loss)
    for name, node in model.params.items():
        assert np.array_equal(res.grads[name], node.grad)


# ------------------------------------------------- ERM reduction and FD


def reduction_cases():
    return [
        ("coral", PenaltyConfig(coral_gamma=0.0)),
        ("vrex", PenaltyConfig(vrex_lambda=0.0)),
        ("vrex", PenaltyConfig(vrex_lambda=500.0, vrex_warmup=10)),  # step < warmup
        ("fishr", PenaltyConfig(fishr_lambda=0.0)),
        ("groupdro", PenaltyConfig(groupdro_eta=1e-300)),
        ("mldg", PenaltyConfig(mldg_beta=0.0, mldg_n_meta_test=0)),
    ]


def test_every_objective_reduces_to_erm_when_disabled():
    model = GruNetwork(input_width=8, hidden_dim=4, seed=40)
    batches = [random_batch("a", 41), random_batch("b", 42)]
    base = compute_update(model, batches, "erm", PenaltyConfig(), step=0)
    for objective, cfg in reduction_cases():
        res = compute_update(
            model,
            batches,
            objective,
            cfg,
            step=0,
            groupdro_state=GroupDroState(["a", "b"]),
            fishr_state=FishrState(),
            split_rng=np.random.default_rng(0),
        )
        for name in base.grads:
            diff = np.abs(res.grads[name] - base.grads[name]).max()
            assert diff <= 1e-12, f"{objective}/{name}: {diff}"


def test_active_objectives_pass_finite_difference_checks():
    # One seed per objective here; the acceptance suite sweeps 20.
    batches = [random_batch("a", 50, n=3, t=4), random_batch("b", 51, n=3, t=4)]

    def check(objective: str, cfg: PenaltyConfig, **states):
        model = GruNetwork(input_width=8, hidden_dim=4, seed=52)

        def build():
            res_states = {
                "groupdro_state": GroupDroState(["a", "b"]),
                "fishr_state": FishrState(),
            }
            res_states.update(states)
            passes = [model.forward(b.inputs) for b in batches]
            losses = [domain_bce_loss(fp, b.labels, b.mask) for fp, b in zip(passes, batches)]
            base = erm_loss(losses)
            if objective == "coral":
                reprs = [flatten_valid_reprs(fp, b.mask) for fp, b in zip(passes, batches)]
                return ad.add(base, ad.scale(coral_penalty(reprs), cfg.coral_gamma))
            if objective == "vrex":
                return ad.add(base, ad.scale(vrex_penalty(losses), cfg.vrex_lambda))
            if objective == "fishr":
                variances = [
                    fishr_domain_variance(fp, b.labels, b.mask)
                    for fp, b in zip(passes, batches)
                ]
                pen = fishr_penalty(["a", "b"], variances, FishrState(), cfg.fishr_ema)
                return ad.add(base, ad.scale(pen, cfg.fishr_lambda))
            if objective == "groupdro":
                fixed_q = np.array([0.3, 0.7])
                return ad.add(ad.scale(losses[0], fixed_q[0]), ad.scale(losses[1], fixed_q[1]))
            raise AssertionError(objective)

        assert_grads_match(build, model.parameters())

    check("coral", PenaltyConfig(coral_gamma=10.0))
    check("vrex", PenaltyConfig(vrex_lambda=50.0, vrex_warmup=0))
    check("fishr", PenaltyConfig(fishr_lambda=50.0, fishr_warmup=0, fishr_ema=0.0))
    check("groupdro", PenaltyConfig())


def test_domain_batch_validation():
    with pytest.raises(ValueError, match="labelled"):
        DomainBatch("a", np.zeros((1, 2, 3)), np.zeros((1, 2)), np.zeros((1, 2), dtype=bool))
    with pytest.raises(ValueError, match="match"):
        DomainBatch("a", np.zeros((1, 2, 3)), np.zeros((2, 2)), np.ones((1, 2), dtype=bool))
