"""Kernel-regime predictors: brute-force oracles and the sign-agreement law."""

import numpy as np
import pytest

from pertlab.kernel import lambda_factor, phi_closed
from pertlab.network import init_net, train
from pertlab.perturbation import build_adv_set
from pertlab.datasets import gen_shifted_gaussian
from pertlab.theory import (
    cosine,
    evaluate_conditions,
    f_hat,
    g_hat,
    mean_gradient_cosine,
    predicted_direction,
    predicted_directions,
    sufficient_ratio,
    width_diagnostic,
)


def _naive_f_hat(z, X, y, w, gamma):
    d = X.shape[1]
    acc = 0.0
    for n in range(X.shape[0]):
        acc += y[n] * phi_closed(X[n], z, gamma=gamma, d=d).value * float(X[n] @ z) * w[n]
    return acc / X.shape[0]


def _naive_g_hat(z, P, wg, X, y, wf, gamma):
    d = X.shape[1]
    acc = 0.0
    for n in range(P.shape[0]):
        inner = 0.0
        for k in range(X.shape[0]):
            inner += (
                y[k]
                * phi_closed(X[n], X[k], gamma=gamma, d=d).value
                * float(X[k] @ z)
                * wf[k]
            )
        acc += phi_closed(P[n], z, gamma=gamma, d=d).value * wg[n] * inner
    return acc / (P.shape[0] * X.shape[0])


def _naive_ratio(z, X, y, w):
    d = X.shape[1]
    num = abs(sum(y[n] * float(X[n] @ z) * w[n] for n in range(X.shape[0])))
    cands = list(X) + [z]
    den = max(
        sum(
            lambda_factor(X[n], c, d=d) * abs(float(X[n] @ z)) * w[n]
            for n in range(X.shape[0])
        )
        for c in cands
    )
    if den == 0.0:
        return 0.0
    return num / den


def _random_problem(rng, n=6, d=4):
    X = rng.standard_normal((n, d))
    y = rng.choice([-1, 1], n).astype(np.int8)
    w = rng.uniform(0.1, 2.0, n)
    z = rng.standard_normal(d)
    return X, y, w, z


def test_f_hat_matches_naive():
    rng = np.random.default_rng(0)
    for gamma in (0.0, 0.3):
        X, y, w, z = _random_problem(rng)
        got = f_hat(z, x=X, y=y, w=w, gamma=gamma)
        want = _naive_f_hat(z, X, y, w, gamma)
        assert got == pytest.approx(want, rel=1e-12)
    # batch form
    Z = rng.standard_normal((5, 4))
    X, y, w, _ = _random_problem(rng)
    got = f_hat(Z, x=X, y=y, w=w, gamma=0.2)
    assert got.shape == (5,)
    for j in range(5):
        assert got[j] == pytest.approx(_naive_f_hat(Z[j], X, y, w, 0.2), rel=1e-12)


def test_g_hat_matches_naive():
    rng = np.random.default_rng(1)
    X, y, wf, z = _random_problem(rng, n=5, d=3)
    P = rng.standard_normal((5, 3)) * 0.1
    wg = rng.uniform(0.5, 1.5, 5)
    got = g_hat(z, p=P, wg=wg, x=X, y=y, wf=wf, gamma=0.1)
    want = _naive_g_hat(z, P, wg, X, y, wf, 0.1)
    assert got == pytest.approx(want, rel=1e-12)
    Z = rng.standard_normal((4, 3))
    got = g_hat(Z, p=P, wg=wg, x=X, y=y, wf=wf, gamma=0.1)
    for j in range(4):
        assert got[j] == pytest.approx(_naive_g_hat(Z[j], P, wg, X, y, wf, 0.1), rel=1e-12)


def test_predicted_directions_match_naive():
    rng = np.random.default_rng(2)
    X, y, w, _ = _random_problem(rng, n=7, d=4)
    D = predicted_directions(x=X, y=y, w=w, gamma=0.25)
    assert D.shape == (7, 4)
    for n in range(7):
        want = np.zeros(4)
        for k in range(7):
            want += y[k] * phi_closed(X[n], X[k], gamma=0.25, d=4).value * X[k] * w[k]
        want /= 7
        assert np.allclose(D[n], want, rtol=1e-12)


def test_sufficient_ratio_matches_naive():
    rng = np.random.default_rng(3)
    for _ in range(5):
        X, y, w, z = _random_problem(rng)
        got = sufficient_ratio(z, x=X, y=y, w=w)
        assert got == pytest.approx(_naive_ratio(z, X, y, w), rel=1e-12)


def test_sufficient_ratio_zero_overlap():
    # z orthogonal to every sample: 0/0 defined as 0
    X = np.array([[1.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    y = np.array([1, -1], dtype=np.int8)
    w = np.ones(2)
    z = np.array([0.0, 0.0, 2.0])
    assert sufficient_ratio(z, x=X, y=y, w=w) == 0.0
    assert f_hat(z, x=X, y=y, w=w, gamma=0.0) == 0.0


def test_sign_agreement_law():
    # whenever the sufficient ratio clears (1-gamma)/(1+gamma), the kernel
    # predictors for f and for g (any perturbation inputs, any positive
    # weights, either scenario) must land on the same side of zero
    rng = np.random.default_rng(4)
    fired = 0
    for trial in range(300):
        gamma = float(rng.uniform(0.0, 0.9))
        n, d = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        X = rng.standard_normal((n, d))
        z = rng.standard_normal(d)
        if trial % 2 == 0:
            y = np.sign(X @ z).astype(np.int8)  # aligned labels: ratio can fire
            y[y == 0] = 1
        else:
            y = rng.choice([-1, 1], n).astype(np.int8)
        wf = rng.uniform(0.1, 3.0, n)
        wg = rng.uniform(0.1, 3.0, n)
        R = rng.standard_normal((n, d)) * rng.uniform(0.01, 1.0)
        ratio = sufficient_ratio(z, x=X, y=y, w=wf)
        if ratio <= (1 - gamma) / (1 + gamma):
            continue
        fired += 1
        fv = f_hat(z, x=X, y=y, w=wf, gamma=gamma)
        ga = g_hat(z, p=R, wg=wg, x=X, y=y, wf=wf, gamma=gamma)
        gb = g_hat(z, p=X + R, wg=wg, x=X, y=y, wf=wf, gamma=gamma)
        assert np.sign(fv) == np.sign(ga) == np.sign(gb) != 0
    assert fired >= 60  # the certificate actually fires on aligned cases


def test_width_diagnostic():
    tr_f, _, tr_g = _pipeline("a")
    wf, wg = tr_f.integral_weights, tr_g.integral_weights
    want = tr_f.dataset.d ** 2 * (wf.mean() + wg.mean()) ** 2
    assert width_diagnostic(tr_f, tr_g) == pytest.approx(want, rel=1e-15)


# ---------------------------------------------------------------------------
# gradient alignment


def test_mean_gradient_cosine_perfect_on_kernel_limit():
    # cosine of a vector with itself is 1; feed predicted directions as if
    # they were the measured gradients via a stub trace-like structure
    rng = np.random.default_rng(5)
    X, y, w, _ = _random_problem(rng, n=5, d=3)
    D = predicted_directions(x=X, y=y, w=w, gamma=0.0)
    cos = mean_gradient_cosine(gradients=D, x=X, y=y, w=w, gamma=0.0)
    assert cos == pytest.approx(1.0, abs=1e-12)
    cos = mean_gradient_cosine(gradients=-D, x=X, y=y, w=w, gamma=0.0)
    assert cos == pytest.approx(-1.0, abs=1e-12)


def test_mean_gradient_cosine_zero_vector_safe():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([1, 1], dtype=np.int8)
    w = np.ones(2)
    G = np.zeros((2, 2))
    cos = mean_gradient_cosine(gradients=G, x=X, y=y, w=w, gamma=0.0)
    assert cos == 0.0


# ---------------------------------------------------------------------------
# condition reports on real traces


def _pipeline(scenario, eps=0.05, optimizer="plain"):
    ds = gen_shifted_gaussian(40, 10, seed=20)
    net_f = init_net(48, 10, gamma=0.0, seed=21)
    tr_f = train(net_f, ds, loss="identity", steps=50, step_size=0.5, optimizer=optimizer)
    adv = build_adv_set(tr_f, scenario=scenario, eps=eps, target_mode="uniform", seed=22)
    net_g = init_net(48, 10, gamma=0.0, seed=23)
    tr_g = train(net_g, adv.dataset, loss="identity", steps=50, step_size=0.5)
    return tr_f, adv, tr_g


@pytest.mark.parametrize("scenario", ["a", "b"])
def test_evaluate_conditions_fields(scenario):
    tr_f, adv, tr_g = _pipeline(scenario)
    z = tr_f.dataset.x[0] * 0.9
    rep = evaluate_conditions(z, tr_f, adv, tr_g, c1=1.0, c2=1.0)
    # margins are the raw predictors scaled by the mean integral weights
    wf, wg = tr_f.integral_weights, tr_g.integral_weights
    fv = f_hat(z, x=tr_f.dataset.x, y=tr_f.dataset.y, w=wf, gamma=0.0)
    assert rep.f_hat == pytest.approx(fv, rel=1e-12)
    assert rep.margin_f == pytest.approx(abs(fv) / wf.mean(), rel=1e-12)
    assert rep.margin_g == pytest.approx(abs(rep.g_hat) / (wf.mean() * wg.mean()), rel=1e-12)
    t1 = rep.thresholds_used["threshold1"]
    t2 = rep.thresholds_used["threshold2"]
    assert rep.cond1 == (rep.margin_f > t1)
    assert rep.cond2 == (rep.margin_g > t2)
    assert rep.cond3 == (rep.sufficient_ratio > 1.0)  # gamma = 0
    assert rep.conditions_hold == (rep.cond1, rep.cond2, rep.cond3)
    assert rep.sufficient_threshold == 1.0
    assert rep.sign_f in (-1.0, 0.0, 1.0)
    assert rep.width_diag == pytest.approx(width_diagnostic(tr_f, tr_g), rel=1e-15)
    assert t1 == pytest.approx(1.0 + 1.0 / tr_f.flow_time)
    assert rep.signs_agree == (rep.sign_f == rep.sign_g)
    assert np.allclose(rep.z, z)
    d = rep.to_dict()
    assert d["signs_agree"] == rep.signs_agree and d["thresholds_used"]["c1"] == 1.0
    if rep.cond3:
        assert rep.signs_agree is True and rep.sign_f != 0.0


def test_threshold2_scenario_shapes():
    # scenario a uses 1/sqrt(N); scenario b replaces it with a z-dependent
    # overlap term, so the two thresholds must differ off the origin
    tr_f, adv_a, tr_g_a = _pipeline("a")
    _, adv_b, tr_g_b = _pipeline("b")
    z = tr_f.dataset.x[1]
    rep_a = evaluate_conditions(z, tr_f, adv_a, tr_g_a)
    rep_b = evaluate_conditions(z, tr_f, adv_b, tr_g_b)
    X = tr_f.dataset.x
    n = X.shape[0]
    sd_over_eps = np.sqrt(10) / adv_a.eps
    want_a = 1.0 / tr_f.flow_time + sd_over_eps * (
        1.0 / tr_g_a.flow_time + 1.0 / np.sqrt(n)
    )
    assert rep_a.thresholds_used["threshold2"] == pytest.approx(want_a, rel=1e-12)
    overlap = np.sqrt(np.sum((X @ z + 1.0) ** 2)) / n
    want_b = 1.0 / tr_f.flow_time + sd_over_eps * (1.0 / tr_g_b.flow_time + overlap)
    assert rep_b.thresholds_used["threshold2"] == pytest.approx(want_b, rel=1e-12)


def test_evaluate_conditions_rejects_bad_inputs():
    tr_f, adv, tr_g = _pipeline("a", eps=0.05)
    z = tr_f.dataset.x[0]
    # eps = 0 has no margin condition 2 (the threshold diverges): error out
    adv0 = build_adv_set(tr_f, scenario="b", eps=0.0, target_mode="flip", seed=0)
    net_g = init_net(48, 10, gamma=0.0, seed=30)
    tr_g0 = train(net_g, adv0.dataset, loss="identity", steps=10, step_size=0.5)
    with pytest.raises(ValueError, match="positive perturbation"):
        evaluate_conditions(z, tr_f, adv0, tr_g0)
    # an adv set built from a different dataset is a provenance mismatch
    other = gen_shifted_gaussian(40, 10, seed=77)
    net_o = init_net(48, 10, gamma=0.0, seed=21)
    tr_o = train(net_o, other, loss="identity", steps=50, step_size=0.5)
    adv_o = build_adv_set(tr_o, scenario="a", eps=0.05, target_mode="uniform", seed=22)
    net_go = init_net(48, 10, gamma=0.0, seed=23)
    tr_go = train(net_go, adv_o.dataset, loss="identity", steps=50, step_size=0.5)
    with pytest.raises(ValueError, match="derived from"):
        evaluate_conditions(z, tr_f, adv_o, tr_go)
    with pytest.raises(ValueError, match="trained on"):
        evaluate_conditions(z, tr_o, adv_o, tr_g)


def test_cosine_and_predicted_direction_helpers():
    assert cosine([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
    assert cosine([1.0, 0.0], [0.0, 3.0]) == pytest.approx(0.0)
    assert cosine([1.0, 1.0], [-2.0, -2.0]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        cosine([0.0, 0.0], [1.0, 0.0])
    tr_f, _, _ = _pipeline("a")
    ds = tr_f.dataset
    D = predicted_directions(
        x=ds.x, y=ds.y, w=tr_f.integral_weights, gamma=0.0
    )
    np.testing.assert_array_equal(predicted_direction(tr_f, 3), D[3])
    with pytest.raises(IndexError):
        predicted_direction(tr_f, ds.n)
