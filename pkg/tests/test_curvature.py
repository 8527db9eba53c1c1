import numpy as np
import pytest

from crispe import curvature as cv
from crispe import network as nw
from crispe.errors import DimensionError, SizeError, StateError, ValidationError
from crispe.network import FeedForwardNet, Layer

from conftest import rel, small_net


def _gnh_oracle(net, X):
    """Per-example loop over explicit Jacobians and softmax Hessians."""
    p = net.n_params
    G = np.zeros((p, p))
    for x in X:
        J = nw.per_example_jacobian(net, x)
        pi = nw.forward(net, x).probs[0]
        G += J.T @ (np.diag(pi) - np.outer(pi, pi)) @ J
    return G / len(X)


def _fd_hessian(net, X, y, h=1e-5):
    theta = net.flat_params()
    cols = []
    for e in np.eye(theta.size):
        gp = nw.loss_and_grad(net.with_flat_params(theta + h * e), X, y)[1]
        gm = nw.loss_and_grad(net.with_flat_params(theta - h * e), X, y)[1]
        cols.append((gp - gm) / (2 * h))
    return np.column_stack(cols)


# ---------------------------------------------------------------- exact


def test_output_hessian_uniform_two_class():
    B = cv.output_hessian_root(np.array([[0.5, 0.5]]))[0]
    np.testing.assert_allclose(B @ B.T, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


def test_output_hessian_root_factorizes(rng):
    pi = nw.softmax(rng.standard_normal((5, 4)))
    B = cv.output_hessian_root(pi)
    for b, p in zip(B, pi):
        np.testing.assert_allclose(b @ b.T, np.diag(p) - np.outer(p, p), atol=1e-15)


def test_gnh_zero_net_one_example():
    net = FeedForwardNet([Layer(np.zeros((2, 3)))])
    x = np.array([[1.0, 2.0]])
    a = np.array([1.0, 2.0, 1.0])
    H = np.array([[0.25, -0.25], [-0.25, 0.25]])
    J = np.kron(a, np.eye(2))  # linear model Jacobian, column-major vec
    np.testing.assert_allclose(cv.exact_gnh(net, x).G, J.T @ H @ J, atol=1e-15)


def test_gnh_matches_per_example_oracle(rng):
    net = small_net(rng, (3, 4, 3))
    X = rng.random((6, 3))
    assert rel(cv.exact_gnh(net, X, batch=4).G, _gnh_oracle(net, X)) <= 1e-12


def test_gnh_psd(rng):
    net = small_net(rng, (5, 6, 4), hidden="relu")
    lam = np.linalg.eigvalsh(cv.exact_gnh(net, rng.random((9, 5))).G)
    assert lam.min() >= -1e-10 * lam.max()


def test_gnh_layer_subset_is_diagonal_block(rng):
    net = small_net(rng, (3, 4, 3))
    X = rng.random((5, 3))
    full = cv.exact_gnh(net, X).G
    p0 = net.layers[0].W.size
    np.testing.assert_allclose(cv.exact_gnh(net, X, [1]).G, full[p0:, p0:], atol=1e-14)


def test_exact_hessian_matches_finite_differences(rng):
    net = small_net(rng, (3, 4, 3))
    X, y = rng.random((5, 3)), rng.integers(0, 3, 5)
    assert rel(cv.exact_hessian(net, X, y).H, _fd_hessian(net, X, y)) <= 1e-5


def test_linear_model_hessian_equals_gnh(rng):
    net = FeedForwardNet.random([4, 3], rng, output="identity", bias_scale=0.5)
    X, y = rng.random((7, 4)), rng.integers(0, 3, 7)
    assert rel(cv.exact_hessian(net, X, y).H, cv.exact_gnh(net, X).G) <= 1e-6


def test_guards(monkeypatch, rng):
    net = small_net(rng, (4, 5, 3))
    monkeypatch.setattr(cv, "HESSIAN_GUARD", 10)
    monkeypatch.setattr(cv, "GNH_GUARD", 10)
    with pytest.raises(SizeError, match="10"):
        cv.exact_hessian(net, rng.random((2, 4)), np.array([0, 1]))
    with pytest.raises(SizeError):
        cv.exact_gnh(net, rng.random((2, 4)))


# ---------------------------------------------------------------- fisher


def test_mc_fisher_converges_to_gnh(rng):
    net = small_net(rng, (3, 4, 3))
    X = rng.random((2, 3))
    G = cv.exact_gnh(net, X).G
    assert rel(cv.mc_fisher(net, X, 50_000, rng), G) <= 0.05


def test_mc_fisher_matches_explicit_outer_products(rng):
    """Count-based accumulation equals summing sampled outer products."""
    net = small_net(rng, (3, 4, 3))
    x = rng.random((1, 3))
    seed = 99
    F = cv.mc_fisher(net, x, 200, np.random.default_rng(seed))
    probs = nw.forward(net, x).probs
    labels = nw.sample_labels(np.broadcast_to(probs, (200, 3)), np.random.default_rng(seed))
    J = nw.per_example_jacobian(net, x[0])
    ref = np.zeros_like(F)
    for yhat in labels:
        g = (np.eye(3)[yhat] - probs[0]) @ J
        ref += np.outer(g, g)
    assert rel(F, ref / 200) <= 1e-12


def test_mc_fisher_rejects_zero_samples(rng):
    with pytest.raises(ValidationError):
        cv.mc_fisher(small_net(rng), rng.random((1, 4)), 0, rng)


# ----------------------------------------------------------------- K-FAC


def test_kfac_single_sample_rank_one(rng):
    net = small_net(rng, (4, 5, 3))
    x = rng.random((1, 4))
    kf = cv.kfac_estimate(net, x, np.random.default_rng(3))
    trace = nw.forward(net, x)
    g = nw.sample_pseudo_gradient(net, trace, np.random.default_rng(3))
    for l, f in kf.factors.layers.items():
        v = np.outer(g[l][0], trace.inputs[l][0]).ravel(order="F")
        assert np.abs(np.kron(f.A, f.S) - np.outer(v, v)).max() <= 1e-10


def test_kfac_repeated_example():
    rng = np.random.default_rng(0)
    net = small_net(rng)
    x = rng.random(4)
    kf = cv.kfac_estimate(net, np.tile(x, (6, 1)), rng)
    a = np.append(x, 1.0)
    np.testing.assert_allclose(kf.factors.layers[0].A, np.outer(a, a), atol=1e-15)


def test_kfac_factors_match_sample_means(rng):
    net = small_net(rng, (5, 6, 4))
    X = rng.random((64, 5))
    kf = cv.kfac_estimate(net, X, np.random.default_rng(5), mc_samples=2)
    trace = nw.forward(net, X)
    r = np.random.default_rng(5)
    g1 = nw.sample_pseudo_gradient(net, trace, r)
    g2 = nw.sample_pseudo_gradient(net, trace, r)
    for l, f in kf.factors.layers.items():
        a = trace.inputs[l]
        np.testing.assert_allclose(f.A, a.T @ a / 64, atol=1e-14)
        np.testing.assert_allclose(f.S, (g1[l].T @ g1[l] + g2[l].T @ g2[l]) / 128, atol=1e-14)
        assert f.count == 128
        for M in (f.A, f.S):
            np.testing.assert_array_equal(M, M.T)
            assert np.linalg.eigvalsh(M).min() >= -1e-12 * np.abs(M).max()


def test_kfac_empirical_labels(rng):
    net = small_net(rng)
    X, y = rng.random((8, 4)), rng.integers(0, 3, 8)
    a = cv.kfac_estimate(net, X, np.random.default_rng(1), labels=y)
    b = cv.kfac_estimate(net, X, np.random.default_rng(2), labels=y)
    np.testing.assert_array_equal(a.factors.layers[1].S, b.factors.layers[1].S)


def test_kfac_errors(rng):
    net = small_net(rng)
    with pytest.raises(ValidationError):
        cv.kfac_estimate(net, np.zeros((0, 4)), rng)
    with pytest.raises(ValidationError):
        cv.kfac_estimate(net, rng.random((2, 4)), rng, mc_samples=0)
    with pytest.raises(ValidationError):
        cv.kfac_estimate(net, rng.random((2, 4)), rng, layers=[5])


# ---------------------------------------------------------------- EK-FAC


def test_ekfac_single_sample(rng):
    net = small_net(rng, (4, 5, 3))
    x = rng.random((1, 4))
    kf = cv.kfac_estimate(net, x, np.random.default_rng(8))
    ek = cv.ekfac_correct(net, x, kf, np.random.default_rng(8))
    trace = nw.forward(net, x)
    g = nw.sample_pseudo_gradient(net, trace, np.random.default_rng(8))
    for l, c in ek.corrections.items():
        rot = c.U_out.T @ np.outer(g[l][0], trace.inputs[l][0]) @ c.U_in
        np.testing.assert_allclose(c.lam_star, rot ** 2, atol=1e-14)
        # same draw: the K-FAC block's diagonal in the Kronecker basis agrees
        f = kf.factors.layers[l]
        kdiag = np.multiply.outer(np.diag(c.U_out.T @ f.S @ c.U_out), np.diag(c.U_in.T @ f.A @ c.U_in))
        np.testing.assert_allclose(c.lam_star, kdiag, atol=1e-12)


def test_ekfac_zero_gradients(rng):
    net = small_net(rng, (4, 5, 1))  # one class: pseudo-gradients vanish
    X = rng.random((5, 4))
    ek = cv.ekfac_correct(net, X, cv.kfac_estimate(net, X, rng), rng)
    for c in ek.corrections.values():
        np.testing.assert_array_equal(c.lam_star, 0.0)


def test_ekfac_missing_factors(rng):
    with pytest.raises(StateError):
        cv.ekfac_correct(small_net(rng), rng.random((2, 4)), cv.KfacFactors({}), rng)


# --------------------------------------------------- activation covariance


def test_actcov_one_example_rank_one(rng):
    net = small_net(rng, (5, 4, 3))
    A = cv.activation_covariance(net, rng.random((1, 5))).A[0]
    lam = np.linalg.eigvalsh(A)
    assert np.sum(lam > 1e-12 * lam.max()) == 1


def test_actcov_full_rank_with_enough_examples(rng):
    net = small_net(rng, (5, 4, 3))
    A = cv.activation_covariance(net, rng.random((20, 5))).A[0]
    assert np.linalg.matrix_rank(A) == 6


def test_actcov_zero_inputs():
    net = small_net(np.random.default_rng(0), (3, 4, 2))
    A = cv.activation_covariance(net, np.zeros((4, 3)), [0]).A[0]
    expected = np.zeros((4, 4))
    expected[3, 3] = 1.0
    np.testing.assert_array_equal(A, expected)


def test_actcov_empty(rng):
    with pytest.raises(ValidationError):
        cv.activation_covariance(small_net(rng), np.zeros((0, 4)))


# ------------------------------------------------------------ aggregation


def _factors(rng, count, shapes=((3, 2),)):
    return cv.KfacFactors({l: cv.LayerFactors(rng.random((d_in, d_in)), rng.random((d_out, d_out)), count)
                           for l, (d_out, d_in) in enumerate(shapes)})


def test_aggregate_from_empty(rng):
    inc = _factors(rng, 7)
    out = cv.aggregate_factors(_factors(rng, 0), inc)
    np.testing.assert_array_equal(out.layers[0].A, inc.layers[0].A)
    assert out.sample_count == 7


def test_aggregate_equal_counts_is_mean(rng):
    a, b = _factors(rng, 5), _factors(rng, 5)
    out = cv.aggregate_factors(a, b)
    np.testing.assert_allclose(out.layers[0].S, 0.5 * (a.layers[0].S + b.layers[0].S), atol=1e-15)


def test_aggregate_streaming_equals_one_shot(rng):
    net = small_net(rng, (4, 6, 3))
    X, y = rng.random((30, 4)), rng.integers(0, 3, 30)
    one = cv.kfac_estimate(net, X, rng, labels=y).factors
    acc = cv.zero_factors(net)
    for part in np.array_split(np.arange(30), 4):
        acc = cv.aggregate_factors(acc, cv.kfac_estimate(net, X[part], rng, labels=y[part]).factors)
    for l in one.layers:
        np.testing.assert_allclose(acc.layers[l].A, one.layers[l].A, atol=1e-12)
        np.testing.assert_allclose(acc.layers[l].S, one.layers[l].S, atol=1e-12)
    assert acc.sample_count == 30


def test_aggregate_mismatch(rng):
    with pytest.raises(DimensionError):
        cv.aggregate_factors(_factors(rng, 1), _factors(rng, 1, ((3, 3),)))
    with pytest.raises(ValidationError):
        cv.aggregate_factors(_factors(rng, 1), _factors(rng, 1, ((3, 2), (2, 4))))


# --------------------------------------------------------------- bregman


def test_bregman_zero_at_base(rng):
    net = small_net(rng)
    X = rng.random((5, 4))
    assert cv.bregman_divergence(net, net.copy(), X).value == 0.0


def test_bregman_is_kl(rng):
    z0, z = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    p0, p = nw.softmax(z0), nw.softmax(z)
    np.testing.assert_allclose(cv.bregman_values(z, z0), np.sum(p0 * np.log(p0 / p), axis=1), atol=1e-14)


@pytest.mark.parametrize("t", [1e-2, 1e-3])
def test_bregman_quadratic_scaling(rng, t):
    net0 = small_net(rng, (4, 6, 3))
    X = rng.random((10, 4))
    G = cv.exact_gnh(net0, X)
    d = rng.standard_normal(net0.n_params)
    d /= np.linalg.norm(d)
    net = net0.with_flat_params(net0.flat_params() + t * d)
    rep = cv.bregman_divergence(net, net0, X, G)
    np.testing.assert_allclose(rep.quadratic_estimate, 0.5 * t**2 * d @ G.G @ d, rtol=1e-12)
    assert rep.relative_gap <= (5e-2 if t == 1e-3 else 0.5)


def test_bregman_architecture_mismatch(rng):
    with pytest.raises(ValidationError):
        cv.bregman_divergence(small_net(rng), small_net(rng, (4, 6, 3)), rng.random((2, 4)))


# -------------------------------------------------------- quadratic form


def test_quadratic_form_zero_delta(rng):
    net = small_net(rng)
    X = rng.random((6, 4))
    for kind in ("gnh", "kfac", "ekfac", "actcov"):
        model = cv.build_curvature(kind, net, X, rng.integers(0, 3, 6), rng)
        assert cv.quadratic_form(model, [np.zeros_like(l.W) for l in net.layers]) == 0.0


def test_quadratic_form_matches_dense_matrices(rng):
    net = small_net(rng, (3, 4, 3))
    X, y = rng.random((6, 3)), rng.integers(0, 3, 6)
    D = [rng.standard_normal(l.W.shape) for l in net.layers]
    v = [d.ravel(order="F") for d in D]
    kf = cv.kfac_estimate(net, X, rng)
    ek = cv.ekfac_correct(net, X, kf, rng)
    ac = cv.activation_covariance(net, X)
    G = cv.exact_gnh(net, X)
    ref_k = sum(v[l] @ np.kron(f.A, f.S) @ v[l] for l, f in kf.factors.layers.items())
    ref_e = 0.0
    for l, c in ek.corrections.items():
        U = np.kron(c.U_in, c.U_out)
        ref_e += v[l] @ U @ np.diag(c.lam_star.ravel(order="F")) @ U.T @ v[l]
    ref_a = sum(v[l] @ np.kron(A, np.eye(ac.d_out[l])) @ v[l] for l, A in ac.A.items())
    vv = np.concatenate(v)
    np.testing.assert_allclose(cv.quadratic_form(kf, D), ref_k, rtol=1e-12)
    np.testing.assert_allclose(cv.quadratic_form(ek, dict(enumerate(D))), ref_e, rtol=1e-12)
    np.testing.assert_allclose(cv.quadratic_form(ac, D), ref_a, rtol=1e-12)
    np.testing.assert_allclose(cv.quadratic_form(G, D), vv @ G.G @ vv, rtol=1e-12)


def test_quadratic_form_shape_errors(rng):
    net = small_net(rng)
    kf = cv.kfac_estimate(net, rng.random((3, 4)), rng)
    with pytest.raises(DimensionError):
        cv.quadratic_form(kf, [np.zeros((2, 2)), np.zeros((3, 6))])
    with pytest.raises(DimensionError):
        cv.quadratic_form(kf, [np.zeros((5, 5))])


# -------------------------------------------------------------- dispatch


@pytest.mark.parametrize("kind,cls", [("hessian", cv.ExactHessian), ("gnh", cv.GNH), ("kfac", cv.KFAC),
                                      ("ekfac", cv.EKFAC), ("actcov", cv.ActivationCov), ("none", cv.KFAC)])
def test_build_curvature_dispatch(rng, kind, cls):
    net = small_net(rng)
    model = cv.build_curvature(kind, net, rng.random((5, 4)), rng.integers(0, 3, 5), rng)
    assert isinstance(model, cls)
    assert cv.model_layers(model) == (0, 1)


def test_build_curvature_unknown(rng):
    with pytest.raises(ValidationError):
        cv.build_curvature("fisher", small_net(rng), rng.random((2, 4)), np.array([0, 1]), rng)
