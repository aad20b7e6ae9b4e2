import numpy as np
import pytest

from conftest import random_stable
from koopman_empc.errors import DimensionMismatch, NoAdmissibleDimension, WrongVariant
from koopman_empc.koopman import (DECODER_HIDDEN, ENCODER_HIDDEN, LINEAR, NONLINEAR, KoopmanModel, Layer,
                                  MlpParams, TrainConfig, export_linear, grad_arrays, init_koopman, init_mlp,
                                  is_admissible, koopman_loss, lift, make_windows, mlp_backward, mlp_forward,
                                  param_arrays, reconstruction_residual, reduce_lifted_dimension, rollout,
                                  train_koopman, truncate_lifted)
from koopman_empc.signals import Dataset, fit_scaler, transform
from koopman_empc.ssmodel import StateSpaceModel, simulate


def identity_encoder(p):
    """ReLU encoder that reproduces its input exactly: relu(y) - relu(-y) = y."""
    sizes = (p, *ENCODER_HIDDEN, p)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = np.zeros((fan_out, fan_in))
        if i == 0:
            W[:p, :p], W[p:2 * p, :p] = np.eye(p), -np.eye(p)
        elif i < 3:
            W[:2 * p, :2 * p] = np.eye(2 * p)
        else:
            W[:, :p], W[:, p:2 * p] = np.eye(p), -np.eye(p)
        layers.append(Layer(W, np.zeros(fan_out), "relu" if i < 3 else "linear"))
    return MlpParams(layers)


def _fd_check(loss_fn, params, grads, rng, h=1e-5, per_array=8):
    worst = 0.0
    for P, G in zip(params, grads):
        for flat in rng.choice(P.size, size=min(per_array, P.size), replace=False):
            idx = np.unravel_index(flat, P.shape)
            old = P[idx]
            P[idx] = old + h
            lp = loss_fn()
            P[idx] = old - h
            lm = loss_fn()
            P[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - G[idx]) / max(abs(fd), abs(G[idx]), 1e-7))
    return worst


def test_mlp_forward_examples():
    rng = np.random.default_rng(0)
    P = init_mlp((3, 4, 2), ("relu", "linear"), rng)
    for layer in P.layers:
        layer.W[:] = 0.0
    P.layers[-1].b[:] = [1.5, -2.0]
    assert np.array_equal(mlp_forward(P, [1.0, 2.0, 3.0])[0], [1.5, -2.0])
    W = rng.normal(size=(2, 3))
    L = MlpParams([Layer(W, np.zeros(2), "linear")])
    x = rng.normal(size=3)
    assert np.array_equal(mlp_forward(L, x)[0], W @ x)
    relu = MlpParams([Layer(np.eye(1), np.zeros(1), "relu")])
    elu = MlpParams([Layer(np.eye(1), np.zeros(1), "elu")])
    assert mlp_forward(relu, [-1.0])[0][0] == 0.0
    assert mlp_forward(elu, [-1.0])[0][0] == pytest.approx(np.exp(-1) - 1, abs=1e-12)
    with pytest.raises(DimensionMismatch):
        mlp_forward(L, np.zeros(4))


def test_mlp_backward_finite_difference():
    rng = np.random.default_rng(1)
    for acts in (("relu", "elu", "linear"), ("elu", "elu", "linear")):
        P = init_mlp((3, 7, 5, 2), acts, rng)
        X = rng.normal(size=(6, 3))
        up = rng.normal(size=(6, 2))

        def loss():
            return float(np.sum(mlp_forward(P, X)[0] * up))

        out, cache = mlp_forward(P, X)
        grads, gx = mlp_backward(P, cache, up)
        flat = [g for pair in grads for g in pair]
        assert _fd_check(loss, P.arrays(), flat, rng, per_array=20) < 1e-6
        zero, _ = mlp_backward(P, cache, np.zeros_like(up))
        assert all(not np.any(a) and not np.any(b) for a, b in zero)


def test_linear_layer_gradient_is_outer_product():
    rng = np.random.default_rng(2)
    L = MlpParams([Layer(rng.normal(size=(2, 3)), np.zeros(2), "linear")])
    x, g = rng.normal(size=3), rng.normal(size=2)
    _, cache = mlp_forward(L, x)
    grads, _ = mlp_backward(L, cache, g)
    dW, db = grads[0]
    assert np.allclose(dW, np.outer(g, x)) and np.allclose(db, g)


def _linear_data(rng, T=60, p=3, m=2):
    A, B, _ = random_stable(p, m, p, rng, radius=0.9)
    U = rng.normal(size=(T, m))
    Y = np.empty((T, p))
    Y[0] = rng.normal(size=p)
    for k in range(T - 1):
        Y[k + 1] = A @ Y[k] + B @ U[k]
    return A, B, U, Y


def test_loss_zero_for_perfect_model():
    rng = np.random.default_rng(3)
    A, B, U, Y = _linear_data(rng)
    M = KoopmanModel(identity_encoder(3), A, B, C=np.eye(3))
    Uw, Yw = make_windows(U, Y, 10)
    loss, _ = koopman_loss(M, Uw, Yw)
    assert loss == pytest.approx(0.0, abs=1e-24)


def test_loss_k1_is_one_step_residual():
    rng = np.random.default_rng(4)
    _, _, U, Y = _linear_data(rng)
    A, B = rng.normal(size=(3, 3)) * 0.3, rng.normal(size=(3, 2))
    M = KoopmanModel(identity_encoder(3), A, B, C=np.eye(3))
    Uw, Yw = make_windows(U, Y, 1)
    loss, _ = koopman_loss(M, Uw, Yw)
    res = Y[:-1] @ A.T + U[:-1] @ B.T - Y[1:]
    # prediction and linearity residuals coincide when the encoder is the identity
    w_pred, w_lin = 1.0, 0.1
    assert loss == pytest.approx((w_pred + w_lin) * np.sum(res ** 2) / len(res), rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("variant", [LINEAR, NONLINEAR])
def test_loss_gradient_finite_difference(seed, variant):
    rng = np.random.default_rng(seed)
    M = init_koopman(3, 3, 4, variant, rng)
    M.A += 0.05 * rng.normal(size=M.A.shape)
    Uw, Yw = make_windows(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)), 3)
    Uw, Yw = Uw[:5], Yw[:5]
    _, G = koopman_loss(M, Uw, Yw)
    err = _fd_check(lambda: koopman_loss(M, Uw, Yw)[0], param_arrays(M), grad_arrays(G), rng)
    assert err < 1e-5


def test_loss_with_repeated_samples_matches_explicit_sum():
    # Windows that overlap share encoder evaluations; the loss must not depend on that.
    rng = np.random.default_rng(5)
    M = init_koopman(3, 3, 5, NONLINEAR, rng)
    U, Y = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    Uw, Yw = make_windows(U, Y, 4)
    whole, _ = koopman_loss(M, Uw, Yw)
    parts = [koopman_loss(M, Uw[i:i + 1], Yw[i:i + 1])[0] for i in range(len(Uw))]
    assert whole == pytest.approx(np.mean(parts), rel=1e-12)


def test_make_windows_shapes():
    U, Y = np.arange(20.0).reshape(10, 2), np.arange(30.0).reshape(10, 3)
    Uw, Yw = make_windows(U, Y, 4, stride=2)
    assert Uw.shape == (3, 4, 2) and Yw.shape == (3, 5, 3)
    assert np.array_equal(Yw[1, 0], Y[2]) and np.array_equal(Uw[2, -1], U[7])


def _dataset_from_linear(rng, T=400, noise=0.0):
    A, B, U, Y = _linear_data(rng, T=T)
    return A, B, Dataset(1.0, U, Y + noise * rng.normal(size=Y.shape))


def test_training_deterministic():
    rng = np.random.default_rng(6)
    _, _, d = _dataset_from_linear(rng, T=120)
    cfg = TrainConfig(rollout_len=5, epochs=3, batch=16)
    a = train_koopman(d, NONLINEAR, 4, cfg)
    b = train_koopman(d, NONLINEAR, 4, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(param_arrays(a), param_arrays(b)))


def test_training_linear_system_close_to_least_squares():
    rng = np.random.default_rng(7)
    _, _, d = _dataset_from_linear(rng, T=600, noise=0.05)
    us, ys = fit_scaler(d.U), fit_scaler(d.Y)
    Us, Ys = transform(us, d.U), transform(ys, d.Y)
    split = 450
    # LS oracle for the one-step map on the training part
    Z = np.hstack([Ys[:split - 1], Us[:split - 1]])
    theta, *_ = np.linalg.lstsq(Z, Ys[1:split], rcond=None)
    Zv = np.hstack([Ys[split:-1], Us[split:-1]])
    ls_err = np.mean((Zv @ theta - Ys[split + 1:]) ** 2)
    cfg = TrainConfig(rollout_len=1, epochs=60, batch=32, lr=3e-3, val_fraction=0.25)
    M = train_koopman(d, LINEAR, 6, cfg)
    X = lift(M, Ys[split:-1])
    pred = (X @ M.A.T + Us[split:-1] @ M.B.T) @ M.C.T
    model_err = np.mean((pred - Ys[split + 1:]) ** 2)
    assert model_err <= 2 * ls_err


def test_export_matches_rollout():
    rng = np.random.default_rng(8)
    M = init_koopman(3, 2, 6, LINEAR, rng)
    M.A = random_stable(6, 2, 3, rng)[0]
    Y0, U = rng.normal(size=3), rng.normal(size=(25, 2))
    S = export_linear(M)
    assert np.allclose(simulate(S, lift(M, Y0), U), rollout(M, Y0, U), atol=1e-12)
    with pytest.raises(WrongVariant):
        export_linear(init_koopman(3, 2, 6, NONLINEAR, rng))


def test_reconstruction_residual_recorded():
    rng = np.random.default_rng(9)
    _, _, d = _dataset_from_linear(rng, T=100)
    M = train_koopman(d, LINEAR, 5, TrainConfig(rollout_len=4, epochs=2, batch=16, val_fraction=0.0))
    Ys = transform(M.y_scaler, d.Y)
    R = lift(M, Ys) @ M.C.T - Ys
    assert np.mean(np.sum(R ** 2, axis=1)) == pytest.approx(M.rec_residual, rel=1e-12)
    assert reconstruction_residual(M, Ys) == M.rec_residual


def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    for variant in (LINEAR, NONLINEAR):
        M = init_koopman(3, 3, 5, variant, rng)
        M.u_scaler = M.y_scaler = fit_scaler(rng.normal(size=(10, 3)))
        M.save(tmp_path / "m.json")
        N = KoopmanModel.load(tmp_path / "m.json")
        assert N.variant == variant
        assert all(np.array_equal(a, b) for a, b in zip(param_arrays(M), param_arrays(N)))


def test_truncate_preserves_lifted_predictions_on_dominant_subspace():
    rng = np.random.default_rng(11)
    M = init_koopman(3, 2, 6, LINEAR, rng)
    Ys = rng.normal(size=(50, 3))
    T = truncate_lifted(M, 6, Ys)  # full rank: a pure rotation
    X, XT = lift(M, Ys), lift(T, Ys)
    assert np.allclose(X @ M.C.T, XT @ T.C.T, atol=1e-10)
    assert np.allclose((X @ M.A.T) @ M.C.T, (XT @ T.A.T) @ T.C.T, atol=1e-10)
    assert truncate_lifted(M, 4, Ys).n_lift == 4


def test_reduce_returns_immediately_when_admissible():
    rng = np.random.default_rng(12)
    _, _, d = _dataset_from_linear(rng, T=150)
    cfg = TrainConfig(rollout_len=5, epochs=2, batch=16, val_fraction=0.0)
    M = reduce_lifted_dimension(d, start=3, cfg=cfg)
    assert M.n_lift == 3 and is_admissible(M)
    with pytest.raises(ValueError):
        reduce_lifted_dimension(d, start=2, cfg=cfg)


def test_reduce_fails_when_nothing_admissible():
    rng = np.random.default_rng(13)
    _, _, d = _dataset_from_linear(rng, T=150)
    cfg = TrainConfig(rollout_len=5, epochs=1, batch=16, val_fraction=0.0)
    with pytest.raises(NoAdmissibleDimension):
        reduce_lifted_dimension(d, start=5, rank_tol=0.999, cfg=cfg, warm_start=True)


def test_model_validation():
    rng = np.random.default_rng(14)
    enc = init_mlp((3, *ENCODER_HIDDEN, 4), ("relu", "relu", "relu", "linear"), rng)
    with pytest.raises(WrongVariant):
        KoopmanModel(enc, np.eye(4), np.zeros((4, 1)))
    small = init_mlp((3, *ENCODER_HIDDEN, 2), ("relu", "relu", "relu", "linear"), rng)
    with pytest.raises(DimensionMismatch):
        KoopmanModel(small, np.eye(2), np.zeros((2, 1)), C=np.eye(3, 2))
    assert len(DECODER_HIDDEN) == 3
