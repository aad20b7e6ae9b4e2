"""Deep Koopman identification with hand-written reverse-mode gradients.

The encoder lifts a scaled output sample into ``n_lift`` coordinates that
evolve linearly, ``x[k+1] = A x[k] + B u[k]``. Outputs are recovered either
by a linear map ``C`` (usable inside a linear MPC) or by an MLP decoder.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DivergedLoss,
    NoAdmissibleDimension,
    NonFiniteLoss,
    WrongVariant,
)
from .signals import Dataset, Scaler, fit_scaler, transform
from .ssmodel import (
    DEFAULT_RANK_TOL,
    StateSpaceModel,
    controllability_rank,
    observability_rank,
    rescale_timestep,
)

log = logging.getLogger(__name__)

LINEAR = "linear_projection"
NONLINEAR = "nonlinear_projection"
ENCODER_HIDDEN = (60, 120, 180)
DECODER_HIDDEN = (180, 120, 60)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "linear"


@dataclass
class MlpParams:
    layers: list

    @property
    def in_dim(self):
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].W.shape[0]

    def arrays(self):
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def to_list(self):
        return [{"W": l.W.tolist(), "b": l.b.tolist(), "activation": l.activation} for l in self.layers]

    @classmethod
    def from_list(cls, items):
        return cls([Layer(np.array(i["W"], dtype=float), np.array(i["b"], dtype=float), i["activation"])
                    for i in items])


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z >= 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z):
    if name == "relu":
        return (z > 0).astype(float)
    if name == "elu":
        return np.where(z >= 0, 1.0, np.exp(np.minimum(z, 0.0)))
    return np.ones_like(z)


def init_mlp(sizes, activations, rng) -> MlpParams:
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = math.sqrt(6.0 / fan_in) if act != "linear" else math.sqrt(1.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(W, np.zeros(fan_out), act))
    return MlpParams(layers)


def mlp_forward(P: MlpParams, x):
    """Forward pass on a batch (rows are samples). Returns output and cache."""
    h = np.asarray(x, dtype=float)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.shape[1] != P.in_dim:
        raise DimensionMismatch(f"MLP expects {P.in_dim} inputs, got {h.shape[1]}")
    cache = []
    for layer in P.layers:
        z = h @ layer.W.T + layer.b
        cache.append((h, z))
        h = _act(layer.activation, z)
    return (h[0] if single else h), cache


def mlp_backward(P: MlpParams, cache, upstream):
    """Reverse pass. Returns ``([(dW, db), ...], d_input)``."""
    g = np.asarray(upstream, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    grads = [None] * len(P.layers)
    for i in range(len(P.layers) - 1, -1, -1):
        layer = P.layers[i]
        h_in, z = cache[i]
        gz = g * _act_grad(layer.activation, z)
        grads[i] = (gz.T @ h_in, gz.sum(axis=0))
        g = gz @ layer.W
    return grads, g


# --------------------------------------------------------------------------
# Koopman model
# --------------------------------------------------------------------------

@dataclass
class KoopmanModel:
    encoder: MlpParams
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray | None = None
    decoder: MlpParams | None = None
    timestep: float = 1.0
    u_scaler: Scaler | None = None
    y_scaler: Scaler | None = None
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    rec_residual: float = float("nan")
    history: list = field(default_factory=list, repr=False, compare=False)  # (epoch, train, val); not saved

    def __post_init__(self):
        if (self.C is None) == (self.decoder is None):
            raise WrongVariant("exactly one of C or decoder must be given")
        if self.n_lift < self.encoder.in_dim:
            raise DimensionMismatch("lifted dimension must be at least the output dimension")

    @property
    def variant(self):
        return LINEAR if self.C is not None else NONLINEAR

    @property
    def n_lift(self):
        return self.A.shape[0]

    def project(self, X):
        if self.C is not None:
            return X @ self.C.T
        return mlp_forward(self.decoder, X)[0]

    def to_dict(self):
        d = {
            "variant": self.variant,
            "ts": self.timestep,
            "n_lift": self.n_lift,
            "encoder": self.encoder.to_list(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "u_scaler": self.u_scaler.to_dict() if self.u_scaler else None,
            "y_scaler": self.y_scaler.to_dict() if self.y_scaler else None,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "rec_residual": self.rec_residual,
        }
        if self.C is not None:
            d["C"] = self.C.tolist()
        else:
            d["decoder"] = self.decoder.to_list()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=MlpParams.from_list(d["encoder"]),
            A=np.array(d["A"], dtype=float),
            B=np.array(d["B"], dtype=float),
            C=np.array(d["C"], dtype=float) if "C" in d else None,
            decoder=MlpParams.from_list(d["decoder"]) if "decoder" in d else None,
            timestep=float(d["ts"]),
            u_scaler=Scaler.from_dict(d["u_scaler"]) if d.get("u_scaler") else None,
            y_scaler=Scaler.from_dict(d["y_scaler"]) if d.get("y_scaler") else None,
            train_loss=float(d.get("train_loss", "nan")),
            val_loss=float(d.get("val_loss", "nan")),
            rec_residual=float(d.get("rec_residual", "nan")),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def lift(M: KoopmanModel, y_scaled):
    return mlp_forward(M.encoder, y_scaled)[0]


def export_linear(M: KoopmanModel) -> StateSpaceModel:
    if M.variant != LINEAR:
        raise WrongVariant("only the linear-projection variant is a state-space model")
    return StateSpaceModel(A=M.A.copy(), B=M.B.copy(), C=M.C.copy(), timestep=M.timestep,
                           u_scaler=M.u_scaler, y_scaler=M.y_scaler, kind="koopman_linear")


def rollout(M: KoopmanModel, y0_scaled, U_scaled):
    """Free-run scaled outputs for ``len(U)`` steps starting from ``lift(y0)``."""
    x = lift(M, y0_scaled)
    X = np.empty((len(U_scaled), M.n_lift))
    for k, u in enumerate(U_scaled):
        X[k] = x
        x = M.A @ x + M.B @ u
    return M.project(X)


def lift_x0_policy(M: KoopmanModel):
    """x0 policy for ``ssmodel.open_loop_mae``: encode the first measurement."""
    return lambda _model, scaled: lift(M, scaled.Y[0])


def koopman_open_loop_mae(M: KoopmanModel, d: Dataset):
    Us = transform(M.u_scaler, d.U)
    Ys = transform(M.y_scaler, d.Y)
    Yhat = rollout(M, Ys[0], Us) * M.y_scaler.std + M.y_scaler.mean
    return np.mean(np.abs(Yhat - d.Y), axis=0)


# --------------------------------------------------------------------------
# Loss and gradients
# --------------------------------------------------------------------------

@dataclass
class LossWeights:
    pred: float = 1.0
    rec: float = 1.0
    lin: float = 0.1


@dataclass
class KoopmanGrads:
    encoder: list
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray | None = None
    decoder: list | None = None


def koopman_loss(M: KoopmanModel, U, Y, weights: LossWeights = LossWeights()):
    """Multi-step loss on a batch of windows and its gradient.

    ``U`` has shape (batch, K, m) and ``Y`` shape (batch, K+1, p), both scaled.
    Terms: rollout prediction error for k=1..K, reconstruction of every
    encoded sample, and lifted-state consistency between the rollout and the
    encoder for k=1..K.
    """
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    nb, K, m = U.shape
    p = Y.shape[2]
    n = M.n_lift
    if Y.shape[:2] != (nb, K + 1):
        raise DimensionMismatch("Y windows must be one sample longer than U windows")

    # Overlapping windows repeat samples; encode (and reconstruct) each
    # distinct sample once and weight it by its multiplicity.
    uniq, inv = np.unique(Y.reshape(-1, p), axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv, minlength=len(uniq)).astype(float)
    E_u, enc_cache = mlp_forward(M.encoder, uniq)
    E = E_u[inv].reshape(nb, K + 1, n)

    X = np.empty((nb, K + 1, n))
    X[:, 0] = E[:, 0]
    for k in range(K):
        X[:, k + 1] = X[:, k] @ M.A.T + U[:, k] @ M.B.T

    roll = X[:, 1:].reshape(-1, n)
    stacked = np.vstack([roll, E_u])
    if M.C is not None:
        Yhat_all = stacked @ M.C.T
        dec_cache = None
    else:
        Yhat_all, dec_cache = mlp_forward(M.decoder, stacked)
    n_roll = roll.shape[0]
    r_pred = Yhat_all[:n_roll] - Y[:, 1:].reshape(-1, p)
    r_rec = Yhat_all[n_roll:] - uniq
    r_lin = (X[:, 1:] - E[:, 1:]).reshape(-1, n)

    c_pred = weights.pred / n_roll
    c_rec = weights.rec / (nb * (K + 1))
    c_lin = weights.lin / r_lin.shape[0]
    loss = (c_pred * np.sum(r_pred ** 2) + c_rec * np.sum(counts * np.sum(r_rec ** 2, axis=1))
            + c_lin * np.sum(r_lin ** 2))
    if not np.isfinite(loss):
        raise NonFiniteLoss()

    g_yhat = np.vstack([2 * c_pred * r_pred, 2 * c_rec * counts[:, None] * r_rec])
    if M.C is not None:
        dC = g_yhat.T @ stacked
        g_stacked = g_yhat @ M.C
        dec_grads = None
    else:
        dC = None
        dec_grads, g_stacked = mlp_backward(M.decoder, dec_cache, g_yhat)

    gX = np.zeros_like(X)
    gX[:, 1:] = g_stacked[:n_roll].reshape(nb, K, n) + 2 * c_lin * r_lin.reshape(nb, K, n)
    gE = np.zeros((nb, K + 1, n))
    gE[:, 1:] -= 2 * c_lin * r_lin.reshape(nb, K, n)

    dA = np.zeros_like(M.A)
    dB = np.zeros_like(M.B)
    for k in range(K - 1, -1, -1):
        g_next = gX[:, k + 1]
        dA += g_next.T @ X[:, k]
        dB += g_next.T @ U[:, k]
        gX[:, k] += g_next @ M.A
    gE[:, 0] += gX[:, 0]

    gE_u = g_stacked[n_roll:].copy()
    np.add.at(gE_u, inv, gE.reshape(-1, n))
    enc_grads, _ = mlp_backward(M.encoder, enc_cache, gE_u)
    return loss, KoopmanGrads(encoder=enc_grads, A=dA, B=dB, C=dC, decoder=dec_grads)


def param_arrays(M: KoopmanModel):
    arrays = M.encoder.arrays() + [M.A, M.B]
    if M.C is not None:
        arrays.append(M.C)
    else:
        arrays.extend(M.decoder.arrays())
    return arrays


def grad_arrays(G: KoopmanGrads):
    arrays = [a for pair in G.encoder for a in pair] + [G.A, G.B]
    if G.C is not None:
        arrays.append(G.C)
    else:
        arrays.extend(a for pair in G.decoder for a in pair)
    return arrays


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    rollout_len: int = 20
    epochs: int = 300
    batch: int = 64
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    val_fraction: float = 0.15
    grad_clip: float = 10.0
    window_stride: int = 1

    def validate(self):
        if min(self.rollout_len, self.epochs, self.batch, self.window_stride) < 1:
            raise ValueError("rollout_len, epochs, batch and window_stride must be >= 1")
        if not (self.lr > 0 and self.weights.pred > 0 and self.weights.rec >= 0 and self.weights.lin >= 0):
            raise ValueError("learning rate and loss weights must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def make_windows(U, Y, K, stride=1):
    """Overlapping windows of K inputs and K+1 outputs, one every ``stride`` samples."""
    T = len(U)
    if T < K + 1:
        return np.empty((0, K, U.shape[1])), np.empty((0, K + 1, Y.shape[1]))
    idx = np.arange(0, T - K, stride)[:, None] + np.arange(K + 1)[None, :]
    return U[idx[:, :K]], Y[idx]


def init_koopman(p, m, n_lift, variant, rng, timestep=1.0) -> KoopmanModel:
    enc = init_mlp((p, *ENCODER_HIDDEN, n_lift), ("relu", "relu", "relu", "linear"), rng)
    A = 0.99 * np.eye(n_lift)
    B = rng.uniform(-0.01, 0.01, size=(n_lift, m))
    if variant == LINEAR:
        C = rng.uniform(-1, 1, size=(p, n_lift)) / math.sqrt(n_lift)
        return KoopmanModel(enc, A, B, C=C, timestep=timestep)
    if variant == NONLINEAR:
        dec = init_mlp((n_lift, *DECODER_HIDDEN, p), ("elu", "elu", "elu", "linear"), rng)
        return KoopmanModel(enc, A, B, decoder=dec, timestep=timestep)
    raise WrongVariant(f"unknown variant {variant!r}")


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batched_loss(M, Uw, Yw, weights, chunk=256):
    if len(Uw) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(Uw), chunk):
        loss, _ = koopman_loss(M, Uw[s:s + chunk], Yw[s:s + chunk], weights)
        total += loss * len(Uw[s:s + chunk])
    return total / len(Uw)


def train_koopman(d: Dataset, variant=LINEAR, n_lift=30, cfg: TrainConfig | None = None,
                  u_scaler: Scaler | None = None, y_scaler: Scaler | None = None,
                  val: Dataset | None = None, log_path=None,
                  init: KoopmanModel | None = None) -> KoopmanModel:
    """Fit a Koopman model on a physical-unit dataset.

    Without an explicit ``val`` dataset the last ``cfg.val_fraction`` of the
    record is held out for validation. ``init`` starts from a copy of an
    existing model (same variant and lifted dimension) instead of a random one.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    u_scaler = u_scaler or fit_scaler(d.U)
    y_scaler = y_scaler or fit_scaler(d.Y)
    Us = transform(u_scaler, d.U)
    Ys = transform(y_scaler, d.Y)
    K = cfg.rollout_len
    if val is None and cfg.val_fraction > 0:
        split = int(round(len(d) * (1 - cfg.val_fraction)))
        Uw, Yw = make_windows(Us[:split], Ys[:split], K, cfg.window_stride)
        Uv, Yv = make_windows(Us[split:], Ys[split:], K, cfg.window_stride)
    else:
        Uw, Yw = make_windows(Us, Ys, K, cfg.window_stride)
        if val is not None:
            Uv, Yv = make_windows(transform(u_scaler, val.U), transform(y_scaler, val.Y), K,
                                  cfg.window_stride)
        else:
            Uv, Yv = Uw[:0], Yw[:0]
    if len(Uw) == 0:
        raise ValueError("dataset shorter than one training window")

    rng = np.random.default_rng(cfg.seed)
    if init is None:
        M = init_koopman(Ys.shape[1], Us.shape[1], n_lift, variant, rng, timestep=d.timestep)
    else:
        if init.variant != variant or init.n_lift != n_lift:
            raise WrongVariant("initial model does not match the requested variant and dimension")
        M = KoopmanModel.from_dict(init.to_dict())
    M.u_scaler, M.y_scaler = u_scaler, y_scaler
    params = param_arrays(M)
    opt = _Adam(params)
    best = math.inf
    bad_epochs = 0
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
        order = rng.permutation(len(Uw))
        epoch_loss = 0.0
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            try:
                loss, G = koopman_loss(M, Uw[idx], Yw[idx], cfg.weights)
            except NonFiniteLoss:
                raise NonFiniteLoss(epoch) from None
            grads = grad_arrays(G)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
            opt.step(params, grads, lr)
            epoch_loss += loss * len(idx)
        train_loss = epoch_loss / len(order)
        if not math.isfinite(train_loss):
            raise NonFiniteLoss(epoch)
        val_loss = _batched_loss(M, Uv, Yv, cfg.weights)
        history.append((epoch, train_loss, val_loss))
        best = min(best, train_loss)
        bad_epochs = bad_epochs + 1 if train_loss > 10 * best else 0
        if bad_epochs >= 20:
            raise DivergedLoss(f"training loss stayed 10x above its best for 20 epochs (epoch {epoch})")
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d train %.5g val %.5g", epoch, train_loss, val_loss)

    M.train_loss = _batched_loss(M, Uw, Yw, cfg.weights)
    M.val_loss = val_loss
    M.rec_residual = reconstruction_residual(M, Ys)
    M.history = history
    if log_path is not None:
        write_training_log(history, log_path)
    return M


def reconstruction_residual(M: KoopmanModel, Y_scaled):
    """Mean squared norm of ``project(lift(y)) - y`` over scaled samples."""
    R = M.project(lift(M, Y_scaled)) - Y_scaled
    return float(np.mean(np.sum(R ** 2, axis=1)))


def write_training_log(history, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def is_admissible(M: KoopmanModel, rank_tol=DEFAULT_RANK_TOL, rescale=1):
    S = rescale_timestep(export_linear(M), rescale)
    n = S.n
    return controllability_rank(S.A, S.B, rank_tol) == n and observability_rank(S.A, S.C, rank_tol) == n


def truncate_lifted(M: KoopmanModel, n, Y_scaled) -> KoopmanModel:
    """Linear-variant model with ``n`` lifted coordinates: rotate onto the
    principal directions of the lifted training samples and drop the weakest.
    """
    if M.variant != LINEAR:
        raise WrongVariant("truncation is defined for the linear-projection variant")
    E = lift(M, Y_scaled)
    _, _, Vt = np.linalg.svd(E - E.mean(axis=0), full_matrices=False)
    V = Vt[:n].T  # (n_lift, n), orthonormal columns
    enc = MlpParams.from_list(M.encoder.to_list())
    last = enc.layers[-1]
    last.W, last.b = V.T @ last.W, V.T @ last.b
    return KoopmanModel(enc, V.T @ M.A @ V, V.T @ M.B, C=M.C @ V, timestep=M.timestep,
                        u_scaler=M.u_scaler, y_scaler=M.y_scaler)


def reduce_lifted_dimension(d: Dataset, start=30, rank_tol=DEFAULT_RANK_TOL, cfg: TrainConfig | None = None,
                            rescale=1, warm_start=False, refine_epochs=None, refine_lr=None,
                            **train_kwargs) -> KoopmanModel:
    """Train linear-projection models from ``start`` downwards until the
    lifted pair (A, B, C) passes both rank tests.

    ``rescale`` selects the timestep multiple at which the rank tests run.
    With ``warm_start`` each smaller model starts from the truncated previous
    one and trains for ``refine_epochs`` (default a fifth of ``cfg.epochs``) at
    ``refine_lr`` (default a fifth of ``cfg.lr``).
    """
    cfg = cfg or TrainConfig()
    p = d.Y.shape[1]
    if start < p:
        raise ValueError(f"start dimension {start} below output dimension {p}")
    floor = p if start == p else p + 1
    M = None
    for n in range(start, floor - 1, -1):
        if warm_start and M is not None:
            Ys = transform(M.y_scaler, d.Y)
            refine = replace(cfg, epochs=refine_epochs or max(1, cfg.epochs // 5),
                             lr=refine_lr or cfg.lr / 5)
            kwargs = dict(train_kwargs, u_scaler=M.u_scaler, y_scaler=M.y_scaler)
            M = train_koopman(d, LINEAR, n, refine, init=truncate_lifted(M, n, Ys), **kwargs)
        else:
            M = train_koopman(d, LINEAR, n, cfg, **train_kwargs)
        if is_admissible(M, rank_tol, rescale):
            log.info("lifted dimension %d admissible", n)
            return M
        log.info("lifted dimension %d fails the rank tests", n)
    raise NoAdmissibleDimension(f"no lifted dimension in [{floor}, {start}] passes the rank tests")
