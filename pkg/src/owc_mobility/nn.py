"""A small stacked-LSTM regressor in numpy: forward pass, BPTT, Adam, gradient check.

Gate order in every weight block is (input, forget, cell, output). Inputs are
standardised inside the forward pass with the model's ``feature_mean`` /
``feature_scale``; the network output is in standardised target units and
callers de-normalise with ``target_mean`` / ``target_scale``.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import FormatError, InvalidArgument

MAGIC = b"OWCLSTM\x00"
FORMAT_VERSION = 1


@dataclass
class LstmLayerWeights:
    input_weights: np.ndarray      # (4H, D_in)
    recurrent_weights: np.ndarray  # (4H, H)
    biases: np.ndarray             # (4H,)

    @property
    def hidden(self) -> int:
        return self.recurrent_weights.shape[1]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[1]


@dataclass
class LstmModel:
    layers: list[LstmLayerWeights]
    head_weights: np.ndarray  # (O, H)
    head_bias: np.ndarray     # (O,)
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    target_mean: np.ndarray
    target_scale: np.ndarray
    k: int
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgument("model needs at least one LSTM layer")
        d = self.input_dim
        for layer in self.layers:
            h = layer.hidden
            if (layer.input_weights.shape != (4 * h, d) or layer.recurrent_weights.shape != (4 * h, h)
                    or layer.biases.shape != (4 * h,)):
                raise InvalidArgument("inconsistent LSTM layer shapes")
            d = h
        if self.head_weights.shape != (self.output_dim, d) or self.head_bias.shape != (self.output_dim,):
            raise InvalidArgument("head shape does not match top layer")
        if self.feature_mean.shape != (self.input_dim,) or self.feature_scale.shape != (self.input_dim,):
            raise InvalidArgument("feature normalisation vectors have the wrong length")
        if self.target_mean.shape != (self.output_dim,) or self.target_scale.shape != (self.output_dim,):
            raise InvalidArgument("target normalisation vectors have the wrong length")
        if np.any(self.feature_scale <= 0) or np.any(self.target_scale <= 0):
            raise InvalidArgument("normalisation scales must be positive")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def hidden(self) -> int:
        return self.layers[-1].hidden

    @property
    def output_dim(self) -> int:
        return self.head_bias.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in canonical order (references, not copies)."""
        ps = []
        for layer in self.layers:
            ps += [layer.input_weights, layer.recurrent_weights, layer.biases]
        return ps + [self.head_weights, self.head_bias]

    def copy(self) -> "LstmModel":
        return copy.deepcopy(self)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128
    epochs: int = 15
    grad_clip_norm: float = 1.0
    validation_fraction: float = 0.15
    early_stop_patience: int = 6

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.grad_clip_norm <= 0:
            raise InvalidArgument("learning_rate, epsilon and grad_clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidArgument("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.early_stop_patience < 1:
            raise InvalidArgument("batch_size, epochs and early_stop_patience must be >= 1")
        if not 0 < self.validation_fraction <= 0.5:
            raise InvalidArgument("validation_fraction must lie in (0, 0.5]")


def init_model(input_dim: int, hidden: int, layers: int, output_dim: int, k: int,
               rng: np.random.Generator, hyperparams: dict | None = None) -> LstmModel:
    """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias +1, identity normalisation."""
    ls = []
    d = input_dim
    for _ in range(layers):
        bound = 1.0 / math.sqrt(d + hidden)
        wx = rng.uniform(-bound, bound, (4 * hidden, d))
        wh = rng.uniform(-bound, bound, (4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        ls.append(LstmLayerWeights(wx, wh, b))
        d = hidden
    bound = 1.0 / math.sqrt(hidden)
    return LstmModel(
        layers=ls,
        head_weights=rng.uniform(-bound, bound, (output_dim, hidden)),
        head_bias=np.zeros(output_dim),
        feature_mean=np.zeros(input_dim),
        feature_scale=np.ones(input_dim),
        target_mean=np.zeros(output_dim),
        target_scale=np.ones(output_dim),
        k=k,
        hyperparams=dict(hyperparams or {}),
    )


def zero_model(input_dim: int, hidden: int, layers: int, output_dim: int, k: int) -> LstmModel:
    """All-zero weights: the network outputs ``head_bias`` (zero) for any input."""
    m = init_model(input_dim, hidden, layers, output_dim, k, np.random.default_rng(0))
    for p in m.parameters():
        p[...] = 0.0
    return m


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_inputs(model: LstmModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or X.shape[1] != model.k or X.shape[2] != model.input_dim:
        raise InvalidArgument(
            f"expected input of shape (batch, {model.k}, {model.input_dim}), got {X.shape}")
    return X


def _forward(model: LstmModel, X: np.ndarray, keep_cache: bool):
    x = (X - model.feature_mean) / model.feature_scale
    caches = []
    B, k, _ = x.shape
    for layer in model.layers:
        H = layer.hidden
        zx = x @ layer.input_weights.T + layer.biases  # (B, k, 4H)
        dt = zx.dtype
        h = np.zeros((B, H), dtype=dt)
        c = np.zeros((B, H), dtype=dt)
        hs = np.empty((B, k, H), dtype=dt)
        if keep_cache:
            gates = np.empty((B, k, 4 * H))
            cs = np.empty((B, k + 1, H))
            cs[:, 0] = 0.0
            tcs = np.empty((B, k, H))
        for t in range(k):
            z = zx[:, t] + h @ layer.recurrent_weights.T
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            if keep_cache:
                gates[:, t, :H] = i
                gates[:, t, H:2 * H] = f
                gates[:, t, 2 * H:3 * H] = g
                gates[:, t, 3 * H:] = o
                cs[:, t + 1] = c
                tcs[:, t] = tc
        if keep_cache:
            caches.append((x, hs, gates, cs, tcs))
        x = hs
    top = x[:, -1]
    y = top @ model.head_weights.T + model.head_bias
    return y, caches, top


def forward_batch(model: LstmModel, X: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Network outputs (standardised target units) for a batch of windows (B, k, D)."""
    X = _check_inputs(model, X)
    if len(X) <= chunk:
        return _forward(model, X, False)[0]
    return np.concatenate([_forward(model, X[s:s + chunk], False)[0] for s in range(0, len(X), chunk)])


def lstm_forward(model: LstmModel, inputs: np.ndarray) -> np.ndarray:
    """Single-window forward pass: ``inputs`` is (k, D), result is (output_dim,)."""
    return forward_batch(model, np.asarray(inputs, dtype=float)[None])[0]


def bptt_gradients(model: LstmModel, X: np.ndarray, Y: np.ndarray) -> tuple[list[np.ndarray], float]:
    """MSE loss (mean over batch and outputs) and its exact gradient for every parameter.

    The gradient list mirrors :meth:`LstmModel.parameters`.
    """
    X = _check_inputs(model, X)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        raise InvalidArgument("empty batch")
    if Y.shape != (len(X), model.output_dim):
        raise InvalidArgument(f"targets must have shape ({len(X)}, {model.output_dim}), got {Y.shape}")
    y, caches, top = _forward(model, X, True)
    B, O = Y.shape
    err = y - Y
    loss = float(np.mean(err ** 2))
    dy = 2.0 * err / (B * O)

    grads_head_w = dy.T @ top
    grads_head_b = dy.sum(axis=0)
    k = model.k
    d_out = np.zeros(caches[-1][1].shape)
    d_out[:, -1] = dy @ model.head_weights

    layer_grads = []
    for layer, (xin, hs, gates, cs, tcs) in zip(reversed(model.layers), reversed(caches)):
        H = layer.hidden
        Wh = layer.recurrent_weights
        dz_all = np.empty((B, k, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(k - 1, -1, -1):
            i = gates[:, t, :H]
            f = gates[:, t, H:2 * H]
            g = gates[:, t, 2 * H:3 * H]
            o = gates[:, t, 3 * H:]
            tc = tcs[:, t]
            dh = d_out[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ Wh
        flat_dz = dz_all.reshape(-1, 4 * H)
        d_wx = flat_dz.T @ xin.reshape(-1, xin.shape[2])
        h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
        d_wh = flat_dz.T @ h_prev.reshape(-1, H)
        d_b = flat_dz.sum(axis=0)
        layer_grads.append([d_wx, d_wh, d_b])
        d_out = dz_all @ layer.input_weights

    grads = []
    for lg in reversed(layer_grads):
        grads += lg
    return grads + [grads_head_w, grads_head_b], loss


def mse_loss(model: LstmModel, X: np.ndarray, Y: np.ndarray) -> float:
    return float(np.mean((forward_batch(model, X) - np.asarray(Y)) ** 2))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_model(cls, model: LstmModel) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.parameters()],
                   [np.zeros_like(p) for p in model.parameters()])


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


def optimizer_step(model: LstmModel, grads: list[np.ndarray], state: AdamState,
                   config: TrainConfig) -> tuple[LstmModel, AdamState]:
    """Clip to ``grad_clip_norm`` then apply one bias-corrected Adam update in place."""
    grads, _ = clip_by_global_norm(grads, config.grad_clip_norm)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(model.parameters(), grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return model, state


@dataclass
class TrainResult:
    model: LstmModel
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]


def fit(model: LstmModel, X: np.ndarray, Y: np.ndarray, X_val: np.ndarray, Y_val: np.ndarray,
        config: TrainConfig, rng: np.random.Generator, log=None) -> TrainResult:
    """Mini-batch Adam with early stopping on validation loss.

    Targets are expected in the model's standardised units. Returns a copy of
    the best-validation model; ``val_loss[0]`` is the loss before training.
    """
    state = AdamState.for_model(model)
    best = model.copy()
    val_hist = [mse_loss(model, X_val, Y_val)]
    train_hist = [mse_loss(model, X, Y)]
    best_epoch, since_best = 0, 0
    n = len(X)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            grads, loss = bptt_gradients(model, X[idx], Y[idx])
            optimizer_step(model, grads, state, config)
            total += loss * len(idx)
        train_hist.append(total / n)
        val_hist.append(mse_loss(model, X_val, Y_val))
        if log is not None:
            log(f"epoch {epoch:3d}  train {train_hist[-1]:.6g}  val {val_hist[-1]:.6g}")
        if val_hist[-1] < val_hist[best_epoch]:
            best, best_epoch, since_best = model.copy(), epoch, 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
    return TrainResult(best, train_hist, val_hist, best_epoch)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def _extended_copy(model: LstmModel) -> LstmModel:
    m = model.copy()
    for layer in m.layers:
        layer.input_weights = layer.input_weights.astype(np.longdouble)
        layer.recurrent_weights = layer.recurrent_weights.astype(np.longdouble)
        layer.biases = layer.biases.astype(np.longdouble)
    m.head_weights = m.head_weights.astype(np.longdouble)
    m.head_bias = m.head_bias.astype(np.longdouble)
    return m


def gradient_check(model: LstmModel, sample: tuple[np.ndarray, np.ndarray], step: float = 1e-5) -> float:
    """Max relative disagreement between BPTT and central differences over all parameters.

    The finite differences are evaluated in extended precision (``np.longdouble``)
    so that float64 round-off in the loss does not swamp small gradients.
    """
    if step <= 0:
        raise InvalidArgument("step must be positive")
    X, Y = sample
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 2:
        X, Y = X[None], Y[None]
    analytic, _ = bptt_gradients(model, X, Y)
    ext = _extended_copy(model)
    X_ext = X.astype(np.longdouble)
    Y_ext = Y.astype(np.longdouble)
    h = np.longdouble(step)

    def loss():
        return np.mean((_forward(ext, X_ext, False)[0] - Y_ext) ** 2)

    worst = 0.0
    for p, g in zip(ext.parameters(), analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss()
            flat[j] = orig - h
            lm = loss()
            flat[j] = orig
            fd = float((lp - lm) / (2 * h))
            denom = max(abs(fd), abs(gflat[j]), 1e-12)
            worst = max(worst, abs(fd - gflat[j]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   8s magic | u32 version | u32 n_layers | u32 input_dim | u32 hidden | u32 output_dim | u32 k
#   u32 len(json) | json hyperparams (utf-8, sorted keys)
#   f64[] feature_mean, feature_scale, target_mean, target_scale,
#         per layer: input_weights, recurrent_weights, biases (row-major),
#         head_weights, head_bias

_HEADER = struct.Struct("<8sIIIIIII")


def serialize_model(model: LstmModel) -> bytes:
    hidden = {layer.hidden for layer in model.layers}
    if len(hidden) != 1:
        raise InvalidArgument("serialisation requires equal hidden size in every layer")
    meta = json.dumps(model.hyperparams, sort_keys=True, separators=(",", ":")).encode()
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(model.layers), model.input_dim, hidden.pop(),
                          model.output_dim, model.k, len(meta)), meta]
    arrays = [model.feature_mean, model.feature_scale, model.target_mean, model.target_scale]
    arrays += model.parameters()
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def deserialize_model(data: bytes) -> LstmModel:
    if len(data) < _HEADER.size:
        raise FormatError("truncated model header")
    magic, version, n_layers, d, h, o, k, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad magic: not a model file")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    if n_layers < 1:
        raise FormatError("model must have at least one layer")
    pos = _HEADER.size
    if len(data) < pos + meta_len:
        raise FormatError("truncated hyperparameter block")
    try:
        hyper = json.loads(data[pos:pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad hyperparameter block: {exc}") from None
    pos += meta_len

    shapes = [(d,), (d,), (o,), (o,)]
    din = d
    for _ in range(n_layers):
        shapes += [(4 * h, din), (4 * h, h), (4 * h,)]
        din = h
    shapes += [(o, h), (o,)]
    total = sum(int(np.prod(s)) for s in shapes) * 8
    if len(data) - pos != total:
        raise FormatError(f"expected {total} bytes of weights, found {len(data) - pos}")
    arrays = []
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(float).reshape(s))
        pos += n * 8
    fm, fs, tm, ts = arrays[:4]
    w = arrays[4:]
    layers = [LstmLayerWeights(*w[3 * i:3 * i + 3]) for i in range(n_layers)]
    return LstmModel(layers, w[-2], w[-1], fm, fs, tm, ts, k, hyper)


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
