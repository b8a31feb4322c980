"""Classifier and noise-prediction MLPs, intermediate-model training, pseudo-labels.

The classifier exposes its penultimate activations as the latent map used by
the clustering-based selection and guidance losses. Both networks share one
flat binary weight format (:func:`save_params` / :func:`load_params`).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

CLASSIFIER = "classifier"
NOISE_NET = "noise"
TIME_EMBED_DIM = 9
_TIME_FREQS = np.pi * 2.0 ** np.arange(4)


@dataclass
class MLPParams:
    """Weights ``W[i]`` of shape (fan_in, fan_out) and biases ``b[i]``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    kind: str = CLASSIFIER

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: W{W.shape} b{b.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input {W.shape[0]} != previous output")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite weights")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [W.shape[1] for W in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_arrays(self, arrays) -> "MLPParams":
        arrays = list(arrays)
        return MLPParams([np.asarray(a) for a in arrays[0::2]],
                         [np.asarray(a) for a in arrays[1::2]], self.kind)

    def copy(self) -> "MLPParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


# both network families share one layout
ClassifierParams = MLPParams
NoiseNetParams = MLPParams


def init_mlp(widths, seed: int, kind: str = CLASSIFIER) -> MLPParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases, kind)


def init_classifier(d: int, n_classes: int, seed: int, hidden=(64, 64)) -> MLPParams:
    return init_mlp([d, *hidden, n_classes], seed, CLASSIFIER)


def init_noise_net(d: int, seed: int, hidden=(128, 128)) -> MLPParams:
    return init_mlp([d + TIME_EMBED_DIM, *hidden, d], seed, NOISE_NET)


def _layers(params):
    """Accept MLPParams or a flat [W0, b0, W1, b1, ...] list of tensors."""
    if isinstance(params, MLPParams):
        return params.arrays()
    return list(params)


def classifier_apply(params, x):
    """Differentiable forward pass; returns ``(logits, latent)`` tensors.

    ``params`` may be an :class:`MLPParams` or a flat list of graph tensors,
    so the same code serves training (grad w.r.t. weights), attacks (grad
    w.r.t. inputs) and guidance losses.
    """
    arrs = _layers(params)
    h = dc.as_tensor(x)
    n_layers = len(arrs) // 2
    for i in range(n_layers - 1):
        h = dc.relu(dc.affine(h, arrs[2 * i], arrs[2 * i + 1]))
    logits = dc.affine(h, arrs[-2], arrs[-1])
    return logits, h


def _check_input(params: MLPParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.in_dim:
        raise ValueError(f"input dim {x2.shape[-1] if x2.ndim else 0} != model input {params.in_dim}")
    return x2


def classifier_forward(params: MLPParams, x):
    """Logits and penultimate latent for one point (d,) or a batch (n, d)."""
    single = np.ndim(x) == 1
    logits, latent = classifier_apply(params, _check_input(params, x))
    if single:
        return logits.value[0], latent.value[0]
    return logits.value, latent.value


def softmax_np(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def confidence(logits) -> np.ndarray:
    """Max softmax probability."""
    return softmax_np(logits).max(axis=-1)


def predict_labels(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return np.argmax(np.asarray(logits), axis=-1)


def pseudo_label(params: MLPParams, x):
    """Pseudo-label(s) and confidence(s) assigned by the intermediate model."""
    logits, _ = classifier_forward(params, x)
    return predict_labels(logits), confidence(logits)


def latents(params: MLPParams, X, batch: int = 4096) -> np.ndarray:
    X = _check_input(params, X)
    return np.concatenate([classifier_forward(params, X[i:i + batch])[1]
                           for i in range(0, len(X), batch)]) if len(X) else np.zeros((0, params.latent_dim))


def logits_of(params: MLPParams, X, batch: int = 4096) -> np.ndarray:
    X = _check_input(params, X)
    if not len(X):
        return np.zeros((0, params.out_dim))
    return np.concatenate([classifier_forward(params, X[i:i + batch])[0]
                           for i in range(0, len(X), batch)])


@dataclass
class IntermediateConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    weight_decay: float = 5e-4
    seed: int = 0
    hidden: tuple = (64, 64)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)


def fit_classifier(params: MLPParams, X, y, cfg: IntermediateConfig,
                   rng: np.random.Generator) -> tuple[MLPParams, TrainHistory]:
    """Minibatch SGD on mean cross-entropy with cosine annealing per epoch."""
    history = TrainHistory()
    arrays = params.arrays()
    n = len(X)
    for epoch in range(cfg.epochs):
        state = dc.OptimState(cfg.lr, cfg.weight_decay, cfg.epochs, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            loss, grads = dc.value_and_grad(
                lambda p, _: dc.cross_entropy(classifier_apply(p, xb)[0], yb), arrays)
            arrays = dc.sgd_step(arrays, grads, state)
            total += loss * len(idx)
        history.losses.append(total / n)
        current = params.with_arrays(arrays)
        history.train_acc.append(float(np.mean(predict_labels(logits_of(current, X)) == y)))
    return params.with_arrays(arrays), history


def train_intermediate(X, y, n_classes: int | None = None,
                       cfg: IntermediateConfig | None = None,
                       return_history: bool = False):
    """Standard (non-adversarial) training of the pseudo-labeler on labeled data."""
    cfg = cfg or IntermediateConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(X) == 0:
        raise ValueError("cannot train the intermediate model on an empty dataset")
    n_classes = n_classes or int(y.max()) + 1
    init = init_classifier(X.shape[1], n_classes, cfg.seed, cfg.hidden)
    rng = np.random.default_rng(cfg.seed + 1)
    params, history = fit_classifier(init, X, y, cfg, rng)
    return (params, history) if return_history else params


def time_embedding(t, T: int) -> np.ndarray:
    """``[t/T, sin(2^k pi t/T), cos(2^k pi t/T)]`` for k = 0..3, per row."""
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep outside [1, {T}]")
    s = (t / T)[:, None]
    return np.concatenate([s, np.sin(s * _TIME_FREQS), np.cos(s * _TIME_FREQS)], axis=1)


def noise_apply(params, x_t, t, T: int):
    """Differentiable noise prediction for a batch ``x_t`` (n, d) with timesteps ``t``."""
    x_t = dc.as_tensor(x_t)
    t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
    emb = time_embedding(t, T)
    arrs = _layers(params)
    h = dc.concat([x_t, emb], axis=1)
    n_layers = len(arrs) // 2
    for i in range(n_layers - 1):
        h = dc.tanh(dc.affine(h, arrs[2 * i], arrs[2 * i + 1]))
    return dc.affine(h, arrs[-2], arrs[-1])


def noise_forward(params: MLPParams, x_t, t, T: int) -> np.ndarray:
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] + TIME_EMBED_DIM != params.in_dim:
        raise ValueError(f"noise net expects data dim {params.in_dim - TIME_EMBED_DIM}")
    out = noise_apply(params, x2, t, T).value
    return out[0] if single else out


_MAGIC = b"SSATMLP"
_VERSION = 1
_KINDS = {CLASSIFIER: 0, NOISE_NET: 1}


def save_params(params: MLPParams, path) -> None:
    """Magic, version byte, kind byte, layer count, then per layer: dims + LE float64."""
    chunks = [_MAGIC, struct.pack("<BBI", _VERSION, _KINDS[params.kind], len(params.weights))]
    for W, b in zip(params.weights, params.biases):
        chunks.append(struct.pack("<II", *W.shape))
        chunks.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> MLPParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter file")
    try:
        return _decode(raw, len(_MAGIC), path)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated parameter file") from exc


def _decode(raw: bytes, pos: int, path) -> MLPParams:
    version, kind, n_layers = struct.unpack_from("<BBI", raw, pos)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    kind_name = {v: k for k, v in _KINDS.items()}.get(kind)
    if kind_name is None:
        raise ValueError(f"{path}: unknown network kind {kind}")
    pos += struct.calcsize("<BBI")
    weights, biases = [], []
    for _ in range(n_layers):
        fan_in, fan_out = struct.unpack_from("<II", raw, pos)
        pos += 8
        if pos + 8 * (fan_in * fan_out + fan_out) > len(raw):
            raise ValueError(f"{path}: truncated parameter file")
        W = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=pos)
        pos += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        weights.append(W.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return MLPParams(weights, biases, kind_name)
