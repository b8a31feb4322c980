"""Toy DDPM plus boundary-seeking guided fine-tuning.

Forward noising ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``; training
regresses the drawn noise; the reverse step is

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * delta

with ``sigma_t = sqrt(beta_t)`` for t > 1 and 0 at t = 1.

Fine-tuning adds ``lam * mean(guide(g(x_t, t)))`` to the noise-regression
loss, where ``g`` is one reverse step and ``guide`` is a boundary-proximity
penalty measured by the intermediate classifier: its confidence (``pcg``),
the latent k-means distance gap (``lcg-km``) or the latent GMM posterior gap
(``lcg-gmm``). The clustering models are fitted on labeled-data latents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import clustering
from . import diffcore as dc
from . import models

GUIDANCE_MODES = ("pcg", "lcg-km", "lcg-gmm")
PRETRAINED, FINETUNED = "pretrained", "finetuned"
# keeps sqrt differentiable when a latent sits exactly on a centroid
_DIST_EPS = 1e-12


@dataclass
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self) -> int:
        return len(self.betas)

    def _idx(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]")
        return t.astype(np.intp) - 1

    def beta(self, t):
        return self.betas[self._idx(t)]

    def alpha(self, t):
        return self.alphas[self._idx(t)]

    def alpha_bar(self, t):
        return self.alpha_bars[self._idx(t)]


def make_schedule(T: int = 1000, beta_first: float = 1e-4, beta_last: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_first <= beta_last < 1:
        raise ValueError("need 0 < beta_first <= beta_last < 1")
    return DiffusionSchedule(np.linspace(beta_first, beta_last, T))


def _col(v):
    v = np.asarray(v, dtype=np.float64)
    return v[:, None] if v.ndim == 1 else v


def forward_sample(x0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    ab = schedule.alpha_bar(t)
    if x0.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def ddpm_loss_graph(params, x0, t, eps, schedule: DiffusionSchedule):
    """Mean over the batch of ``||eps - eps_hat(x_t, t)||^2``."""
    x_t = forward_sample(x0, t, eps, schedule)
    pred = models.noise_apply(params, x_t, t, schedule.T)
    return dc.mean(dc.sqnorm(dc.sub(eps, pred), axis=1))


def draw_noise(rng, x0, T: int):
    """Per-example timestep uniform on 1..T and a standard normal noise draw."""
    n, d = np.shape(x0)
    t = rng.integers(1, T + 1, size=n)
    eps = rng.normal(size=(n, d))
    return t, eps


def ddpm_loss(params: models.MLPParams, x0, schedule: DiffusionSchedule, rng) -> float:
    x0 = np.asarray(x0, dtype=np.float64)
    if len(x0) == 0:
        raise ValueError("empty batch")
    t, eps = draw_noise(rng, x0, schedule.T)
    return float(ddpm_loss_graph(params, x0, t, eps, schedule).value)


def _reverse_coeffs(t, schedule):
    t = np.asarray(t)
    beta = schedule.beta(t)
    inv_sqrt_alpha = 1.0 / np.sqrt(schedule.alpha(t))
    eps_coef = beta / np.sqrt(1.0 - schedule.alpha_bar(t))
    sigma = np.where(t > 1, np.sqrt(beta), 0.0)
    return inv_sqrt_alpha, eps_coef, sigma


def reverse_step_graph(params, x_t, t, delta, schedule: DiffusionSchedule):
    """One denoising step as a graph node, differentiable in ``params``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t), (len(x_t),))
    inv_sqrt_alpha, eps_coef, sigma = (_col(c) for c in _reverse_coeffs(t, schedule))
    pred = models.noise_apply(params, x_t, t, schedule.T)
    return dc.add(dc.mul(dc.sub(x_t, dc.mul(pred, eps_coef)), inv_sqrt_alpha),
                  sigma * np.asarray(delta, dtype=np.float64))


def reverse_step(params: models.MLPParams, x_t, t, delta, schedule: DiffusionSchedule,
                 eps_hat=None) -> np.ndarray:
    """``x_{t-1}`` from ``x_t``; ``eps_hat`` overrides the network's noise prediction."""
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    t_arr = np.broadcast_to(np.asarray(t), (len(x2),))
    if eps_hat is None:
        eps_hat = models.noise_forward(params, x2, t_arr, schedule.T)
    eps_hat = np.asarray(eps_hat, dtype=np.float64).reshape(x2.shape)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), x2.shape)
    inv_sqrt_alpha, eps_coef, sigma = (_col(c) for c in _reverse_coeffs(t_arr, schedule))
    out = (x2 - eps_coef * eps_hat) * inv_sqrt_alpha + sigma * delta
    return out[0] if single else out


def sample(params: models.MLPParams, n: int, schedule: DiffusionSchedule, seed: int = 0) -> np.ndarray:
    """Ancestral sampling from pure noise through t = T..1."""
    d = params.in_dim - models.TIME_EMBED_DIM
    if n == 0:
        return np.zeros((0, d))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    for t in range(schedule.T, 0, -1):
        delta = rng.normal(size=(n, d)) if t > 1 else np.zeros((n, d))
        x = reverse_step(params, x, t, delta, schedule)
    return x


@dataclass
class DDPMConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0
    hidden: tuple = (128, 128)
    cosine: bool = True


@dataclass
class FinetuneConfig:
    mode: str = "lcg-km"
    lam: float = 0.5
    epochs: int = 15
    lr: float = 0.01
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance mode must be one of {GUIDANCE_MODES}")
        if self.lam < 0 or self.epochs < 0:
            raise ValueError("lambda and epochs must be non-negative")


@dataclass
class DDPMHistory:
    losses: list = field(default_factory=list)
    ddpm_losses: list = field(default_factory=list)
    reg_losses: list = field(default_factory=list)


def _min_gap(values, idx_first, idx_second):
    return dc.sub(dc.take_along(values, idx_first), dc.take_along(values, idx_second))


def guidance_graph(mode: str, x, classifier: models.MLPParams, cluster_model=None):
    """Per-example guidance loss tensor (n,), differentiable w.r.t. ``x``."""
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    logits, z = models.classifier_apply(classifier, x)
    if mode == "pcg":
        probs = dc.softmax(logits)
        return dc.take_along(probs, np.argmax(probs.value, axis=1))
    if cluster_model is None:
        raise ValueError(f"{mode} guidance needs a cluster model fitted on labeled latents")
    n, m = z.shape
    if mode == "lcg-km":
        C = cluster_model.centroids
        diff = dc.sub(dc.reshape(z, (n, 1, m)), C[None, :, :])
        dist = dc.sqrt(dc.add(dc.sqnorm(diff, axis=2), _DIST_EPS))
        order = np.argsort(dist.value, axis=1, kind="stable")
        return _min_gap(dist, order[:, 1], order[:, 0])
    gm = cluster_model
    diff = dc.sub(dc.reshape(z, (n, 1, m)), gm.means[None, :, :])
    maha = dc.sum(dc.mul(dc.mul(diff, diff), 1.0 / gm.variances[None, :, :]), axis=2)
    const = np.log(gm.weights) - 0.5 * (m * np.log(2 * np.pi) + np.log(gm.variances).sum(axis=1))
    post = dc.softmax(dc.add(dc.mul(maha, -0.5), const[None, :]))
    order = np.argsort(-post.value, axis=1, kind="stable")
    return _min_gap(post, order[:, 0], order[:, 1])


def guidance_loss(mode: str, x, classifier: models.MLPParams, cluster_model=None):
    """Guidance loss value(s) for one point (scalar) or a batch (array)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    vals = guidance_graph(mode, x[None, :] if single else x, classifier, cluster_model).value
    return float(vals[0]) if single else vals


def fit_guidance_model(mode: str, classifier: models.MLPParams, X_labeled, k: int | None = None,
                       seed: int = 0):
    """Cluster model over labeled-data latents (None for ``pcg``)."""
    if mode == "pcg":
        return None
    Z = models.latents(classifier, X_labeled)
    k = k or classifier.out_dim
    if mode == "lcg-km":
        return clustering.kmeans_fit(Z, k, seed=seed)
    return clustering.gmm_fit(Z, k, seed=seed)


def total_loss_graph(params, x0, t, eps, delta, schedule, lam, reg_fn):
    """``L_DDPM + lam * mean(guide(g(x_t, t)))``; the guidance term is skipped at lam = 0."""
    l_ddpm = ddpm_loss_graph(params, x0, t, eps, schedule)
    if lam == 0 or reg_fn is None:
        return l_ddpm, l_ddpm, None
    x_t = forward_sample(x0, t, eps, schedule)
    denoised = reverse_step_graph(params, x_t, t, delta, schedule)
    l_reg = dc.mean(reg_fn(denoised))
    return dc.add(l_ddpm, dc.mul(l_reg, lam)), l_ddpm, l_reg


def _run_epochs(params: models.MLPParams, X, schedule, epochs, batch_size, lr, weight_decay,
                seed, cosine, lam=0.0, reg_fn=None):
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("no training data for the diffusion model")
    rng = np.random.default_rng(seed)
    # the reverse-step noise has its own stream so lam = 0 reproduces plain training exactly
    delta_rng = np.random.default_rng(seed + 7919)
    arrays = params.arrays()
    history = DDPMHistory()
    for epoch in range(epochs):
        state = dc.OptimState(lr, weight_decay, max(epochs, 1), epoch)
        step_lr = state.current_lr if cosine else lr
        order = rng.permutation(len(X))
        tot = dd = rg = 0.0
        n_steps = 0
        for s in range(0, len(X), batch_size):
            x0 = X[order[s:s + batch_size]]
            t, eps = draw_noise(rng, x0, schedule.T)
            delta = delta_rng.normal(size=x0.shape) if reg_fn is not None and lam != 0 else None
            parts = {}

            def fn(p, _):
                total, l_ddpm, l_reg = total_loss_graph(p, x0, t, eps, delta, schedule, lam, reg_fn)
                parts["ddpm"], parts["reg"] = l_ddpm, l_reg
                return total
            loss, grads = dc.value_and_grad(fn, arrays)
            arrays = dc.sgd_step(arrays, grads, state, lr=step_lr)
            tot += loss
            dd += float(parts["ddpm"].value)
            rg += float(parts["reg"].value) if parts["reg"] is not None else 0.0
            n_steps += 1
        history.losses.append(tot / n_steps)
        history.ddpm_losses.append(dd / n_steps)
        history.reg_losses.append(rg / n_steps)
    return params.with_arrays(arrays), history


def train_ddpm(X, schedule: DiffusionSchedule, cfg: DDPMConfig | None = None,
               init: models.MLPParams | None = None, return_history: bool = False):
    """Plain noise-regression training (pre-training, or unguided fine-tuning from ``init``)."""
    cfg = cfg or DDPMConfig()
    X = np.asarray(X, dtype=np.float64)
    params = init.copy() if init is not None else models.init_noise_net(X.shape[1], cfg.seed, cfg.hidden)
    out, hist = _run_epochs(params, X, schedule, cfg.epochs, cfg.batch_size, cfg.lr,
                            cfg.weight_decay, cfg.seed + 1, cfg.cosine)
    return (out, hist) if return_history else out


def finetune_guided(pretrained: models.MLPParams, X_labeled, classifier: models.MLPParams,
                    cfg: FinetuneConfig, schedule: DiffusionSchedule, cluster_model=None,
                    return_history: bool = False):
    """SGD on the guidance-regularised loss for ``cfg.epochs`` passes over the labeled data.

    Uses a constant learning rate. With ``lam = 0`` this is exactly
    ``train_ddpm(X, schedule, DDPMConfig(epochs, batch_size, lr, seed=cfg.seed - 1, cosine=False), init=pretrained)``.
    """
    if cfg.mode != "pcg" and cluster_model is None:
        raise ValueError(f"{cfg.mode} guidance needs a cluster model fitted on labeled latents")

    def reg_fn(x):
        return guidance_graph(cfg.mode, x, classifier, cluster_model)
    out, hist = _run_epochs(pretrained.copy(), X_labeled, schedule, cfg.epochs, cfg.batch_size,
                            cfg.lr, 0.0, cfg.seed, False, cfg.lam, reg_fn)
    return (out, hist) if return_history else out


def mixed_counts(n: int, beta: float) -> tuple[int, int]:
    """(pre-trained, fine-tuned) = (ceil((1 - beta) n), rest)."""
    n_pre = math.ceil((1 - Fraction(repr(float(beta)))) * n)
    return n_pre, n - n_pre


def generate_mixed(pretrained: models.MLPParams, finetuned: models.MLPParams, n: int, beta: float,
                   schedule: DiffusionSchedule, seed: int = 0, clip: bool = True):
    """Samples from both models in the (1 - beta) : beta proportion, shuffled.

    Returns ``(X, source)`` with ``source`` naming the model behind each row.
    """
    if n < 1:
        raise ValueError("generate at least one point")
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    n_pre, n_ft = mixed_counts(n, beta)
    parts = [sample(pretrained, n_pre, schedule, seed), sample(finetuned, n_ft, schedule, seed + 1)]
    X = np.concatenate(parts)
    source = np.array([PRETRAINED] * n_pre + [FINETUNED] * n_ft, dtype=object)
    order = np.random.default_rng(seed + 2).permutation(n)
    X, source = X[order], source[order]
    if clip:
        X = np.clip(X, 0.0, 1.0)
    return X, source
