"""Real-NVP style normalizing flow over 6D oriented points, in plain numpy.

The flow maps data ``x`` to latents ``z`` through a per-dimension whitening
step followed by affine coupling layers. Each coupling keeps the masked
dimensions fixed and updates the rest as ``y = x * exp(s) + t`` where
``s`` and ``t`` come from two small tanh MLPs of the fixed dimensions;
``s`` is soft-clamped to ``[-scale_clamp, scale_clamp]``.

Gradients are computed by hand so training needs nothing beyond numpy.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError

log = logging.getLogger(__name__)

DIM = 6
LOG_2PI = float(np.log(2 * np.pi))


class Mlp:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise ContractError("weight/bias shape mismatch")
        for w0, w1 in zip(self.weights[:-1], self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ContractError("consecutive layer widths do not match")

    @classmethod
    def create(cls, widths, rng, out_scale=1.0):
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w = rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))
            if i == len(widths) - 2:
                w *= out_scale
            weights.append(w)
            biases.append(np.zeros(b))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, widths):
        return cls([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
                   [np.zeros(b) for b in widths[1:]])

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.weights[0].shape[0]:
            raise ContractError(f"expected input width {self.weights[0].shape[0]}, got {x.shape[-1]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts, grad_out):
        """Return ``(param_grads, grad_input)`` given cached activations."""
        grad_out = np.asarray(grad_out, dtype=float)
        if grad_out.shape != acts[-1].shape:
            raise ContractError("gradient shape does not match the network output")
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


def mlp_forward(net, x):
    return net.forward(x)


def mlp_backward(net, x, grad_out):
    """Gradients of ``sum(grad_out * net(x))`` w.r.t. parameters and input."""
    _, acts = net.forward(x, keep=True)
    return net.backward(acts, grad_out)


@dataclass
class CouplingLayer:
    mask: np.ndarray
    scale_net: Mlp
    translate_net: Mlp
    scale_clamp: float = 5.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.all() or not self.mask.any():
            raise ContractError("coupling mask needs both fixed and transformed dims")
        if self.scale_clamp <= 0:
            raise ContractError("scale_clamp must be positive")

    def parameters(self):
        return self.scale_net.parameters() + self.translate_net.parameters()

    def _scale_shift(self, xa, keep=False):
        raw, acts_s = self.scale_net.forward(xa, keep=True)
        th = np.tanh(raw / self.scale_clamp)
        s = self.scale_clamp * th
        t, acts_t = self.translate_net.forward(xa, keep=True)
        return s, t, (acts_s, acts_t, th)

    def forward(self, x):
        xa, xb = x[:, self.mask], x[:, ~self.mask]
        s, t, _ = self._scale_shift(xa)
        y = np.empty_like(x)
        y[:, self.mask] = xa
        y[:, ~self.mask] = xb * np.exp(s) + t
        return y, s.sum(axis=1)

    def inverse(self, y):
        ya, yb = y[:, self.mask], y[:, ~self.mask]
        s, t, _ = self._scale_shift(ya)
        x = np.empty_like(y)
        x[:, self.mask] = ya
        x[:, ~self.mask] = (yb - t) * np.exp(-s)
        return x


@dataclass
class FlowModel:
    """Stack of coupling layers behind a fitted per-dimension normaliser."""

    layers: list
    shift: np.ndarray = field(default_factory=lambda: np.zeros(DIM))
    scale: np.ndarray = field(default_factory=lambda: np.ones(DIM))
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if len(self.layers) < 2:
            raise ContractError("a flow needs at least 2 coupling layers")
        if np.any(self.scale <= 0):
            raise ContractError("normaliser scales must be strictly positive")
        covered = np.zeros(DIM, bool)
        for layer in self.layers:
            covered |= ~layer.mask
        if not covered.all():
            raise ContractError("every dimension must be transformed by some layer")

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def hidden(self):
        return self.layers[0].scale_net.widths[1]

    @property
    def depth(self):
        """Number of hidden layers per MLP."""
        return len(self.layers[0].scale_net.weights) - 1

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.parameters()
        return out

    def copy(self):
        return copy.deepcopy(self)


def default_masks(n_layers):
    """Alternate first-3/last-3 with an interleaved pattern every other pair."""
    patterns = [
        np.array([1, 1, 1, 0, 0, 0], bool),
        np.array([0, 0, 0, 1, 1, 1], bool),
        np.array([1, 0, 1, 0, 1, 0], bool),
        np.array([0, 1, 0, 1, 0, 1], bool),
    ]
    return [patterns[i % 4] for i in range(n_layers)]


def create_flow(n_layers=4, hidden=128, depth=2, rng=None, scale_clamp=5.0, out_scale=0.1,
                masks=None, zero=False):
    """Randomly initialised flow (or an exact identity coupling stack when ``zero``)."""
    rng = np.random.default_rng(0) if rng is None else rng
    masks = default_masks(n_layers) if masks is None else masks
    layers = []
    for m in masks:
        n_in = int(np.sum(m))
        widths = [n_in] + [hidden] * depth + [DIM - n_in]
        if zero:
            s_net, t_net = Mlp.zeros(widths), Mlp.zeros(widths)
        else:
            s_net = Mlp.create(widths, rng, out_scale)
            t_net = Mlp.create(widths, rng, out_scale)
        layers.append(CouplingLayer(m, s_net, t_net, scale_clamp))
    return FlowModel(layers)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != DIM:
        raise ContractError(f"expected {DIM}-vectors, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("flow input must be finite")
    return x, single


def normalizer_logdet(model):
    return float(-np.sum(np.log(model.scale)))


def flow_forward(model, x, per_layer=False):
    """Map data to latent space. Returns ``(z, logdet)`` (+ per-layer logdets)."""
    x, single = _as_batch(x)
    h = (x - model.shift) / model.scale
    logdet = np.full(len(x), normalizer_logdet(model))
    parts = []
    for layer in model.layers:
        h, ld = layer.forward(h)
        parts.append(ld)
        logdet = logdet + ld
    if single:
        h, logdet, parts = h[0], float(logdet[0]), [float(p[0]) for p in parts]
    return (h, logdet, parts) if per_layer else (h, logdet)


def flow_inverse(model, z):
    z, single = _as_batch(z)
    h = z
    for layer in reversed(model.layers):
        h = layer.inverse(h)
    x = h * model.scale + model.shift
    return x[0] if single else x


def log_prob(model, x):
    z, logdet = flow_forward(model, x)
    return -0.5 * np.sum(np.square(z), axis=-1) - 0.5 * DIM * LOG_2PI + logdet


def flow_sample(model, rng, n):
    if n < 1:
        raise ContractError("n must be >= 1")
    z = rng.standard_normal((n, DIM))
    return flow_inverse(model, z)


# ---------------------------------------------------------------------------
# training


def nll_and_grad(model, x):
    """Mean negative log-likelihood of a batch and its parameter gradients.

    Gradients are returned in the order of ``model.parameters()``.
    """
    x, _ = _as_batch(x)
    B = len(x)
    h = (x - model.shift) / model.scale
    caches = []
    total_ld = np.full(B, normalizer_logdet(model))
    for layer in model.layers:
        xa, xb = h[:, layer.mask], h[:, ~layer.mask]
        s, t, (acts_s, acts_t, th) = layer._scale_shift(xa)
        es = np.exp(s)
        y = np.empty_like(h)
        y[:, layer.mask] = xa
        y[:, ~layer.mask] = xb * es + t
        caches.append((layer, xb, es, acts_s, acts_t, th))
        total_ld += s.sum(axis=1)
        h = y
    z = h
    loss = float(np.mean(0.5 * np.sum(z * z, axis=1) + 0.5 * DIM * LOG_2PI - total_ld))

    g = z / B  # dL/dz
    g_ld = -1.0 / B  # dL/d(logdet) for every layer and sample
    grads = []
    for layer, xb, es, acts_s, acts_t, th in reversed(caches):
        gy_a, gy_b = g[:, layer.mask], g[:, ~layer.mask]
        g_xb = gy_b * es
        g_s = gy_b * xb * es + g_ld
        g_raw = g_s * (1.0 - th * th)
        ps, gin_s = layer.scale_net.backward(acts_s, g_raw)
        pt, gin_t = layer.translate_net.backward(acts_t, gy_b)
        g_new = np.empty_like(g)
        g_new[:, layer.mask] = gy_a + gin_s + gin_t
        g_new[:, ~layer.mask] = g_xb
        g = g_new
        grads = ps + pt + grads
    return loss, grads


class Adam:
    """Adam with an optional variance rectification term (RAdam)."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, rectified=False):
        if lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.rectified = rectified
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.b1, self.b2
        bc1 = 1 - b1**t
        rect = 1.0
        adaptive = True
        if self.rectified:
            rho_inf = 2.0 / (1 - b2) - 1
            rho_t = rho_inf - 2 * t * b2**t / (1 - b2**t)
            if rho_t > 4:
                rect = np.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
            else:
                adaptive = False
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / bc1
            if adaptive:
                v_hat = np.sqrt(v / (1 - b2**t))
                p -= self.lr * rect * m_hat / (v_hat + self.eps)
            else:
                p -= self.lr * m_hat


@dataclass
class FlowTrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 256
    n_iterations: int = 2000
    seed: int = 0
    n_layers: int = 4
    hidden: int = 128
    depth: int = 2
    scale_clamp: float = 5.0
    out_scale: float = 0.1
    rectified: bool = False
    holdout: float = 0.1

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.n_iterations < 0:
            raise ConfigurationError("batch_size must be >= 1 and n_iterations >= 0")
        if not 0 <= self.holdout < 1:
            raise ConfigurationError("holdout fraction must be in [0, 1)")
        return self


def fit_normalizer(data):
    shift = data.mean(axis=0)
    scale = data.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    return shift, scale


def train_flow(dataset, config=None):
    """Maximum-likelihood fit of a fresh flow to ``dataset`` (N x 6).

    A held-out split (``config.holdout``) is kept aside; its mean log-prob
    before and after training plus the per-iteration batch losses are stored
    in ``model.info``.
    """
    config = (config or FlowTrainConfig()).validate()
    data, _ = _as_batch(dataset)
    if len(data) < config.batch_size:
        raise ConfigurationError(f"dataset of {len(data)} points is smaller than batch_size={config.batch_size}")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(data))
    n_hold = int(round(config.holdout * len(data)))
    held, train = data[order[:n_hold]], data[order[n_hold:]]
    model = create_flow(config.n_layers, config.hidden, config.depth, rng, config.scale_clamp, config.out_scale)
    model.shift, model.scale = fit_normalizer(train)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, rectified=config.rectified)
    batch = min(config.batch_size, len(train))
    held_init = float(np.mean(log_prob(model, held))) if n_hold else float("nan")
    history = []
    for it in range(config.n_iterations):
        if batch == len(train):
            xb = train
        else:
            xb = train[rng.integers(0, len(train), batch)]
        loss, grads = nll_and_grad(model, xb)
        if not np.isfinite(loss):
            raise ContractError(f"non-finite training loss at iteration {it}")
        opt.step(grads)
        history.append(loss)
    held_final = float(np.mean(log_prob(model, held))) if n_hold else float("nan")
    model.info = {
        "history": history,
        "heldout_logprob_init": held_init,
        "heldout_logprob_final": held_final,
        "n_train": len(train),
        "n_heldout": n_hold,
        "config": dict(config.__dict__),
    }
    log.debug("flow trained: held-out log-prob %.3f -> %.3f", held_init, held_final)
    return model
