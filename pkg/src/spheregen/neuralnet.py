"""Small dense networks with hand-written backprop, Adam and early stopping.

Only the fixed MLP topology needed by the flow-matching velocity field and
the GAN is supported: affine layers, one hidden activation shared by all
hidden layers, and either a linear or an angle-range output head.
"""

import copy
from dataclasses import dataclass, field
import logging

import numpy as np

logger = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("relu", "leaky_relu", "swish")
OUTPUT_HEADS = ("linear", "angle_head")
DEFAULT_LEAKY_SLOPE = 0.01

_PI_LOW = np.nextafter(0.0, 1.0)
_PI_HIGH = np.nextafter(np.pi, 0.0)


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    """Validation loss became non-finite; ``history`` holds the epochs so far."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


class MlpNetwork:
    """Feed-forward network ``layer_dims[0] -> ... -> layer_dims[-1]``.

    Parameters
    ----------
    layer_dims : sequence of int
        Widths including input and output.
    hidden_activation : {"relu", "leaky_relu", "swish"}
    output_head : {"linear", "angle_head"}
        ``angle_head`` maps the last layer's pre-activations to spherical
        angles: ``pi * sigmoid`` for all but the last output and
        ``pi * tanh`` for the last one.
    rng : numpy Generator, optional
        Used for initialisation; zero parameters when omitted.
    """

    def __init__(self, layer_dims, hidden_activation="relu", output_head="linear",
                 rng=None, leaky_slope=DEFAULT_LEAKY_SLOPE):
        layer_dims = [int(w) for w in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError("need at least input and output widths, all positive")
        if hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_activation!r}")
        if output_head not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {output_head!r}")
        self.layer_dims = layer_dims
        self.hidden_activation = hidden_activation
        self.output_head = output_head
        self.leaky_slope = float(leaky_slope)
        self.weights = []
        self.biases = []
        n_layers = len(layer_dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                hidden = i < n_layers - 1
                if hidden and hidden_activation in ("relu", "leaky_relu"):
                    bound = np.sqrt(6.0 / fan_in)  # Kaiming uniform
                else:
                    bound = np.sqrt(6.0 / (fan_in + fan_out))  # Glorot uniform
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    # -- parameters ---------------------------------------------------------

    @property
    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]``; arrays are shared, not copied."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params):
        for i in range(len(self.weights)):
            self.weights[i][...] = params[2 * i]
            self.biases[i][...] = params[2 * i + 1]

    def copy(self):
        return copy.deepcopy(self)

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    # -- evaluation ---------------------------------------------------------

    def _activate(self, z):
        if self.hidden_activation == "relu":
            return np.maximum(z, 0.0), None
        if self.hidden_activation == "leaky_relu":
            return np.where(z > 0, z, self.leaky_slope * z), None
        s = _sigmoid(z)
        return z * s, s

    def _activate_grad(self, z, h, s):
        if self.hidden_activation == "relu":
            return (z > 0).astype(float)
        if self.hidden_activation == "leaky_relu":
            return np.where(z > 0, 1.0, self.leaky_slope)
        # d/dz z*s(z) = s + z s (1 - s) = s + h - h s
        return s + h - h * s

    def _head(self, z):
        if self.output_head == "linear":
            return z
        out = np.empty_like(z)
        out[:, :-1] = np.clip(np.pi * _sigmoid(z[:, :-1]), _PI_LOW, _PI_HIGH)
        out[:, -1] = np.clip(np.pi * np.tanh(z[:, -1]), -_PI_HIGH, _PI_HIGH)
        return out

    def _head_grad(self, z):
        if self.output_head == "linear":
            return np.ones_like(z)
        g = np.empty_like(z)
        s = _sigmoid(z[:, :-1])
        g[:, :-1] = np.pi * s * (1.0 - s)
        t = np.tanh(z[:, -1])
        g[:, -1] = np.pi * (1.0 - t * t)
        return g

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise ValueError(f"expected input of shape (m, {self.layer_dims[0]}), got {x.shape}")
        return x

    def forward(self, x, return_cache=False):
        x = self._check_input(x)
        inputs, pre, aux = [], [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w
            z += b
            pre.append(z)
            if i < last:
                h, s = self._activate(z)
                aux.append((h, s))
            else:
                h = self._head(z)
        if return_cache:
            return h, (inputs, pre, aux)
        return h

    __call__ = forward

    def backward(self, cache, grad_out):
        """Gradients of ``sum(grad_out * forward(x))`` w.r.t. parameters and input.

        Returns
        -------
        grads : list of ndarray
            Same layout as :attr:`params`.
        grad_input : ndarray
        """
        inputs, pre, aux = cache
        g = np.asarray(grad_out, dtype=float)
        if g.shape != pre[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {pre[-1].shape}")
        g = g * self._head_grad(pre[-1])
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                h, s = aux[i]
                g = g * self._activate_grad(pre[i], h, s)
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    # -- persistence --------------------------------------------------------

    def to_dict(self):
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.hidden_activation,
            "leaky_slope": self.leaky_slope,
            "output_head": self.output_head,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc):
        net = cls(doc["layer_dims"], doc["activation"], doc["output_head"],
                  leaky_slope=doc.get("leaky_slope", DEFAULT_LEAKY_SLOPE))
        n_layers = len(net.weights)
        if len(doc["weights"]) != n_layers or len(doc["biases"]) != n_layers:
            raise ValueError(f"expected {n_layers} weight and bias blocks for layer_dims {net.layer_dims}")
        for i, (w, b) in enumerate(zip(doc["weights"], doc["biases"])):
            w = np.asarray(w, dtype=float)
            b = np.asarray(b, dtype=float)
            if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
                raise ValueError(f"layer {i} parameter shapes do not match layer_dims")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} parameters are not finite")
            net.weights[i] = w
            net.biases[i] = b
        return net


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter {i} at step {state.step_count + 1}"
            )
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError("parameter and gradient shapes differ")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 5000
    patience: int = 500
    batch_size: int = 256
    val_fraction: float = 0.2
    seed: int = 0
    lr: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 1 <= self.patience < self.max_epochs:
            raise ValueError("patience must satisfy 1 <= patience < max_epochs")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class TrainResult:
    net: MlpNetwork
    history: list
    best_epoch: int
    best_val_loss: float


def train_loop(net, loss_fn, data, cfg):
    """Minibatch Adam training with early stopping on a held-out tail.

    Parameters
    ----------
    net : MlpNetwork
        Trained in place; on return it holds the best-validation parameters.
    loss_fn : callable
        ``loss_fn(net, batch, rng, need_grad) -> (loss, grads or None)``.
        ``rng`` supplies any per-batch randomness. Validation calls receive a
        generator re-seeded identically every epoch, so stochastic losses are
        compared on the same draws.
    data : ndarray, shape (n, ...)
    cfg : TrainConfig
    """
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    if n == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    shuffled = data[rng.permutation(n)]
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        raise ValueError("validation split leaves no training data")
    train, val = shuffled[: n - n_val], shuffled[n - n_val :]
    val_seed = np.random.SeedSequence([cfg.seed, 0x5EED])

    state = AdamState(lr=cfg.lr)
    params = net.params
    history = []
    best_val = np.inf
    best_params = [p.copy() for p in params]
    best_epoch = -1
    since_best = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train.shape[0])
        total, count = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            batch = train[order[start : start + cfg.batch_size]]
            loss, grads = loss_fn(net, batch, rng, True)
            adam_step(state, params, grads)
            total += loss * batch.shape[0]
            count += batch.shape[0]
        val_loss, _ = loss_fn(net, val, np.random.default_rng(val_seed), False)
        val_loss = float(val_loss)
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss})
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss is {val_loss} at epoch {epoch}", history)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    net.set_params(best_params)
    return TrainResult(net, history, best_epoch, best_val)
