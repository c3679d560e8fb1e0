"""Dense float64 arithmetic, activations, dropout, Adam and gradient checking.

Matrices are plain ``numpy.ndarray`` objects with dtype float64. Vectors are
1-D arrays. Gradients are derived by hand per operation; ``finite_diff_check``
is the contract every backward pass is tested against.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)

FLOAT = np.float64


def _ensure_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{op}: non-finite values in result")
    return x


class RngStream:
    """Deterministic random stream keyed by ``(seed, label)``.

    The label is hashed with SHA-256 so derived streams are stable across
    processes and platforms; numpy's PCG64 provides the draws.
    """

    def __init__(self, seed, label="root"):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.sha256(self.label.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF, *words])
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, label):
        return RngStream(self.seed, f"{self.label}/{label}")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r})"


@dataclass(eq=False)
class ParamTensor:
    """A trainable tensor with its gradient buffer.

    ``value`` and ``grad`` may be views into larger storage (the shared item
    embeddings rely on this), so every update must happen in place.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param, **hyper):
        return cls(m=np.zeros(param.shape, dtype=FLOAT), v=np.zeros(param.shape, dtype=FLOAT), **hyper)


def matmul(a, b):
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _ensure_finite(a @ b, "matmul")


def log_softmax(logits, axis=-1):
    """Log-softmax along ``axis`` using max subtraction."""
    x = np.asarray(logits, dtype=FLOAT)
    if x.size == 0:
        raise ValueError("log_softmax: empty input")
    if not np.all(np.isfinite(x)):
        raise ContractError("log_softmax: non-finite logits")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def sigmoid_map(x):
    x = np.asarray(x, dtype=FLOAT)
    # Two branches keep exp() from overflowing for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS = {
    "relu": (relu, lambda pre: (pre > 0).astype(FLOAT)),
    "identity": (lambda x: x, lambda pre: np.ones_like(pre)),
    "tanh": (np.tanh, lambda pre: 1.0 - np.tanh(pre) ** 2),
}


class FFN2:
    """Two-layer feed-forward block ``d -> d/2 -> d``.

    Weights follow the ``out x in`` convention, so a batch ``x`` of shape
    ``(n, d)`` maps to ``act(x @ w_in.T + b_in) @ w_out.T + b_out``.
    """

    def __init__(self, prefix, d, activation="relu"):
        if d % 2:
            raise DimensionError(f"FFN2 needs an even width, got {d}")
        h = d // 2
        self.d = d
        self.activation = activation
        self.w_in = ParamTensor(f"{prefix}.w_in", np.zeros((h, d)))
        self.b_in = ParamTensor(f"{prefix}.b_in", np.zeros(h))
        self.w_out = ParamTensor(f"{prefix}.w_out", np.zeros((d, h)))
        self.b_out = ParamTensor(f"{prefix}.b_out", np.zeros(d))

    def tensors(self):
        return [self.w_in, self.b_in, self.w_out, self.b_out]

    def forward(self, x):
        act, _ = ACTIVATIONS[self.activation]
        pre = x @ self.w_in.value.T + self.b_in.value
        hidden = act(pre)
        out = hidden @ self.w_out.value.T + self.b_out.value
        return out, (x, pre, hidden)

    def backward(self, grad_out, cache):
        """Accumulate parameter gradients and return the input gradient."""
        x, pre, hidden = cache
        _, dact = ACTIVATIONS[self.activation]
        self.w_out.grad += grad_out.T @ hidden
        self.b_out.grad += grad_out.sum(axis=0)
        g_pre = (grad_out @ self.w_out.value) * dact(pre)
        self.w_in.grad += g_pre.T @ x
        self.b_in.grad += g_pre.sum(axis=0)
        return g_pre @ self.w_in.value


def ffn2_forward(x, layer1, layer2, activation="relu"):
    """Evaluate a two-layer FFN on a vector or a batch of row vectors.

    ``layer1`` is ``(W_a, c_a)`` with ``W_a`` of shape ``(d/2, d)``; ``layer2``
    is ``(W_b, c_b)`` with ``W_b`` of shape ``(d, d/2)``. Entries may be arrays
    or :class:`ParamTensor`.
    """
    unwrap = lambda t: t.value if isinstance(t, ParamTensor) else np.asarray(t, dtype=FLOAT)
    w_a, c_a = map(unwrap, layer1)
    w_b, c_b = map(unwrap, layer2)
    x = np.asarray(x, dtype=FLOAT)
    d = x.shape[-1]
    if d % 2 or w_a.shape != (d // 2, d) or c_a.shape != (d // 2,) or w_b.shape != (d, d // 2) or c_b.shape != (d,):
        raise DimensionError(
            f"ffn2_forward: input width {d} incompatible with layer shapes "
            f"{w_a.shape}, {c_a.shape}, {w_b.shape}, {c_b.shape}"
        )
    act, _ = ACTIVATIONS[activation]
    return _ensure_finite(act(x @ w_a.T + c_a) @ w_b.T + c_b, "ffn2_forward")


def dropout_mask(shape, rate, rng):
    """Inverted-dropout multiplier: zeros with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=FLOAT)
    keep = rng.generator.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_apply(x, rate, rng, training):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(np.shape(x), rate, rng)


def adam_step(param, state):
    """One Adam update with L2 weight decay folded into the gradient.

    Updates ``param.value`` and the state in place and returns both.
    """
    g = param.grad
    if state.weight_decay:
        g = g + state.weight_decay * param.value
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    # lr * m_hat / (sqrt(v_hat) + eps), evaluated in place.
    denom = state.v / (1.0 - state.beta2 ** state.t)
    np.sqrt(denom, out=denom)
    denom += state.eps
    step = state.m / (1.0 - state.beta1 ** state.t)
    step *= state.lr
    step /= denom
    param.value -= step
    return param, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    n_coords: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def finite_diff_check(loss_fn, params, h=1e-5, tolerance=1e-4, max_coords=None, seed=0, floor=1e-6):
    """Compare analytic gradients in ``param.grad`` with central differences.

    ``loss_fn`` takes no arguments and evaluates the loss at the current
    parameter values; it must not touch ``grad``. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` set,
    a seeded sample of that many coordinates per tensor is checked.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    base = loss_fn()
    if loss_fn() != base:
        raise ContractError("finite_diff_check: loss_fn is not deterministic")
    rng = RngStream(seed, "finite_diff_check")
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    for p in params:
        flat = p.value.reshape(-1)
        if not np.shares_memory(flat, p.value):
            raise ContractError(f"{p.name}: value cannot be perturbed in place")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.generator.choice(flat.size, size=max_coords, replace=False))
        analytic = p.grad.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = loss_fn()
            flat[c] = orig - h
            down = loss_fn()
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.per_tensor[p.name] = worst
        report.n_coords += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    log.debug("gradient check: max rel error %.3e over %d coords", report.max_rel_error, report.n_coords)
    return report
