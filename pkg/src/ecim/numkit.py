"""Dense numerical core: seeded PRNG, MLPs with manual backprop, Adam, Gaussians.

Everything is float64. Weight matrices are stored ``(fan_in, fan_out)`` so a
batch ``x`` of shape ``(N, fan_in)`` maps to ``x @ W + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, UsageError

MASK64 = (1 << 64) - 1
LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

CHECKPOINT_FORMAT = "ecim-params-v1"


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    """Deterministically derive an independent 64-bit seed for a sub-stream."""
    _, a = splitmix64((seed & MASK64) ^ ((stream * 0xD1B54A32D192ED03) & MASK64))
    _, b = splitmix64(a ^ stream)
    return b


_U64 = np.uint64


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Rng:
    """xoshiro256++ generator run as ``lanes`` independent parallel streams.

    Seeding: a splitmix64 stream started at ``seed`` yields 4 words per lane,
    lane by lane. Lane 0 is therefore the canonical splitmix64-seeded
    xoshiro256++ stream, and ``lanes=1`` reproduces it exactly.

    A request for ``n`` values advances every lane ``ceil(n / lanes)`` times
    and reads the outputs step-major; leftovers are discarded. The stream is
    a pure function of the seed, the lane count and the request sizes.
    """

    def __init__(self, seed: int, lanes: int = 64):
        if lanes < 1:
            raise ConfigError("lanes must be >= 1")
        self.seed = int(seed) & MASK64
        self.lanes = lanes
        sm = self.seed
        words = []
        for _ in range(4 * lanes):
            sm, z = splitmix64(sm)
            words.append(z)
        s = np.array(words, dtype=np.uint64).reshape(lanes, 4)
        self._s = [s[:, i].copy() for i in range(4)]

    def _advance(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _rotl(s0 + s3, 23) + s0
        t = s1 << _U64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        steps = -(-n // self.lanes)
        if steps == 0:
            return np.empty(0, dtype=np.uint64)
        block = np.empty((steps, self.lanes), dtype=np.uint64)
        for i in range(steps):
            block[i] = self._advance()
        return block.reshape(-1)[:n]

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in ``[0, 1)`` with 53 random bits each."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> _U64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals by the Box-Muller transform (pairs of uniforms)."""
        n = int(np.prod(shape, dtype=np.int64))
        half = -(-n // 2)
        u = self.uniform((2, half))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        angle = 2.0 * math.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


# ---------------------------------------------------------------------------
# Feed-forward networks
# ---------------------------------------------------------------------------

ACTIVATIONS = ("tanh", "identity")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError(
                f"layer shapes disagree: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


class ForwardCache(NamedTuple):
    inputs: list  # input to each layer
    outputs: list  # post-activation output of each layer
    squeeze: bool


class Mlp:
    """Dense feed-forward network (tanh hidden layers, identity output)."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ConfigError("an Mlp needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ConfigError(
                    f"layer chain broken: {a.weight.shape} followed by {b.weight.shape}"
                )
        self.layers = list(layers)

    @classmethod
    def build(cls, sizes: Sequence[int], rng: Rng, out_gain: float = 1.0) -> "Mlp":
        """Glorot-uniform weights, zero biases; ``sizes`` = (in, hidden..., out)."""
        if len(sizes) < 2:
            raise ConfigError("sizes must list at least input and output dims")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit
            if last:
                w *= out_gain
            layers.append(Layer(w, np.zeros(fan_out), "identity" if last else "tanh"))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in fixed order ``[W0, b0, W1, b1, ...]`` (live views)."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def load_params(self, arrays: Sequence[np.ndarray]) -> None:
        mine = self.params()
        if len(arrays) != len(mine):
            raise ConfigError("parameter count mismatch")
        for dst, src in zip(mine, arrays):
            if dst.shape != np.shape(src):
                raise ConfigError(f"parameter shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.in_dim:
            raise ConfigError(f"input dim {h.shape[-1]} != network input dim {self.in_dim}")
        inputs, outputs = [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight + layer.bias
            h = np.tanh(z) if layer.activation == "tanh" else z
            outputs.append(h)
        return (h[0] if squeeze else h), ForwardCache(inputs, outputs, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, cache: ForwardCache | None, grad_out: np.ndarray, need_input_grad: bool = False
    ) -> tuple[list[np.ndarray], np.ndarray | None]:
        """Backpropagate ``grad_out`` (dLoss/dOutput) through the cached pass.

        Returns parameter gradients in :meth:`params` order and, if asked,
        the gradient with respect to the network input.
        """
        if cache is None:
            raise UsageError("backward called without a forward cache")
        g = np.asarray(grad_out, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "tanh":
                y = cache.outputs[i]
                g = g * (1.0 - y * y)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ layer.weight.T
        gx = None
        if need_input_grad:
            gx = g[0] if cache.squeeze else g
        return grads, gx


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    return params.forward(x)


def mlp_backward(params: Mlp, cache: ForwardCache | None, upstream: np.ndarray) -> list[np.ndarray]:
    return params.backward(cache, upstream)[0]


def add_grads(acc: list[np.ndarray] | None, new: list[np.ndarray]) -> list[np.ndarray]:
    if acc is None:
        return [g.copy() for g in new]
    for a, b in zip(acc, new):
        a += b
    return acc


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    params: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ConfigError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient; Adam update rejected")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: list[np.ndarray], grads: Sequence[np.ndarray], state: Adam) -> Adam:
    if state.params is not params:
        state.params = params
    state.step(grads)
    return state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Diagonal Gaussian
# ---------------------------------------------------------------------------


class GaussianPolicyOut(NamedTuple):
    mean: np.ndarray
    log_std: np.ndarray


def clamp_log_std(log_std: np.ndarray) -> np.ndarray:
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def gaussian_logprob(out: GaussianPolicyOut, action: np.ndarray) -> np.ndarray:
    """Log-density summed over the last axis."""
    mean, log_std = np.asarray(out.mean), np.asarray(out.log_std)
    action = np.asarray(action, dtype=np.float64)
    if np.shape(action)[-1] != np.shape(mean)[-1]:
        raise ConfigError("action dim does not match policy output dim")
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(out: GaussianPolicyOut) -> float:
    log_std = np.asarray(out.log_std, dtype=np.float64)
    return float(np.sum(0.5 * (LOG_2PI + 1.0) + log_std))


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new) -> np.ndarray:
    """KL(old || new) for diagonal Gaussians, summed over the last axis."""
    var_old = np.exp(2.0 * log_std_old)
    var_new = np.exp(2.0 * log_std_new)
    terms = log_std_new - log_std_old + (var_old + (mean_old - mean_new) ** 2) / (2.0 * var_new) - 0.5
    return np.sum(terms, axis=-1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays to an ``.npz`` file (shape header + row-major payload)."""
    payload = {f"p/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__format__"] = np.array(CHECKPOINT_FORMAT)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        fmt = str(data["__format__"]) if "__format__" in data else None
        if fmt != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {fmt!r}")
        return {k[2:]: data[k].copy() for k in data.files if k.startswith("p/")}
