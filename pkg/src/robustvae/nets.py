"""Differentiable MLP modules with named, creation-ordered parameters.

Parameters live in a :class:`ParamStore` as float64 arrays whose values are
always exactly representable in float32, so checkpoints (which store float32)
round-trip bit-exactly.  Modules reference parameters by name and are given a
per-step mapping of leaf tensors, which keeps forward passes reentrant on
frozen parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .distributions import DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN
from .errors import NumericError

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a multilayer perceptron.

    ``hidden`` may be empty for a purely linear head.  The only supported
    activation is leaky-ReLU; batch normalisation, when enabled, is applied
    before the activation of each hidden layer.
    """

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "leaky-relu"
    leaky_slope: float = 0.2
    batch_norm: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim and out_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.activation != "leaky-relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    def param_count(self, include_buffers: bool = False) -> int:
        """Analytic parameter count: sum of fan_in*fan_out + fan_out per layer,
        plus 2 (scale, shift) per batch-norm unit; buffers add 2 more."""
        widths = (self.in_dim, *self.hidden, self.out_dim)
        count = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        if self.batch_norm:
            per_unit = 4 if include_buffers else 2
            count += per_unit * sum(self.hidden)
        return count


def snap_f32(arr: np.ndarray) -> np.ndarray:
    """Round a float64 array onto the float32 grid (still stored as float64)."""
    return arr.astype(np.float32).astype(np.float64)


class ParamStore:
    """Named parameter arrays with a recorded, checkpoint-stable creation order."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self._frozen = False

    def create(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if self._frozen:
            raise RuntimeError("ParamStore is frozen; no new parameters allowed")
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = snap_f32(np.asarray(value, dtype=np.float64))
        self._arrays[name] = arr
        self._trainable[name] = trainable
        return arr

    def freeze(self) -> None:
        self._frozen = True

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        old = self._arrays[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != old.shape:
            raise ValueError(f"shape change for {name!r}: {old.shape} -> {arr.shape}")
        self._arrays[name] = snap_f32(arr)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def trainable_names(self) -> list[str]:
        return [n for n in self._arrays if self._trainable[n]]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: tuple(a.shape) for n, a in self._arrays.items()}

    def total_count(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh leaf tensors wrapping the current parameter values."""
        return {n: Tensor(a, requires_grad=requires_grad and self._trainable[n]) for n, a in self._arrays.items()}

    def flat_f32(self) -> np.ndarray:
        """All parameters concatenated in creation order as little-endian float32."""
        if not self._arrays:
            return np.zeros(0, dtype="<f4")
        return np.concatenate([a.ravel() for a in self._arrays.values()]).astype("<f4")

    def load_flat_f32(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype="<f4")
        if flat.size != self.total_count():
            raise ValueError(f"expected {self.total_count()} values, got {flat.size}")
        offset = 0
        for name, arr in self._arrays.items():
            chunk = flat[offset : offset + arr.size]
            self._arrays[name] = chunk.astype(np.float64).reshape(arr.shape)
            offset += arr.size


class Mlp:
    """An MLP (linear -> [batch-norm] -> leaky-ReLU per hidden layer, linear out)."""

    def __init__(self, name: str, spec: MlpSpec, store: ParamStore, rng: np.random.Generator):
        self.name = name
        self.spec = spec
        self.store = store
        self._layer_names: list[tuple[str, str]] = []
        self._bn_names: list[tuple[str, str, str, str] | None] = []
        widths = (spec.in_dim, *spec.hidden, spec.out_dim)
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = store.create(f"{name}.w{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            b = store.create(f"{name}.b{i}", rng.uniform(-bound, bound, size=fan_out))
            del w, b
            self._layer_names.append((f"{name}.w{i}", f"{name}.b{i}"))
            is_hidden = i < len(spec.hidden)
            if spec.batch_norm and is_hidden:
                store.create(f"{name}.bn{i}.gamma", np.ones(fan_out))
                store.create(f"{name}.bn{i}.beta", np.zeros(fan_out))
                store.create(f"{name}.bn{i}.rmean", np.zeros(fan_out), trainable=False)
                store.create(f"{name}.bn{i}.rvar", np.ones(fan_out), trainable=False)
                self._bn_names.append(
                    (f"{name}.bn{i}.gamma", f"{name}.bn{i}.beta", f"{name}.bn{i}.rmean", f"{name}.bn{i}.rvar")
                )
            else:
                self._bn_names.append(None)

    @property
    def param_names(self) -> list[str]:
        names = []
        for (w, b), bn in zip(self._layer_names, self._bn_names):
            names.extend([w, b])
            if bn is not None:
                names.extend(bn)
        return names

    def forward(self, x: Tensor | np.ndarray, leaves: Mapping[str, Tensor], train: bool = False) -> Tensor:
        """Apply the MLP to a (batch, in_dim) or (in_dim,) input.

        ``leaves`` maps parameter names to the tensors to differentiate
        through; ``train`` selects batch statistics for batch-norm layers.
        """
        xt = ag.as_tensor(x)
        squeeze = xt.ndim == 1
        if squeeze:
            xt = ag.reshape(xt, (1, -1))
        if xt.shape[1] != self.spec.in_dim:
            raise ValueError(f"{self.name}: input width {xt.shape[1]} != in_dim {self.spec.in_dim}")
        h = xt
        n_layers = len(self._layer_names)
        for i, ((wn, bn_), bn_names) in enumerate(zip(self._layer_names, self._bn_names)):
            h = ag.matmul(h, leaves[wn]) + leaves[bn_]
            if i < n_layers - 1:
                if bn_names is not None:
                    h = self._batch_norm(h, leaves, bn_names, train)
                h = ag.leaky_relu(h, self.spec.leaky_slope)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite output from layer {self.name}.w{n_layers - 1}")
        if squeeze:
            h = ag.reshape(h, (-1,))
        return h

    def _batch_norm(self, h: Tensor, leaves: Mapping[str, Tensor], names, train: bool) -> Tensor:
        gamma_n, beta_n, rmean_n, rvar_n = names
        if train:
            mu = ag.amean(h, axis=0, keepdims=True)
            var = ag.amean(ag.square(h - mu), axis=0, keepdims=True)
            # update running statistics outside the graph
            m = _BN_MOMENTUM
            self.store[rmean_n] = (1 - m) * self.store[rmean_n] + m * mu.data.ravel()
            self.store[rvar_n] = (1 - m) * self.store[rvar_n] + m * var.data.ravel()
            norm = (h - mu) / ag.sqrt(var + _BN_EPS)
        else:
            norm = (h - ag.as_tensor(self.store[rmean_n])) / ag.sqrt(
                ag.as_tensor(self.store[rvar_n]) + _BN_EPS
            )
        return norm * leaves[gamma_n] + leaves[beta_n]


def gaussian_head(out: Tensor | np.ndarray) -> DiagGaussian:
    """Split a width-2k output into a DiagGaussian with clamped log-variance."""
    out_t = ag.as_tensor(out)
    width = out_t.shape[-1]
    if width % 2 != 0:
        raise ValueError(f"gaussian head needs an even width, got {width}")
    k = width // 2
    if out_t.ndim == 1:
        mean = out_t[:k]
        log_var = ag.clip(out_t[k:], LOG_VAR_MIN, LOG_VAR_MAX)
    else:
        mean = out_t[:, :k]
        log_var = ag.clip(out_t[:, k:], LOG_VAR_MIN, LOG_VAR_MAX)
    if not isinstance(out, Tensor):
        return DiagGaussian(mean.data, log_var.data)
    return DiagGaussian(mean, log_var)
