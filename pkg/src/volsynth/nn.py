"""Trainable layers, the Adam optimizer, gradient checking, checkpoints.

Layers own named Parameter tensors and call the ops in :mod:`autodiff`.
Initialization draws from a zero-mean Gaussian (std 0.02, biases zero),
the usual choice for adversarial training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    def __init__(self, data, name):
        super().__init__(data, requires_grad=True, name=name)


def gaussian_init(shape, rng, std=INIT_STD, dtype=np.float64):
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Module:
    """Minimal container: children and parameters are discovered by attribute."""

    def parameters(self):
        params = {}
        for attr in vars(self).values():
            if isinstance(attr, Parameter):
                params[attr.name] = attr
            elif isinstance(attr, Module):
                params.update(attr.parameters())
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, Module):
                        params.update(item.parameters())
                    elif isinstance(item, Parameter):
                        params[item.name] = item
        return params

    def load_state(self, arrays):
        for name, p in self.parameters().items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            src = arrays[name]
            if tuple(src.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"checkpoint shape {src.shape} does not match parameter "
                    f"{name!r} of shape {p.data.shape}")
            p.data = src.astype(p.data.dtype)

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.parameters().items()}


class Dense(Module):
    def __init__(self, in_features, out_features, rng, name, dtype=np.float64):
        self.weight = Parameter(gaussian_init((in_features, out_features), rng, dtype=dtype),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), f"{name}.bias")

    def __call__(self, x):
        return ad.dense(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, rng, name,
                 kernel_size=4, stride=2, pad=1, dtype=np.float64):
        shape = (out_channels, in_channels) + (kernel_size,) * 3
        self.kernel = Parameter(gaussian_init(shape, rng, dtype=dtype), f"{name}.kernel")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), f"{name}.bias")
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ad.conv3d(x, self.kernel, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose3d(Module):
    def __init__(self, in_channels, out_channels, rng, name,
                 kernel_size=4, stride=2, pad=1, dtype=np.float64):
        shape = (in_channels, out_channels) + (kernel_size,) * 3
        self.kernel = Parameter(gaussian_init(shape, rng, dtype=dtype), f"{name}.kernel")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), f"{name}.bias")
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ad.conv3d_transpose(x, self.kernel, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm3d(Module):
    def __init__(self, channels, name, momentum=0.9, eps=1e-5, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.state = ad.BatchNormState(channels, momentum=momentum, eps=eps, dtype=dtype)

    def __call__(self, x, training):
        return ad.batchnorm3d(x, self.gamma, self.beta, self.state, training)


class LabelProjection(Module):
    """Dense map from a label vector to a tanh-activated single-channel volume."""

    def __init__(self, num_classes, spatial, rng, name, dtype=np.float64):
        d, h, w = spatial
        self.spatial = (d, h, w)
        self.weight = Parameter(gaussian_init((num_classes, d * h * w), rng, dtype=dtype),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(d * h * w, dtype=dtype), f"{name}.bias")

    def __call__(self, y):
        n = y.data.shape[0] if isinstance(y, Tensor) else y.shape[0]
        vol = ad.tanh(ad.dense(y if isinstance(y, Tensor) else Tensor(y), self.weight, self.bias))
        return ad.reshape(vol, (n, 1) + self.spatial)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class PoisonedGradientError(ValueError):
    """A gradient contained NaN/Inf; the message names the parameter."""


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise PoisonedGradientError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


class Adam:
    """Optimizer bound to a parameter dict; wraps :func:`adam_step`."""

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = params
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1,
                               beta2=beta2, epsilon=epsilon)

    def step(self, grads):
        adam_step(self.params, grads, self.state)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self):
        return [e for e in self.entries if not e.passed]

    def __str__(self):
        lines = [f"grad check (tol {self.tolerance:g}):"]
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(f"  {e.name}: max rel err {e.max_rel_error:.3e} "
                         f"at {e.worst_index} [{status}]")
        return "\n".join(lines)


def grad_check(build_loss, params, tolerance=1e-4, step=1e-5, noise_floor=None):
    """Compare backprop against central finite differences, parameter by parameter.

    ``build_loss`` maps the parameter dict to a scalar Tensor and is re-run for
    every probe, so it must be deterministic. Use 64-bit parameters.

    The relative-error denominator is floored at the finite-difference noise
    scale (cancellation of two loss values of magnitude |f| leaves roundoff
    ~ eps*|f|/step); coordinates whose true gradient sits below that scale
    cannot be resolved by the probe and pass on the absolute criterion
    |analytic - numeric| <= noise_floor, exactly the usual atol+rtol rule.
    """
    loss = build_loss(params)
    grads = ad.backward(loss, params)
    if noise_floor is None:
        noise_floor = 100.0 * np.finfo(np.float64).eps \
            * max(1.0, abs(loss.item())) / step
    entries = []
    for name, p in params.items():
        analytic = grads[name]
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = build_loss(params).item()
            flat[i] = orig - step
            down = build_loss(params).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                           noise_floor / tolerance)
        rel = np.abs(analytic - numeric) / denom
        worst = int(np.argmax(rel))
        entries.append(GradCheckEntry(
            name=name,
            max_rel_error=float(rel.reshape(-1)[worst]),
            worst_index=tuple(np.unravel_index(worst, rel.shape)),
            passed=bool(rel.reshape(-1)[worst] <= tolerance),
        ))
    return GradCheckReport(entries=entries, tolerance=tolerance)


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line, then raw little-endian arrays
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, precision="float64", extra=None):
    """Write named arrays: JSON header line, then payloads in header order."""
    dtype = np.dtype(precision).newbyteorder("<")
    header = {
        "format": CHECKPOINT_FORMAT,
        "precision": precision,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=dtype).tobytes())


def load_checkpoint(path):
    """Read back arrays and the extra metadata block (or None)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
        dtype = np.dtype(header["precision"]).newbyteorder("<")
        arrays = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(
                    f"truncated checkpoint payload for parameter {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, header.get("extra")
