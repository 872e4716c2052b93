"""Tensor substrate: masked softmax, primitive kernels, Adam, gradient checking, seeded RNG.

Autodiff is delegated to torch; ``grad_check`` is an independent central-difference
oracle that every backward rule in the package is validated against.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class NumericsError(ValueError):
    pass


# ----------------------------------------------------------------------------- RNG


def _stream_key(seed: int, stream: str) -> np.ndarray:
    digest = hashlib.sha256(f"{int(seed)}/{stream}".encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Draws are a pure function of ``(seed, stream, draw index)``, so any noise sample can be
    replayed exactly by re-creating the stream and skipping to the same index.
    """

    def __init__(self, seed: int, stream: str = "root", draws: int = 0):
        self.seed = int(seed)
        self.stream = stream
        self._bits = np.random.Philox(key=_stream_key(self.seed, stream))
        self.draws = 0
        if draws:
            self._raw(draws)

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}")

    def _raw(self, n: int) -> np.ndarray:
        out = self._bits.random_raw(n)
        self.draws += n
        return np.asarray(out, dtype=np.uint64).reshape(-1)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller on the uniform stream."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform((m,))  # (0, 1]
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uniform((n,))
        return np.argsort(keys, kind="stable")

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "draws": self.draws}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["stream"], state["draws"])


# ------------------------------------------------------------------- scalar/vector ops


def softmax(v) -> torch.Tensor:
    """Softmax along the last axis; ``-inf`` entries map to exactly zero."""
    v = torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
    if v.shape[-1] == 0:
        raise NumericsError("softmax of empty vector")
    if bool(torch.isneginf(v).all(dim=-1).any()):
        raise NumericsError("fully masked")
    return torch.softmax(v, dim=-1)


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    if torch.is_tensor(x):
        return F.softplus(x)
    x = float(x)
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x):
    if torch.is_tensor(x):
        return torch.sigmoid(x)
    x = float(x)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise NumericsError(f"shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def conv1d(signal: torch.Tensor, kernel: torch.Tensor, padding: str = "same") -> torch.Tensor:
    """1-D cross-correlation.

    ``signal`` is (batch, in_ch, T) and ``kernel`` is (out_ch, in_ch, width). A plain 1-D
    signal with a 1-D kernel is accepted as the single-channel case.
    """
    squeeze = signal.dim() == 1
    if squeeze:
        signal = signal.view(1, 1, -1)
    if kernel.dim() == 1:
        kernel = kernel.view(1, 1, -1)
    if signal.shape[1] != kernel.shape[1]:
        raise NumericsError(
            f"shape mismatch: signal has {signal.shape[1]} channels, kernel expects {kernel.shape[1]}"
        )
    out = F.conv1d(signal, kernel, padding=padding)
    return out.view(-1) if squeeze else out


def lstm_cell(x, h, c, w_ih, w_hh, bias):
    """Standard 4-gate LSTM cell, gate order (input, forget, cell, output).

    ``x``: (B, in), ``h``/``c``: (B, H), ``w_ih``: (in, 4H), ``w_hh``: (H, 4H), ``bias``: (4H,).
    """
    hidden = h.shape[-1]
    if w_ih.shape[-1] != 4 * hidden or w_hh.shape != (hidden, 4 * hidden):
        raise NumericsError("shape mismatch in lstm_cell weights")
    gates = x @ w_ih + h @ w_hh + bias
    i, f, g, o = gates.split(hidden, dim=-1)
    c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_next = torch.sigmoid(o) * torch.tanh(c_next)
    return h_next, c_next


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5):
    if x.shape[-1] != gain.shape[-1]:
        raise NumericsError("shape mismatch in layer_norm")
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def population_std(x: np.ndarray) -> float:
    return float(np.std(np.asarray(x, dtype=np.float64)))


def uniform_init(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


# ------------------------------------------------------------------- parameter groups


@dataclass
class ParamGroup:
    name: str
    tensor: torch.Tensor
    trainable: bool


def param_groups(module: torch.nn.Module) -> list[ParamGroup]:
    """Named parameters of a module, partitioned by their ``requires_grad`` flag."""
    return [ParamGroup(n, p, p.requires_grad) for n, p in module.named_parameters()]


# ------------------------------------------------------------------------------ Adam


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: Sequence[ParamGroup],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    hyper: AdamHyper,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to trainable groups only."""
    if state.step < 0:
        raise NumericsError("negative step counter")
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for group in params:
        if not group.trainable:
            continue
        g = grads.get(group.name)
        if g is None:
            continue
        if g.shape != group.tensor.shape:
            raise NumericsError(
                f"shape mismatch for {group.name}: grad {tuple(g.shape)} vs param {tuple(group.tensor.shape)}"
            )
        m = state.m.get(group.name)
        if m is None:
            m = state.m[group.name] = torch.zeros_like(group.tensor)
            state.v[group.name] = torch.zeros_like(group.tensor)
        v = state.v[group.name]
        m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
        v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
        denom = (v / bc2).sqrt_().add_(hyper.eps)
        group.tensor.addcdiv_(m / bc1, denom, value=-hyper.lr)
    return state


# ------------------------------------------------------------------------ grad check


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[ParamGroup],
    eps: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences over trainable scalars.

    Relative error is ``|a - n| / max(1, |a|, |n|)``. ``loss_fn`` must be deterministic
    (fixed noise draws) and read the parameter tensors in ``params``.
    """
    groups = [g for g in params if g.trainable]
    if not groups:
        return 0.0
    tensors = [g.tensor for g in groups]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericsError("non-finite loss in grad_check")
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, analytic):
            flat = tensor.view(-1)
            grad_flat = grad.reshape(-1) if grad is not None else torch.zeros_like(flat)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericsError("non-finite loss in grad_check")
                numeric = (up - down) / (2 * eps)
                a = grad_flat[idx].item()
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst


def assert_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericsError(f"non-finite values in {what}")
