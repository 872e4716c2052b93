"""Heterogeneous temporal encoder: noisy top-k routing over Linear / CNN / LSTM experts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import Rng, lstm_cell, uniform_init

EXPERT_NAMES = ("Linear", "CNN", "LSTM")
K = len(EXPERT_NAMES)


class RoutingError(ValueError):
    pass


def _param(rng: Rng, shape, fan_in: int) -> nn.Parameter:
    return nn.Parameter(torch.from_numpy(uniform_init(rng, shape, fan_in)).to(torch.float32))


@dataclass
class RoutingRecord:
    z_clean: torch.Tensor  # (B, K) ReLU(s W0t) W1t
    c_tilde: torch.Tensor  # (B, K) ReLU(c W0c) W1c
    eps: torch.Tensor  # (B, K) noise draw (zeros in deterministic eval)
    h: torch.Tensor  # (B, K) routing logits after W_H
    mask: torch.Tensor  # (K,) enabled experts

    def to_json(self, i: int) -> dict:
        return {
            "z_clean": self.z_clean[i].tolist(),
            "c_tilde": self.c_tilde[i].tolist(),
            "eps": self.eps[i].tolist(),
            "h": self.h[i].tolist(),
        }


def keep_top_k(h: torch.Tensor, k: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Keep the k largest logits per row (among enabled experts); everything else -> -inf."""
    if mask is not None:
        h = h.masked_fill(~mask, float("-inf"))
        k = min(k, int(mask.sum()))
    if k > h.shape[-1]:
        raise RoutingError(f"k={k} exceeds number of experts {h.shape[-1]}")
    idx = torch.topk(h, k, dim=-1).indices
    keep = torch.zeros_like(h, dtype=torch.bool).scatter_(-1, idx, True)
    return h.masked_fill(~keep, float("-inf"))


def gate_from_logits(h: torch.Tensor, k: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    return torch.softmax(keep_top_k(h, k, mask), dim=-1)


def aggregate(gate: torch.Tensor, expert_outputs: list[torch.Tensor | None]) -> torch.Tensor:
    """Gate-weighted sum of expert outputs; ``None`` entries must carry zero gate."""
    total = None
    for j, out in enumerate(expert_outputs):
        if out is None:
            continue
        term = gate[..., j : j + 1] * out
        total = term if total is None else total + term
    if total is None:
        raise RoutingError("no expert outputs to aggregate")
    return total


def cv_squared(x: torch.Tensor) -> torch.Tensor:
    mean = x.mean()
    if float(mean.detach()) == 0.0:
        raise RoutingError("mean importance 0 (degenerate batch)")
    return x.var(unbiased=False) / mean**2


def moe_loss(gates: torch.Tensor, record: RoutingRecord, W_H: torch.Tensor, k: int) -> torch.Tensor:
    """Importance + load balancing terms, each the squared coefficient of variation.

    Load uses the probability that each expert stays in the top-k when its own noise is
    resampled, with the noise scale of h_j implied by Softplus(c~) pushed through W_H.
    """
    mask = record.mask
    enabled = mask.nonzero().view(-1)
    k_eff = min(k, len(enabled))
    importance = gates[:, enabled].sum(0)
    l_importance = cv_squared(importance)

    if k_eff >= len(enabled):
        return l_importance  # every enabled expert is always selected; load is flat
    noise_scale = nn.functional.softplus(record.c_tilde)
    std = torch.sqrt(((noise_scale.unsqueeze(-1) * W_H.unsqueeze(0)) ** 2).sum(1)).clamp_min(1e-9)
    clean = record.z_clean @ W_H
    noisy = record.h.masked_fill(~mask, float("-inf"))
    top = torch.topk(noisy, k_eff + 1, dim=-1).values
    thr_in = top[:, k_eff : k_eff + 1]  # best excluded logit
    thr_out = top[:, k_eff - 1 : k_eff]  # weakest included logit
    is_in = noisy >= thr_out
    thr = torch.where(is_in, thr_in, thr_out)
    prob = torch.special.ndtr((clean - thr) / std)
    load = prob[:, enabled].sum(0)
    return l_importance + cv_squared(load)


class HeterogeneousEncoder(nn.Module):
    """Routes each length-S patch to Linear / CNN / LSTM experts and mixes their d-vectors."""

    def __init__(
        self,
        S: int,
        d: int,
        k: int = 2,
        rng: Rng | None = None,
        experts: tuple[str, ...] = EXPERT_NAMES,
        disable_routing: bool = False,
    ):
        super().__init__()
        if not 1 <= k <= K:
            raise RoutingError(f"k={k} must be in [1, {K}]")
        unknown = set(experts) - set(EXPERT_NAMES)
        if unknown or not experts:
            raise RoutingError(f"unknown or empty expert subset {sorted(unknown)}")
        rng = rng or Rng(0, "hte")
        self.S, self.d, self.k = S, d, k
        self.disable_routing = disable_routing
        self.register_buffer("expert_mask", torch.tensor([n in experts for n in EXPERT_NAMES]))

        r = rng.child("router")
        self.W0_t = _param(r, (S, d), S)
        self.W1_t = _param(r, (d, K), d)
        self.W0_c = _param(r, (3, d), 3)
        self.W1_c = _param(r, (d, K), d)
        self.W_H = _param(r, (K, K), K)

        e = rng.child("experts")
        self.W_linear = _param(e, (S, d), S)
        self.cnn_kernel1 = _param(e, (d, 1, 3), 3)
        self.cnn_kernel2 = _param(e, (d, d, 3), 3 * d)
        self.cnn_proj = _param(e, (d, d), d)
        self.lstm_w_ih = _param(e, (1, 4 * d), d)
        self.lstm_w_hh = _param(e, (d, 4 * d), d)
        self.lstm_bias = _param(e, (4 * d,), d)
        self.lstm_proj = _param(e, (d, d), d)

    # -- routing

    def route(self, s: torch.Tensor, c: torch.Tensor, eps: torch.Tensor | None = None):
        """Gate vectors (B, K) and the routing record for a batch of patches (B, S) with complexities (B, 3)."""
        z_clean = torch.relu(s @ self.W0_t) @ self.W1_t
        c_tilde = torch.relu(c @ self.W0_c) @ self.W1_c
        if eps is None:
            eps = torch.zeros_like(z_clean)
        z = z_clean + eps * nn.functional.softplus(c_tilde)
        h = z @ self.W_H
        record = RoutingRecord(z_clean, c_tilde, eps, h, self.expert_mask)
        if self.disable_routing:
            gates = self.expert_mask.to(h.dtype).expand_as(h) / self.expert_mask.sum()
        else:
            gates = gate_from_logits(h, self.k, self.expert_mask)
        return gates, record

    # -- experts

    def expert_linear(self, s: torch.Tensor) -> torch.Tensor:
        return s @ self.W_linear

    def expert_cnn(self, s: torch.Tensor) -> torch.Tensor:
        x = s.unsqueeze(1)  # (B, 1, S)
        x = torch.relu(nn.functional.conv1d(x, self.cnn_kernel1, padding=1))
        x = nn.functional.conv1d(x, self.cnn_kernel2, padding=1)
        return x.mean(-1) @ self.cnn_proj

    def expert_lstm(self, s: torch.Tensor) -> torch.Tensor:
        B = s.shape[0]
        h = s.new_zeros(B, self.d)
        c = s.new_zeros(B, self.d)
        for t in range(s.shape[1]):
            h, c = lstm_cell(s[:, t : t + 1], h, c, self.lstm_w_ih, self.lstm_w_hh, self.lstm_bias)
        return h @ self.lstm_proj

    def expert_outputs(self, s: torch.Tensor, gates: torch.Tensor | None = None) -> list[torch.Tensor | None]:
        fns = (self.expert_linear, self.expert_cnn, self.expert_lstm)
        outs = []
        for j, fn in enumerate(fns):
            active = bool(self.expert_mask[j]) and (gates is None or bool((gates[:, j] > 0).any()))
            outs.append(fn(s) if active else None)
        return outs

    def forward(self, s: torch.Tensor, c: torch.Tensor, eps: torch.Tensor | None = None):
        """Returns (embeddings (B, d), gates (B, K), routing record)."""
        gates, record = self.route(s, c, eps)
        e = aggregate(gates, self.expert_outputs(s, gates))
        return e, gates, record

    def load_balance(self, gates: torch.Tensor, record: RoutingRecord) -> torch.Tensor:
        if self.disable_routing:
            return gates.new_zeros(())
        return moe_loss(gates, record, self.W_H, self.k)


class SharedLinearEncoder(nn.Module):
    """Single linear patch embedder used when the heterogeneous encoder is ablated."""

    def __init__(self, S: int, d: int, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0, "hte")
        self.W = _param(rng.child("shared"), (S, d), S)

    def forward(self, s, c=None, eps=None):
        e = s @ self.W
        gates = e.new_full((s.shape[0], K), 1.0 / K)
        return e, gates, None

    def load_balance(self, gates, record):
        return gates.new_zeros(())


def argmax_expert(gates: torch.Tensor) -> np.ndarray:
    """Most confident expert per row; ties resolve to the lowest index."""
    g = gates.detach().cpu().numpy()
    return np.argmax(g, axis=-1)  # numpy argmax returns the first maximal index

