"""Frozen pre-norm decoder-only transformer with a byte-level tokenizer.

The same weights serve two roles: last-token readout of prompt text, and causal
reasoning over injected patch embeddings.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .numerics import Rng

BOS, EOS, PAD = 256, 257, 258


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_positions: int = 256
    vocab_size: int = 259
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise BackboneError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


def tokenize(text: str, max_positions: int = 256) -> list[int]:
    """BOS + UTF-8 bytes + EOS, suffix-truncated to ``max_positions`` tokens."""
    body = list(text.encode("utf-8")) + [EOS]
    if len(body) > max_positions - 1:
        body = body[len(body) - (max_positions - 1) :]
    return [BOS, *body]


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, rng: Rng, std: float):
        super().__init__()
        self.n_heads = n_heads

        def w(shape):
            return nn.Parameter(torch.from_numpy(rng.normal(shape) * std).float())

        def const(shape, value):
            return nn.Parameter(torch.full(shape, float(value)))

        self.ln1_g, self.ln1_b = const((d,), 1.0), const((d,), 0.0)
        self.W_qkv, self.b_qkv = w((d, 3 * d)), const((3 * d,), 0.0)
        self.W_o, self.b_o = w((d, d)), const((d,), 0.0)
        self.ln2_g, self.ln2_b = const((d,), 1.0), const((d,), 0.0)
        self.W_fc1, self.b_fc1 = w((d, 4 * d)), const((4 * d,), 0.0)
        self.W_fc2, self.b_fc2 = w((4 * d, d)), const((d,), 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, d = x.shape
        hd = d // self.n_heads
        h = nn.functional.layer_norm(x, (d,), self.ln1_g, self.ln1_b)
        q, k, v = (h @ self.W_qkv + self.b_qkv).split(d, dim=-1)
        q, k, v = (t.view(B, N, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.ones(N, N, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(B, N, d)
        x = x + y @ self.W_o + self.b_o
        h = nn.functional.layer_norm(x, (d,), self.ln2_g, self.ln2_b)
        return x + nn.functional.gelu(h @ self.W_fc1 + self.b_fc1) @ self.W_fc2 + self.b_fc2


class FrozenBackbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = Rng(seed, "backbone")
        d, std = config.d_model, config.init_std
        self.tok_emb = nn.Parameter(torch.from_numpy(rng.child("tok").normal((config.vocab_size, d)) * std).float())
        self.pos_emb = nn.Parameter(torch.from_numpy(rng.child("pos").normal((config.max_positions, d)) * std).float())
        self.blocks = nn.ModuleList(
            Block(d, config.n_heads, rng.child(f"block{i}"), std) for i in range(config.n_layers)
        )
        self.lnf_g = nn.Parameter(torch.ones(d))
        self.lnf_b = nn.Parameter(torch.zeros(d))
        self.requires_grad_(False)
        self.prompt_calls = 0  # instrumented: number of prompt-encoding forward passes

    def _run(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.pos_emb[: x.shape[1]]
        for block in self.blocks:
            x = block(x)
        return nn.functional.layer_norm(x, (x.shape[-1],), self.lnf_g, self.lnf_b)

    def forward_causal(self, e: torch.Tensor) -> torch.Tensor:
        """Contextualize a (B, N, d) sequence of patch embeddings; output i sees inputs 1..i only."""
        if e.shape[-2] > self.config.max_positions:
            raise BackboneError(f"sequence of {e.shape[-2]} exceeds capacity {self.config.max_positions}")
        return self._run(e)

    def encode_prompts(self, token_lists: Sequence[Sequence[int]]) -> torch.Tensor:
        """Final-token hidden state for each prompt, (B, d). Right padding is invisible under the causal mask."""
        if not token_lists or any(len(t) == 0 for t in token_lists):
            raise BackboneError("empty token sequence")
        if any(len(t) > self.config.max_positions for t in token_lists):
            raise BackboneError("token sequence exceeds max_positions")
        self.prompt_calls += 1
        width = max(len(t) for t in token_lists)
        ids = torch.full((len(token_lists), width), PAD, dtype=torch.long)
        for i, t in enumerate(token_lists):
            ids[i, : len(t)] = torch.tensor(list(t), dtype=torch.long)
        with torch.no_grad():
            hidden = self._run(self.tok_emb[ids])
        last = torch.tensor([len(t) - 1 for t in token_lists])
        return hidden[torch.arange(len(token_lists)), last]

    def encode_prompt(self, tokens: Sequence[int]) -> torch.Tensor:
        return self.encode_prompts([tokens])[0]


def backbone_hash(backbone: nn.Module) -> str:
    """SHA-256 over the backbone's named parameters in f32 little-endian order."""
    h = hashlib.sha256()
    for name, p in backbone.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()
