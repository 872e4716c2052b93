"""Semantic alignment: token-adaptive prompts, frozen prompt embeddings, contrastive alignment loss.

Used only while training and for offline diagnostics. The inference path never imports
anything from here.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .backbone import FrozenBackbone, tokenize
from .complexity import ComplexityVector
from .hte import EXPERT_NAMES
from .series import PatchMeta

NORM_GUARD = 1e-12

TEMPLATE = (
    "[Expert Routing Hint]\n"
    "The available expert types are: {experts}.\n"
    "\n"
    "[Patch Time Context]\n"
    "This patch consists of {token_len} time steps, from {patch_start} to {patch_end}.\n"
    "It is part of a longer input window, which spans from {x_start} to {x_end} and contains {seq_len} time steps.\n"
    "\n"
    "[Complexity Features]\n"
    "Trend Strength: {c1}.\n"
    "Local Variation: {c2}.\n"
    "Temporal Dependency: {c3}.\n"
)

STATIC_PROMPT = (
    "Dataset description: a univariate time series split into fixed-length patches.\n"
    "Task description: forecast the next patch given the previous patches.\n"
)

build_count = 0  # instrumented: total build_prompt calls in this process


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    meta: PatchMeta
    complexity: ComplexityVector
    expert_names: tuple[str, ...] = EXPERT_NAMES


def _fmt(x: float) -> str:
    return f"{float(x):.4f}"


def build_prompt(spec: PromptSpec) -> str:
    global build_count
    build_count += 1
    m, c = spec.meta, spec.complexity
    text = TEMPLATE.format(
        experts=", ".join(spec.expert_names),
        token_len=m.token_len,
        patch_start=m.patch_start,
        patch_end=m.patch_end,
        x_start=m.x_start,
        x_end=m.x_end,
        seq_len=m.seq_len,
        c1=_fmt(c.trend_strength),
        c2=_fmt(c.local_variation),
        c3=_fmt(c.autocorr),
    )
    return text.rstrip("\n") + "\n"


def _normalize_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < NORM_GUARD).any()):
        raise AlignmentError("degenerate embedding")
    return x / norms


def align_loss(E: torch.Tensor, P: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """InfoNCE over the N tokens of each sequence: every e_i against all prompts p_j of its sequence.

    Accepts (N, d) or (B, N, d); batched input averages the per-sequence losses.
    """
    if tau <= 0:
        raise AlignmentError("temperature must be positive")
    if E.shape != P.shape:
        raise AlignmentError(f"shape mismatch {tuple(E.shape)} vs {tuple(P.shape)}")
    E, P = _normalize_rows(E), _normalize_rows(P)
    logits = E @ P.transpose(-2, -1) / tau
    N = logits.shape[-1]
    target = torch.arange(N).expand(logits.shape[:-1])
    return nn.functional.cross_entropy(logits.reshape(-1, N), target.reshape(-1))


def diagonal_cosine(E: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    return nn.functional.cosine_similarity(E, P, dim=-1)


class PromptBank:
    """Prompt-embedding cache keyed by rendered prompt bytes."""

    def __init__(self, backbone: FrozenBackbone, expert_names: Sequence[str] = EXPERT_NAMES):
        self.backbone = backbone
        self.expert_names = tuple(expert_names)
        self._cache: dict[bytes, torch.Tensor] = {}
        self._lock = threading.Lock()
        self.dump: list[str] | None = None

    def __len__(self) -> int:
        return len(self._cache)

    def embed_texts(self, texts: Sequence[str]) -> torch.Tensor:
        keys = [t.encode("utf-8") for t in texts]
        missing = list(dict.fromkeys(k for k in keys if k not in self._cache))
        if missing:
            max_pos = self.backbone.config.max_positions
            tokens = [tokenize(k.decode("utf-8"), max_pos) for k in missing]
            out = []
            for i in range(0, len(tokens), 256):
                out.append(self.backbone.encode_prompts(tokens[i : i + 256]))
            emb = torch.cat(out)
            with self._lock:
                for k, v in zip(missing, emb):
                    self._cache[k] = v
            if self.dump is not None:
                self.dump.extend(k.decode("utf-8") for k in missing)
        return torch.stack([self._cache[k] for k in keys])

    def prompts_for_window(self, metas: Sequence[PatchMeta], complexities: Sequence[ComplexityVector]) -> torch.Tensor:
        if len(metas) != len(complexities):
            raise AlignmentError("one complexity vector per patch is required")
        texts = [build_prompt(PromptSpec(m, c, self.expert_names)) for m, c in zip(metas, complexities)]
        return self.embed_texts(texts)

    def static(self, n: int) -> torch.Tensor:
        return self.embed_texts([STATIC_PROMPT] * n)
