"""Forecasting head, composite training objective, training loop, and prompt-free rolling inference."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, FrozenBackbone
from .complexity import ComplexityVector, complexity_matrix
from .config import ModelConfig
from .hte import HeterogeneousEncoder, RoutingRecord, SharedLinearEncoder
from .numerics import AdamHyper, AdamState, Rng, adam_step, param_groups, uniform_init
from .series import Window, lookback_stats, segment

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class ForecastError(ValueError):
    pass


class TalonModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = Rng(config.seed, "model")
        S, d = config.S, config.d
        if config.disable_hte:
            self.encoder = SharedLinearEncoder(S, d, rng.child("hte"))
        else:
            self.encoder = HeterogeneousEncoder(
                S, d, config.k, rng.child("hte"), config.experts, config.disable_routing
            )
        self.backbone = FrozenBackbone(
            BackboneConfig(config.n_layers, d, config.n_heads, config.max_positions, init_std=config.backbone_init_std),
            seed=config.seed,
        )
        h = rng.child("head")
        self.W_h1 = nn.Parameter(torch.from_numpy(uniform_init(h, (d, 2 * d), d)).float())
        self.b_h1 = nn.Parameter(torch.zeros(2 * d))
        self.W_h2 = nn.Parameter(torch.from_numpy(uniform_init(h, (2 * d, S), 2 * d)).float())
        self.b_h2 = nn.Parameter(torch.zeros(S))
        self._prompts = None

    @property
    def dtype(self) -> torch.dtype:
        return self.W_h1.dtype

    @property
    def prompts(self):
        # Imported lazily: the inference path never touches prompt machinery.
        if self._prompts is None:
            from .sam import PromptBank

            self._prompts = PromptBank(self.backbone, self.config.experts)
        return self._prompts

    def head(self, f: torch.Tensor) -> torch.Tensor:
        return nn.functional.gelu(f @ self.W_h1 + self.b_h1) @ self.W_h2 + self.b_h2

    def encode(self, patches: torch.Tensor, comp: torch.Tensor, eps: torch.Tensor | None = None):
        """(B, N, S) patches -> embeddings (B, N, d), gates (B, N, K), routing record over B*N rows."""
        B, N, S = patches.shape
        flat_eps = None if eps is None else eps.reshape(B * N, -1)
        e, gates, record = self.encoder(patches.reshape(B * N, S), comp.reshape(B * N, 3), flat_eps)
        return e.view(B, N, -1), gates.view(B, N, -1), record

    def contextualize(self, e: torch.Tensor) -> torch.Tensor:
        return e if self.config.disable_llm else self.backbone.forward_causal(e)


# --------------------------------------------------------------------- data prep


@dataclass
class Prepared:
    patches: torch.Tensor  # (B, N, S) standardized
    comp: torch.Tensor  # (B, N, 3)
    prompts: torch.Tensor | None  # (B, N, d)

    def __len__(self) -> int:
        return self.patches.shape[0]

    def subset(self, idx) -> "Prepared":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Prepared(self.patches[idx], self.comp[idx], None if self.prompts is None else self.prompts[idx])


def training_sequence(window: Window, S: int) -> tuple[np.ndarray, tuple]:
    """Lookback plus the first target segment (when available), standardized with lookback stats."""
    seq = window.lookback
    if window.target.shape[0] >= S:
        seq = np.concatenate([window.lookback, window.target[:S]])
    mean, std = window.norm_stats
    return (seq - mean) / std, window.timestamps[: seq.shape[0]]


def prepare(model: TalonModel, windows: Sequence[Window], with_prompts: bool | None = None) -> Prepared:
    cfg = model.config
    if not windows:
        raise ForecastError("no windows to prepare")
    seqs, stamps = zip(*(training_sequence(w, cfg.S) for w in windows))
    lengths = {s.shape[0] for s in seqs}
    if len(lengths) != 1:
        raise ForecastError("windows must share one sequence length")
    arr = np.stack(seqs).reshape(len(seqs), -1, cfg.S)
    comp = complexity_matrix(arr, cfg.period)
    if with_prompts is None:
        with_prompts = cfg.effective_beta > 0
    prompts = None
    if with_prompts:
        prompts = prompt_embeddings(model, arr, comp, stamps)
    dtype = model.dtype
    return Prepared(torch.from_numpy(arr).to(dtype), torch.from_numpy(comp).to(dtype), prompts)


def prompt_embeddings(model: TalonModel, arr: np.ndarray, comp: np.ndarray, stamps) -> torch.Tensor:
    B, N, S = arr.shape
    if model.config.static_prompt:
        return model.prompts.static(B * N).view(B, N, -1).to(model.dtype)
    out = []
    for b in range(B):
        _, metas = segment(arr[b].reshape(-1), S, stamps[b])
        cvs = [ComplexityVector(*map(float, c)) for c in comp[b]]
        out.append(model.prompts.prompts_for_window(metas, cvs))
    return torch.stack(out).to(model.dtype)


# ------------------------------------------------------------------ objective


@dataclass
class ForwardOutput:
    preds: torch.Tensor  # (B, N-1, S)
    e: torch.Tensor  # (B, N, d)
    gates: torch.Tensor  # (B, N, K)
    record: RoutingRecord | None
    l_mse: torch.Tensor
    l_moe: torch.Tensor
    l_align: torch.Tensor
    total: torch.Tensor


def total_loss(l_mse, l_moe, l_align, alpha: float, beta: float):
    for name, v in (("L_MSE", l_mse), ("L_MoE", l_moe), ("L_align", l_align)):
        value = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite {name}: {value}")
    return l_mse + alpha * l_moe + beta * l_align


def forward_train(model: TalonModel, batch: Prepared, eps: torch.Tensor | None = None) -> ForwardOutput:
    """Teacher-forced next-segment objective: position i predicts patch i+1 for i = 1..N-1."""
    cfg = model.config
    patches = batch.patches
    if patches.shape[1] < 2:
        raise ForecastError("need at least 2 patches for next-segment training")
    e, gates, record = model.encode(patches, batch.comp, eps)
    f = model.contextualize(e)
    preds = model.head(f[:, :-1])
    l_mse = ((preds - patches[:, 1:]) ** 2).mean()
    l_moe = model.encoder.load_balance(gates.reshape(-1, gates.shape[-1]), record) if cfg.alpha > 0 else e.new_zeros(())
    beta = cfg.effective_beta
    if beta > 0:
        if batch.prompts is None:
            raise ForecastError("alignment requires prompt embeddings")
        from .sam import align_loss

        l_align = align_loss(e, batch.prompts, cfg.tau)
    else:
        l_align = e.new_zeros(())
    total = total_loss(l_mse, l_moe, l_align, cfg.alpha, beta)
    return ForwardOutput(preds, e, gates, record, l_mse, l_moe, l_align, total)


# -------------------------------------------------------------------- inference


@torch.no_grad()
def autoregressive_forecast(model: TalonModel, lookback, H: int, noise_rng: Rng | None = None) -> np.ndarray:
    """Prompt-free rolling decode.

    Each step standardizes the current L-length context, predicts the next S values from the
    final position, maps them back to original units, and slides the context by S. Steps are
    independent, so a 2S forecast equals two chained S forecasts.
    """
    cfg = model.config
    if H < 1:
        raise ForecastError("horizon must be >= 1")
    ctx = np.array(lookback, dtype=np.float64, copy=True)
    single = ctx.ndim == 1
    if single:
        ctx = ctx[None]
    if ctx.shape[1] != cfg.L:
        raise ForecastError(f"lookback length {ctx.shape[1]} != L={cfg.L}")
    was_training = model.training
    model.eval()
    outs = []
    for _ in range(-(-H // cfg.S)):
        mean = ctx.mean(1, keepdims=True)
        std = np.maximum(ctx.std(1, keepdims=True), 1e-5)
        norm = ((ctx - mean) / std).reshape(ctx.shape[0], cfg.N, cfg.S)
        comp = complexity_matrix(norm, cfg.period)
        patches = torch.from_numpy(norm).to(model.dtype)
        eps = None
        if cfg.eval_noise:
            rng = noise_rng or Rng(cfg.seed, "eval-noise")
            eps = torch.from_numpy(rng.normal((*norm.shape[:2], 3))).to(model.dtype)
        e, _, _ = model.encode(patches, torch.from_numpy(comp).to(model.dtype), eps)
        nxt = model.head(model.contextualize(e)[:, -1]).double().numpy()
        nxt = nxt * std + mean
        outs.append(nxt)
        ctx = np.concatenate([ctx[:, cfg.S :], nxt], axis=1)
    model.train(was_training)
    pred = np.concatenate(outs, axis=1)[:, :H]
    return pred[0] if single else pred


# --------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: TalonModel
    curve: list[dict] = field(default_factory=list)
    best_val: float = float("nan")
    best_epoch: int = -1
    steps: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None


@torch.no_grad()
def evaluate_mse(model: TalonModel, data: Prepared, batch: int = 256) -> float:
    """Next-segment MSE (standardized units) with deterministic routing."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(data), batch):
        sub = data.subset(range(i, min(i + batch, len(data))))
        e, _, _ = model.encode(sub.patches, sub.comp)
        preds = model.head(model.contextualize(e)[:, :-1])
        err = (preds - sub.patches[:, 1:]) ** 2
        total += float(err.sum())
        count += err.numel()
    model.train(was)
    return total / count


def train(
    config: ModelConfig,
    train_windows: Sequence[Window] | Prepared,
    val_windows: Sequence[Window] | Prepared = (),
    model: TalonModel | None = None,
    on_step: Callable[[int, ForwardOutput], None] | None = None,
) -> TrainResult:
    """Adam on the encoder and head; the backbone stays frozen. Keeps the best-validation weights."""
    model = model or TalonModel(config)
    model.train()
    data = train_windows if isinstance(train_windows, Prepared) else prepare(model, train_windows)
    if len(data) == 0:
        raise ForecastError("empty training set")
    val = None
    if isinstance(val_windows, Prepared):
        val = val_windows
    elif len(val_windows):
        val = prepare(model, val_windows, with_prompts=False)

    groups = param_groups(model)
    trainable = [g for g in groups if g.trainable]
    hyper = AdamHyper(lr=config.lr)
    adam = AdamState()
    rng = Rng(config.seed, "train")
    result = TrainResult(model=model, adam=adam)
    best_state = None
    step = 0
    K = 3
    for epoch in range(config.epochs):
        order = rng.child(f"shuffle/{epoch}").permutation(len(data))
        for i in range(0, len(data), config.batch):
            batch = data.subset(order[i : i + config.batch])
            eps = None
            if config.train_noise:
                noise = rng.child(f"noise/{step}").normal((*batch.patches.shape[:2], K))
                eps = torch.from_numpy(noise).to(model.dtype)
            out = forward_train(model, batch, eps)
            grads = torch.autograd.grad(out.total, [g.tensor for g in trainable], allow_unused=True)
            grad_map = {g.name: gr for g, gr in zip(trainable, grads)}
            for name, gr in grad_map.items():
                if gr is not None and not bool(torch.isfinite(gr).all()):
                    raise TrainingDiverged(f"non-finite gradient for {name} at step {step}")
            adam_step(groups, grad_map, adam, hyper)
            step += 1
            result.curve.append(
                {
                    "step": step,
                    "L": float(out.total.detach()),
                    "L_MSE": float(out.l_mse.detach()),
                    "L_MoE": float(out.l_moe.detach()),
                    "L_align": float(out.l_align.detach()),
                    "val_MSE": "",
                }
            )
            if on_step is not None:
                on_step(step, out)
            if config.max_steps and step >= config.max_steps:
                break
        if val is not None:
            v = evaluate_mse(model, val)
            result.curve[-1]["val_MSE"] = v
            log.info("epoch %d step %d val_MSE %.6f", epoch, step, v)
            if math.isnan(result.best_val) or v < result.best_val:
                result.best_val, result.best_epoch = v, epoch
                best_state = copy.deepcopy({k: t.detach().clone() for k, t in model.state_dict().items()})
        if config.max_steps and step >= config.max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    result.steps = step
    result.rng_state = rng.state()
    return result
