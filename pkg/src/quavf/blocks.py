"""Shared model machinery: attention blocks, pooling, init, checkpoints.

All models are small PyTorch modules trained on CPU.  Activations are smooth
(GELU / tanh, average pooling) so finite-difference gradient checks hold
everywhere, and parameter initialization runs off an explicit generator so a
seed pins the model bit-for-bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch
from threadpoolctl import threadpool_limits
from torch import nn

from .errors import ConfigError, ParseError, TrainingError

_numerics_configured = False


def configure_numerics() -> None:
    """Pin BLAS and torch to one thread.

    On small machines the OpenBLAS and OpenMP pools fight over cores (spinning
    workers stall the other library by an order of magnitude), and
    single-threaded kernels keep results bit-reproducible.  Idempotent.
    """
    global _numerics_configured
    if _numerics_configured:
        return
    threadpool_limits(limits=1)
    torch.set_num_threads(1)
    _numerics_configured = True


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings shared by all branches (SGD with momentum).

    Gradients are clipped to ``clip_norm`` before each step; momentum plus
    the attention blocks diverges without it at useful learning rates.
    """

    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 1.0
    label_smoothing: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"bad training config: {self}")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError(f"label smoothing must lie in [0, 0.5), got {self.label_smoothing}")

    def targets(self, labels: torch.Tensor) -> torch.Tensor:
        """Soften 0/1 labels; bounded targets keep logits from saturating,
        which would otherwise pin predictions on out-of-distribution input."""
        eps = self.label_smoothing
        return labels * (1.0 - 2.0 * eps) + eps


def sinusoidal_positions(n: int, d: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard sin/cos position table of shape (n, d); d must be even."""
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freqs = torch.exp(-math.log(10000.0) * torch.arange(d // 2, dtype=torch.float64) * 2.0 / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freqs)
    table[:, 1::2] = torch.cos(pos * freqs)
    return table.to(dtype)


class SelfAttentionLayer(nn.Module):
    """Pre-norm multi-head self-attention block with a GELU feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int | None = None):
        super().__init__()
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        d_ff = d_ff if d_ff is not None else 4 * d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.norm_attn = nn.LayerNorm(d_model)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff_in = nn.Linear(d_model, d_ff)
        self.ff_out = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, T, D); key_padding_mask: (B, T), True = not attendable.

        Every query must keep at least one attendable key.
        """
        b, t, d = x.shape
        h = self.norm_attn(x)
        q = self.q_proj(h).view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(h).view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(h).view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        if key_padding_mask is not None:
            scores = scores.masked_fill(
                key_padding_mask[:, None, None, :], float("-inf")
            )
        attended = torch.softmax(scores, dim=-1) @ v
        x = x + self.out_proj(attended.transpose(1, 2).reshape(b, t, d))
        x = x + self.ff_out(torch.nn.functional.gelu(self.ff_in(self.norm_ff(x))))
        return x


def adaptive_avg_pool_rows(x: torch.Tensor, n_out: int) -> torch.Tensor:
    """Pool (..., T, D) to (..., n_out, D); window i is rows [floor(iT/n), ceil((i+1)T/n))."""
    t = x.shape[-2]
    if not 1 <= n_out <= t:
        raise ConfigError(f"cannot pool {t} rows down to {n_out}")
    rows = []
    for i in range(n_out):
        lo = (i * t) // n_out
        hi = -((-(i + 1) * t) // n_out)
        rows.append(x[..., lo:hi, :].mean(dim=-2))
    return torch.stack(rows, dim=-2)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize every parameter of the module tree."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
        for name, p in sorted(module.named_parameters(recurse=False)):
            # direct parameters (CLS tokens, type embeddings)
            p.normal_(0.0, 0.5, generator=gen)


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(model: nn.Module, hyper: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        trainable_parameters(model), lr=hyper.lr, momentum=hyper.momentum,
        weight_decay=hyper.weight_decay,
    )


def clip_and_step(model: nn.Module, optimizer: torch.optim.Optimizer, hyper: TrainConfig) -> None:
    if hyper.clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(trainable_parameters(model), hyper.clip_norm)
    optimizer.step()


def chunked(items: Sequence, size: int) -> Iterator[Sequence]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def check_finite_loss(value: float, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


def bce_with_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, labels)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON document per model, diffable at toy scale.

_MODEL_BUILDERS: dict[str, Callable[[dict], nn.Module]] = {}


def register_model_kind(kind: str, builder: Callable[[dict], nn.Module]) -> None:
    _MODEL_BUILDERS[kind] = builder


def save_checkpoint(
    path: Path | str,
    kind: str,
    config: dict,
    model: nn.Module,
    history: Sequence[float] | None = None,
) -> None:
    params = {}
    for name, p in model.named_parameters():
        data = p.detach().to(torch.float64).reshape(-1)
        params[name] = {"shape": list(p.shape), "data": [float(v) for v in data]}
    doc = {
        "kind": kind,
        "config": config,
        "history": list(history) if history is not None else [],
        "params": params,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path: Path | str) -> nn.Module:
    doc = json.loads(Path(path).read_text())
    kind = doc.get("kind")
    if kind not in _MODEL_BUILDERS:
        raise ParseError(f"{path}: unknown or unregistered model kind {kind!r}")
    model = _MODEL_BUILDERS[kind](doc["config"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            entry = doc["params"].get(name)
            if entry is None:
                raise ParseError(f"{path}: checkpoint missing parameter '{name}'")
            values = torch.tensor(entry["data"], dtype=torch.float64).reshape(entry["shape"])
            if tuple(values.shape) != tuple(p.shape):
                raise ParseError(
                    f"{path}: parameter '{name}' has shape {tuple(values.shape)}, "
                    f"expected {tuple(p.shape)}"
                )
            p.copy_(values.to(p.dtype))
    return model


def load_history(path: Path | str) -> list[float]:
    return [float(v) for v in json.loads(Path(path).read_text()).get("history", [])]


# ---------------------------------------------------------------------------
# Finite-difference gradient checking (used by the test suite).


def finite_difference_gradcheck(
    model: nn.Module, loss_fn: Callable[[], torch.Tensor], step: float = 1e-5
) -> float:
    """Max relative error between autograd and central-difference gradients.

    The model must run in float64.  The relative error for each component is
    |analytic - fd| / max(|analytic|, |fd|, 1e-3), so near-zero gradients are
    compared absolutely at 1e-3 * threshold scale.
    """
    for p in trainable_parameters(model):
        if p.dtype != torch.float64:
            raise ConfigError("gradient checks require a float64 model")
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = {n: p.grad.detach().clone().reshape(-1) for n, p in named}
    worst = 0.0
    with torch.no_grad():
        for name, p in named:
            flat = p.data.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * step)
                analytic = grads[name][i].item()
                rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-3)
                worst = max(worst, rel)
    model.zero_grad()
    return worst
