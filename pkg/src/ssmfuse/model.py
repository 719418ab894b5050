"""Classification heads, the MLP-fusion baseline, and parameter/FLOP accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Linear:
    W: Tensor
    b: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, gain: float = 1.0) -> Linear:
        W = Tensor(rng.normal(0.0, gain / np.sqrt(d_in), size=(d_in, d_out)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        return cls(W, b)

    def __call__(self, x: Tensor) -> Tensor:
        return T.apply_linear(x, self.W, self.b)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.W", self.W
        if self.b is not None:
            yield f"{prefix}.b", self.b


@dataclass
class ActionScores:
    verb_logits: Tensor
    noun_logits: Tensor

    def check_finite(self) -> bool:
        return bool(np.isfinite(self.verb_logits.data).all() and np.isfinite(self.noun_logits.data).all())


def classify(fused: Tensor, head_verb: Linear, head_noun: Linear) -> ActionScores:
    return ActionScores(head_verb(fused), head_noun(fused))


def predict_action(scores: ActionScores) -> tuple[np.ndarray, np.ndarray]:
    """Independent argmax per head; ``np.argmax`` keeps the lowest index on ties."""
    verb = _logits(scores.verb_logits)
    noun = _logits(scores.noun_logits)
    return verb.argmax(axis=-1), noun.argmax(axis=-1)


def _logits(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class MlpFusionParams:
    """Two-layer MLP over the concatenated pooled modalities (2D -> hidden -> D)."""

    hidden: Linear
    out: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, hidden: int | None = None) -> MlpFusionParams:
        hidden = hidden or 4 * d_model
        return cls(Linear.init(rng, 2 * d_model, hidden), Linear.init(rng, hidden, d_model))

    def named_parameters(self, prefix: str):
        yield from self.hidden.named_parameters(f"{prefix}.hidden")
        yield from self.out.named_parameters(f"{prefix}.out")


def mlp_fusion_baseline(x_V: Tensor, x_T: Tensor, params: MlpFusionParams) -> Tensor:
    pooled = T.concat([T.mean(x_V, axis=1), T.mean(x_T, axis=1)])
    return params.out(T.gelu(params.hidden(pooled)))


# ------------------------------------------------------------------ counting


@dataclass
class CountReport:
    rows: list[dict]

    def by_name(self, name: str) -> dict:
        for r in self.rows:
            if r["model"] == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        width = max(len(r["model"]) for r in self.rows)
        lines = [f"{'model':<{width}}  {'params':>12}  {'flops_per_token':>16}"]
        for r in self.rows:
            lines.append(f"{r['model']:<{width}}  {r['params']:>12d}  {r['flops_per_token']:>16d}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["model", "params", "flops_per_token"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def ssm_branch_params(d_model: int, d_state: int, delta_rank: int | None = None) -> int:
    """W_B + W_C + delta projection (with bias) + delta_base."""
    D, N = d_model, d_state
    delta_proj = D * D if delta_rank is None else 2 * D * delta_rank
    return 2 * D * N + delta_proj + D + D


def encoder_params(raw_dim: int, d_model: int, kernel_size: int) -> int:
    D = d_model
    return raw_dim * D + D + D * D + D + D * kernel_size


def head_params(d_model: int, n_verbs: int, n_nouns: int) -> int:
    return (d_model + 1) * (n_verbs + n_nouns)


def transformer_fusion_params(d_model: int, layers: int = 6) -> int:
    """Closed-form weight count 4D^2 (attention) + 8D^2 (4x MLP) per layer."""
    return layers * (4 * d_model**2 + 8 * d_model**2)


def mlp_fusion_params(d_model: int, hidden: int | None = None) -> int:
    hidden = hidden or 4 * d_model
    return 2 * d_model * hidden + hidden + hidden * d_model + d_model


def fusion_block_params(
    d_model: int,
    d_state: int,
    *,
    n_branches: int = 2,
    separate_A: bool = False,
    delta_rank: int | None = None,
    depth: int = 1,
    raw_dim: int | None = None,
    kernel_size: int = 3,
    include_encoders: bool = False,
) -> int:
    D, N = d_model, d_state
    n_A = n_branches if separate_A else 1
    total = 0
    for layer in range(depth):
        total += n_A * D * N + n_branches * ssm_branch_params(D, N, delta_rank)
        if include_encoders:
            d_in = raw_dim if (layer == 0 and raw_dim is not None) else D
            total += n_branches * encoder_params(d_in, D, kernel_size)
    return total


def fusion_flops_per_token(d_model: int, d_state: int, delta_rank: int | None = None) -> int:
    """2 FLOPs per multiply-accumulate; the scan costs 3 MACs per (d, n) plus N per output."""
    D, N = d_model, d_state
    proj = 2 * D * N + (D * D if delta_rank is None else 2 * D * delta_rank)
    scan = 3 * D * N + D * N
    return 2 * (proj + scan)


def count_params_flops(config, include_encoders: bool = False) -> CountReport:
    """Closed-form parameter and FLOP counts for the fusion block and its comparators.

    ``config`` needs ``d_model``, ``d_state`` and optionally ``raw_dim``,
    ``kernel_size``, ``delta_rank``, ``depth``.
    """
    D, N = config.d_model, config.d_state
    rank = getattr(config, "delta_rank", None)
    depth = getattr(config, "depth", 1)
    raw = getattr(config, "raw_dim", D)
    K = getattr(config, "kernel_size", 3)
    kw = dict(delta_rank=rank, depth=depth, raw_dim=raw, kernel_size=K, include_encoders=include_encoders)
    mamba_flops = fusion_flops_per_token(D, N, rank) * depth
    enc_flops = 2 * (raw * D + D * D + D * K) if include_encoders else 0
    rows = [
        {"model": "ssm-fusion", "params": fusion_block_params(D, N, **kw), "flops_per_token": mamba_flops + enc_flops},
        {
            "model": "ssm-fusion-separate-A",
            "params": fusion_block_params(D, N, separate_A=True, **kw),
            "flops_per_token": mamba_flops + enc_flops,
        },
        {"model": "mlp-fusion", "params": mlp_fusion_params(D), "flops_per_token": 2 * (2 * D * 4 * D + 4 * D * D)},
        {
            "model": "transformer-fusion-6L",
            "params": transformer_fusion_params(D, 6),
            "flops_per_token": 2 * transformer_fusion_params(D, 6),
        },
    ]
    return CountReport(rows)
