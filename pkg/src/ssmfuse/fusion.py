"""Two-branch selective SSM fusion with a shared state-transition matrix.

Each modality is encoded as ``Conv1d(MLP(x))``, projected to its own
input-dependent ``B``, ``C`` and step size, discretized against the one
shared ``A`` and scanned.  The two output sequences are mean-pooled and
summed, then fed to linear verb/noun heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, ContractError, DimensionError
from .model import ActionScores, Linear, MlpFusionParams, classify, mlp_fusion_baseline
from .ssm import init_A_log, scan_chunked, selective_scan, zoh_discretize
from .tensor import Tensor

# Mamba-block parameters get the higher peak learning rate.
FUSION_PARAM_KEYS = ("A_log", "W_B", "W_C", "W_delta", "b_delta", "delta_base")
NO_DECAY_KEYS = ("A_log", "delta_base")


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


@dataclass
class Encoder:
    """MLP (linear, activation, linear) followed by a depthwise Conv1d."""

    mlp_in: Linear
    mlp_out: Linear
    conv_kernel: Tensor
    activation: str = "gelu"

    @classmethod
    def init(cls, rng, d_in: int, d_model: int, kernel_size: int) -> Encoder:
        conv = rng.uniform(-1.0, 1.0, size=(d_model, kernel_size)) / np.sqrt(kernel_size)
        return cls(Linear.init(rng, d_in, d_model), Linear.init(rng, d_model, d_model), Tensor(conv, requires_grad=True))

    def named_parameters(self, prefix: str):
        yield from self.mlp_in.named_parameters(f"{prefix}.mlp_in")
        yield from self.mlp_out.named_parameters(f"{prefix}.mlp_out")
        yield f"{prefix}.conv_kernel", self.conv_kernel


@dataclass
class SsmBranchParams:
    """One modality's encoder and selective projections.  ``A_log`` is a
    reference to the transition parameter, shared unless ablated."""

    encoder: Encoder
    W_B: Tensor
    W_C: Tensor
    W_delta: Tensor | tuple[Tensor, Tensor]
    b_delta: Tensor
    delta_base: Tensor
    A_log: Tensor

    @classmethod
    def init(cls, rng, d_in, d_model, d_state, kernel_size, A_log, delta_rank=None,
             dt_min=1e-3, dt_max=1e-1) -> SsmBranchParams:
        D, N = d_model, d_state
        encoder = Encoder.init(rng, d_in, D, kernel_size)
        if delta_rank is None:
            W_delta = Tensor(rng.normal(0.0, 0.1 / np.sqrt(D), size=(D, D)), requires_grad=True)
        else:
            W_delta = (Tensor(rng.normal(0.0, 1 / np.sqrt(D), size=(D, delta_rank)), requires_grad=True),
                       Tensor(rng.normal(0.0, 0.1 / np.sqrt(delta_rank), size=(delta_rank, D)), requires_grad=True))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=D))
        return cls(
            encoder=encoder,
            W_B=Tensor(rng.normal(0.0, 1 / np.sqrt(D), size=(D, N)), requires_grad=True),
            W_C=Tensor(rng.normal(0.0, 1 / np.sqrt(D), size=(D, N)), requires_grad=True),
            W_delta=W_delta,
            b_delta=Tensor(np.zeros(D), requires_grad=True),
            delta_base=Tensor(inverse_softplus(dt), requires_grad=True),
            A_log=A_log,
        )

    @property
    def d_model(self) -> int:
        return self.W_B.shape[0]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named_parameters(prefix)
        yield f"{prefix}.W_B", self.W_B
        yield f"{prefix}.W_C", self.W_C
        if isinstance(self.W_delta, tuple):
            yield f"{prefix}.W_delta_down", self.W_delta[0]
            yield f"{prefix}.W_delta_up", self.W_delta[1]
        else:
            yield f"{prefix}.W_delta", self.W_delta
        yield f"{prefix}.b_delta", self.b_delta
        yield f"{prefix}.delta_base", self.delta_base


def transition(A_log: Tensor) -> Tensor:
    """A = -exp(A_log): strictly negative for any A_log."""
    return T.neg(T.exp(A_log))


def encode_modality(x_raw: Tensor, branch: SsmBranchParams | Encoder) -> Tensor:
    """Conv1d(MLP(x)) with 'same' padding; [B, S, Draw] -> [B, S, D]."""
    if isinstance(branch, SsmBranchParams):
        branch = branch.encoder
    if x_raw.ndim != 3 or x_raw.shape[1] < 1:
        raise DimensionError(f"encode_modality expects [B, S>=1, Draw], got {x_raw.shape}")
    if x_raw.shape[-1] != branch.mlp_in.W.shape[0]:
        raise DimensionError(f"input width {x_raw.shape[-1]} does not match MLP input {branch.mlp_in.W.shape}")
    h = branch.mlp_in(x_raw)
    if branch.activation == "gelu":
        h = T.gelu(h)
    elif branch.activation != "identity":
        raise ConfigError(f"unknown activation {branch.activation!r}")
    h = branch.mlp_out(h)
    return T.conv1d_depthwise(h, branch.conv_kernel)


def project_selective(x: Tensor, branch: SsmBranchParams):
    """B = x W_B, C = x W_C, delta = softplus(delta_base + x W_delta + b_delta)."""
    B_mat = T.apply_linear(x, branch.W_B)
    C_mat = T.apply_linear(x, branch.W_C)
    if isinstance(branch.W_delta, tuple):
        d = T.apply_linear(T.apply_linear(x, branch.W_delta[0]), branch.W_delta[1], branch.b_delta)
    else:
        d = T.apply_linear(x, branch.W_delta, branch.b_delta)
    delta = T.softplus(T.add(d, branch.delta_base))
    return B_mat, C_mat, delta


def run_branch(x: Tensor, branch: SsmBranchParams, A: Tensor, *, method="zoh", chunk=0) -> Tensor:
    B_mat, C_mat, delta = project_selective(x, branch)
    if not chunk:
        return selective_scan(A, B_mat, C_mat, delta, x, method)
    pair = zoh_discretize(A, B_mat, delta, method)
    return scan_chunked(pair, C_mat, x, chunk)


def pool_and_sum(*ys: Tensor) -> Tensor:
    """Mean over each modality's sequence axis, then add the pooled vectors."""
    pooled = [T.mean(y, axis=1) for y in ys]
    out = pooled[0]
    for p in pooled[1:]:
        out = T.add(out, p)
    return out


@dataclass
class FusionLayer:
    A_logs: dict[str, Tensor]
    branches: dict[str, SsmBranchParams]

    def named_parameters(self, prefix: str):
        seen = set()
        for m, A_log in self.A_logs.items():
            if id(A_log) in seen:
                continue
            seen.add(id(A_log))
            name = "A_log" if len(set(map(id, self.A_logs.values()))) == 1 else f"{m}.A_log"
            yield f"{prefix}{name}", A_log
        for m, br in self.branches.items():
            yield from br.named_parameters(f"{prefix}{m}")


@dataclass
class FusionBlock:
    """Full classifier: per-modality encoders and SSMs, pooled sum, two heads.

    ``ablation`` selects the comparison variants: ``separate-A`` gives every
    branch its own transition, ``unimodal-V``/``unimodal-T`` drop a branch,
    ``mlp-fusion`` replaces the SSMs with the concatenation MLP.
    """

    config: RunConfig
    layers: list[FusionLayer]
    head_verb: Linear
    head_noun: Linear
    mlp_fusion: MlpFusionParams | None = None
    encoders: dict[str, Encoder] | None = None
    frozen: set = field(default_factory=set)

    @classmethod
    def build(cls, config: RunConfig, seed: int | None = None) -> FusionBlock:
        rng = np.random.default_rng(config.seed if seed is None else seed)
        D, N = config.d_model, config.d_state
        layers = []
        if config.ablation == "mlp-fusion":
            encoders = {m: Encoder.init(rng, config.raw_dim, D, config.kernel_size) for m in ("V", "T")}
            return cls(config, [], Linear.init(rng, D, config.n_verbs), Linear.init(rng, D, config.n_nouns),
                       MlpFusionParams.init(rng, D), encoders)
        for depth in range(config.depth):
            d_in = config.raw_dim if depth == 0 else D
            if config.separate_A:
                A_logs = {m: Tensor(init_A_log(D, N), requires_grad=True) for m in config.modalities}
            else:
                shared = Tensor(init_A_log(D, N), requires_grad=True)
                A_logs = {m: shared for m in config.modalities}
            branches = {
                m: SsmBranchParams.init(rng, d_in, D, N, config.kernel_size, A_logs[m], config.delta_rank)
                for m in config.modalities
            }
            layers.append(FusionLayer(A_logs, branches))
        block = cls(config, layers, Linear.init(rng, D, config.n_verbs), Linear.init(rng, D, config.n_nouns))
        if config.freeze_A:
            block.frozen = {name for name in block.parameters() if name.endswith("A_log")}
        return block

    @property
    def ablation_separate_A(self) -> bool:
        return self.config.separate_A

    @property
    def shared_A(self) -> Tensor:
        A_logs = self.layers[0].A_logs
        first = next(iter(A_logs.values()))
        if any(a is not first for a in A_logs.values()):
            raise ContractError("block is in separate-A ablation mode; there is no shared A")
        return first

    @property
    def modalities(self) -> tuple[str, ...]:
        if self.encoders is not None:
            return tuple(self.encoders)
        return tuple(self.layers[0].branches)

    def branch(self, m: str, layer: int = 0) -> SsmBranchParams:
        return self.layers[layer].branches[m]

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.named_parameters("" if i == 0 else f"layer{i}."))
        if self.mlp_fusion is not None:
            for m, enc in self.encoders.items():
                params.update(enc.named_parameters(m))
            params.update(self.mlp_fusion.named_parameters("mlp_fusion"))
        params.update(self.head_verb.named_parameters("head_verb"))
        params.update(self.head_noun.named_parameters("head_noun"))
        return params

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k not in self.frozen}

    @staticmethod
    def is_fusion_param(name: str) -> bool:
        return name.split(".")[-1] in FUSION_PARAM_KEYS or name.split(".")[-1].startswith("W_delta")

    @staticmethod
    def decays(name: str) -> bool:
        last = name.split(".")[-1]
        return not (last in NO_DECAY_KEYS or last == "b" or last == "b_delta")

    # -------------------------------------------------------------- forward

    def encode(self, inputs: dict[str, Tensor], layer: int = 0) -> dict[str, Tensor]:
        return {m: encode_modality(inputs[m], self.layers[layer].branches[m]) for m in self.modalities}

    def sequences(self, inputs: dict[str, Tensor], detach_A: tuple[str, ...] = ()) -> dict[str, Tensor]:
        """Run every layer and return the per-modality output sequences.

        Branches listed in ``detach_A`` see a constant copy of ``A`` so that
        no gradient reaches the transition parameter through them.
        """
        xs = inputs
        for i, layer in enumerate(self.layers):
            enc = self.encode(xs, i)
            ys = {}
            for m in self.modalities:
                A_log = layer.A_logs[m]
                if m in detach_A:
                    A_log = Tensor(A_log.data)
                ys[m] = run_branch(enc[m], layer.branches[m], transition(A_log),
                                   method=self.config.discretization, chunk=self.config.chunk)
            xs = ys
        return xs

    def fused(self, x_V: Tensor | None, x_T: Tensor | None, detach_A: tuple[str, ...] = ()) -> Tensor:
        inputs = {"V": x_V, "T": x_T}
        if self.mlp_fusion is not None:
            enc = {m: encode_modality(inputs[m], self.encoders[m]) for m in ("V", "T")}
            return mlp_fusion_baseline(enc["V"], enc["T"], self.mlp_fusion)
        ys = self.sequences(inputs, detach_A)
        return pool_and_sum(*(ys[m] for m in self.modalities))

    def forward(self, x_V: Tensor | None, x_T: Tensor | None, detach_A: tuple[str, ...] = ()) -> ActionScores:
        return classify(self.fused(x_V, x_T, detach_A), self.head_verb, self.head_noun)

    __call__ = forward

    def loss(self, x_V, x_T, verbs, nouns, detach_A: tuple[str, ...] = ()) -> tuple[T.Tensor, ActionScores]:
        scores = self.forward(x_V, x_T, detach_A)
        loss = T.add(T.cross_entropy(scores.verb_logits, verbs), T.cross_entropy(scores.noun_logits, nouns))
        return loss, scores


def fusion_forward(x_V: Tensor, x_T: Tensor, block: FusionBlock, layer: int = 0) -> tuple[Tensor, Tensor]:
    """SSM stage of one layer on already-encoded inputs: (B,F,D),(B,L,D) -> same shapes."""
    lay = block.layers[layer]
    bV, bT = lay.branches["V"], lay.branches["T"]
    if bV.d_model != bT.d_model or bV.W_B.shape[1] != bT.W_B.shape[1]:
        raise ConfigError("branches disagree on D or N")
    if x_V.shape[-1] != bV.d_model or x_T.shape[-1] != bT.d_model:
        raise DimensionError(f"inputs {x_V.shape}, {x_T.shape} do not have D={bV.d_model}")
    cfg = block.config
    y_V = run_branch(x_V, bV, transition(lay.A_logs["V"]), method=cfg.discretization, chunk=cfg.chunk)
    y_T = run_branch(x_T, bT, transition(lay.A_logs["T"]), method=cfg.discretization, chunk=cfg.chunk)
    return y_V, y_T


@dataclass
class DecompositionReport:
    combined: np.ndarray
    from_V: np.ndarray
    from_T: np.ndarray
    max_deviation: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance


def _grad_wrt(block: FusionBlock, param: Tensor, batch, detach_A=()) -> np.ndarray:
    x_V, x_T, verbs, nouns = batch
    param.grad = None
    loss, _ = block.loss(x_V, x_T, verbs, nouns, detach_A)
    T.backward(loss)
    g = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    for p in block.parameters().values():
        p.grad = None
    return g


def shared_grad_decomposition_check(block: FusionBlock, batch, tol: float = 1e-10) -> DecompositionReport:
    """Check that dL/dA with both branches live equals the sum of the
    gradients obtained with each branch's path to ``A`` blocked in turn."""
    if block.ablation_separate_A:
        raise ContractError("decomposition check needs a shared A (separate-A ablation is active)")
    A_log = block.shared_A
    combined = _grad_wrt(block, A_log, batch)
    only_V = _grad_wrt(block, A_log, batch, detach_A=("T",))
    only_T = _grad_wrt(block, A_log, batch, detach_A=("V",))
    dev = float(np.max(np.abs(combined - (only_V + only_T))))
    report = DecompositionReport(combined, only_V, only_T, dev, tol)
    if not report.ok:
        raise AssertionError(f"shared-A gradient decomposition failed: max deviation {dev:.3e} > {tol:.1e}")
    return report
