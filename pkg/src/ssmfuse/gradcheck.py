"""Central finite-difference checks for every differentiable primitive and for
the full fusion classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ssm
from . import tensor as T
from .config import RunConfig
from .fusion import Encoder, FusionBlock, encode_modality, transition
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Normwise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    out = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    return out


def check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = DEFAULT_STEP) -> dict[str, float]:
    """Relative error of the analytic gradient for each named parameter."""
    names = list(params)
    ana = analytic_grads(loss_fn, [params[n] for n in names])

    def value() -> float:
        with T.no_grad():
            return float(loss_fn().data)

    return {n: rel_error(a, numeric_grad(value, params[n].data, h)) for n, a in zip(names, ana)}


@dataclass
class GradcheckReport:
    rows: list[dict]
    tol: float

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows)

    @property
    def max_error(self) -> float:
        return max(r["rel_err"] for r in self.rows)

    def to_text(self) -> str:
        width = max(len(r["check"]) for r in self.rows)
        lines = [f"{'check':<{width}}  {'max_rel_err':>12}  status"]
        for r in self.rows:
            lines.append(f"{r['check']:<{width}}  {r['rel_err']:>12.3e}  {'ok' if r['ok'] else 'FAIL'}")
        return "\n".join(lines)


def _weighted(y: Tensor, rng) -> Tensor:
    """sum(y * w) with fixed random w, so every output element matters."""
    return T.sum_all(T.mul(y, Tensor(rng.normal(size=y.shape))))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    def leaf(*shape, low=None, high=None):
        data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
        return Tensor(data, requires_grad=True)

    cases = {}
    a, b = leaf(3, 4), leaf(3, 4)
    bias = leaf(4)
    cases["add"] = (lambda w=rng.normal(size=(3, 4)): T.sum_all(T.mul(T.add(a, b), Tensor(w))), {"a": a, "b": b})
    cases["add_bias"] = (lambda w=rng.normal(size=(3, 4)): T.sum_all(T.mul(T.add(a, bias), Tensor(w))),
                         {"a": a, "bias": bias})
    cases["mul"] = (lambda: T.sum_all(T.mul(a, b)), {"a": a, "b": b})
    cases["neg"] = (lambda w=rng.normal(size=(3, 4)): T.sum_all(T.mul(T.neg(a), Tensor(w))), {"a": a})
    cases["exp"] = (lambda w=rng.normal(size=(3, 4)): T.sum_all(T.mul(T.exp(a), Tensor(w))), {"a": a})
    sp = leaf(5, 3, low=-30, high=30)
    cases["softplus"] = (lambda w=rng.normal(size=(5, 3)): T.sum_all(T.mul(T.softplus(sp), Tensor(w))), {"x": sp})
    cases["gelu"] = (lambda w=rng.normal(size=(3, 4)): T.sum_all(T.mul(T.gelu(a), Tensor(w))), {"a": a})
    m3 = leaf(2, 3, 4)
    for ax in (0, 1, 2):
        cases[f"mean_axis{ax}"] = (lambda ax=ax, w=rng.normal(size=np.delete((2, 3, 4), ax)):
                                   T.sum_all(T.mul(T.mean(m3, ax), Tensor(w))), {"x": m3})
    c2 = leaf(3, 2)
    cases["concat"] = (lambda w=rng.normal(size=(3, 6)): T.sum_all(T.mul(T.concat([a, c2]), Tensor(w))),
                       {"a": a, "c": c2})
    cases["log_softmax"] = (lambda w=rng.normal(size=(3, 4)): T.sum_all(T.mul(T.log_softmax(a), Tensor(w))),
                            {"a": a})
    tgt = rng.integers(0, 4, size=3)
    cases["cross_entropy"] = (lambda: T.cross_entropy(a, tgt), {"logits": a})
    x, W, bb = leaf(2, 5, 3), leaf(3, 4), leaf(4)
    cases["apply_linear"] = (lambda w=rng.normal(size=(2, 5, 4)): T.sum_all(T.mul(T.apply_linear(x, W, bb),
                                                                                  Tensor(w))),
                             {"x": x, "W": W, "b": bb})
    xc, kc = leaf(2, 7, 3), leaf(3, 5)
    cases["conv1d_depthwise"] = (lambda w=rng.normal(size=(2, 7, 3)): T.sum_all(T.mul(T.conv1d_depthwise(xc, kc),
                                                                                       Tensor(w))),
                                 {"x": xc, "kernel": kc})

    Bz, L, D, N = 2, 9, 3, 4
    A_log = Tensor(rng.normal(scale=0.5, size=(D, N)), requires_grad=True)
    Bm, Cm, xs = leaf(Bz, L, N), leaf(Bz, L, N), leaf(Bz, L, D)
    dl = leaf(Bz, L, D, low=0.05, high=1.5)
    ssm_params = {"A_log": A_log, "B": Bm, "C": Cm, "delta": dl, "x": xs}
    wy = rng.normal(size=(Bz, L, D))
    for method in ("zoh", "euler"):
        cases[f"discretize_{method}"] = (
            lambda method=method, w=rng.normal(size=(Bz, L, D, N)), w2=rng.normal(size=(Bz, L, D, N)):
            T.add(T.sum_all(T.mul(ssm.zoh_discretize(transition(A_log), Bm, dl, method).A_bar, Tensor(w))),
                  T.sum_all(T.mul(ssm.zoh_discretize(transition(A_log), Bm, dl, method).B_bar, Tensor(w2)))),
            {"A_log": A_log, "B": Bm, "delta": dl})
        cases[f"scan_sequential_{method}"] = (
            lambda method=method: T.sum_all(T.mul(ssm.scan_sequential(
                ssm.zoh_discretize(transition(A_log), Bm, dl, method), Cm, xs), Tensor(wy))), ssm_params)
        cases[f"selective_scan_{method}"] = (
            lambda method=method: T.sum_all(T.mul(ssm.selective_scan(transition(A_log), Bm, Cm, dl, xs, method),
                                                  Tensor(wy))), ssm_params)
    cases["scan_chunked_4"] = (
        lambda: T.sum_all(T.mul(ssm.scan_chunked(ssm.zoh_discretize(transition(A_log), Bm, dl), Cm, xs, 4),
                                Tensor(wy))), ssm_params)
    # tiny steps exercise the series branches of the discretization
    dsmall = leaf(Bz, L, D, low=2e-5, high=5e-4)
    cases["selective_scan_small_delta"] = (
        lambda: T.sum_all(T.mul(ssm.selective_scan(transition(A_log), Bm, Cm, dsmall, xs), Tensor(wy))),
        {"A_log": A_log, "delta": dsmall, "B": Bm})
    enc = Encoder.init(rng, 5, 4, 3)
    xe = leaf(2, 6, 5)
    cases["encoder"] = (lambda w=rng.normal(size=(2, 6, 4)): T.sum_all(T.mul(encode_modality(xe, enc), Tensor(w))),
                        {"x": xe, **dict(enc.named_parameters("enc"))})
    return cases


def block_case(seed: int, **overrides) -> tuple[Callable[[], Tensor], dict[str, Tensor]]:
    """Classification loss of a small fusion classifier (B=2, F=8, L=6, D=8, N=4)."""
    cfg = RunConfig(d_model=8, d_state=4, raw_dim=5, frames=8, text_len=6, n_verbs=3, n_nouns=4, k_v=2,
                    seed=seed, **overrides)
    block = FusionBlock.build(cfg)
    rng = np.random.default_rng([seed, 17])
    # move the step sizes away from their tiny initial values so A matters
    for name, p in block.parameters().items():
        if name.endswith("delta_base"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
        # a layer's output is cubic in its input (x * B * C), so stacked
        # layers shrink the signal below finite-difference resolution
        if cfg.depth > 1 and name.split(".")[-1] in ("W_B", "W_C"):
            p.data *= 4.0
    x_V = Tensor(rng.normal(size=(2, 8, 5)))
    x_T = Tensor(rng.normal(size=(2, 6, 5)))
    verbs, nouns = rng.integers(0, 3, size=2), rng.integers(0, 4, size=2)
    return (lambda: block.loss(x_V, x_T, verbs, nouns)[0]), block.parameters()


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL, h: float = DEFAULT_STEP, full_block: bool = True,
              variants: bool = True) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    rows = []
    for name, (fn, params) in primitive_cases(rng).items():
        errs = check(fn, params, h)
        worst = max(errs.values())
        rows.append({"check": name, "rel_err": worst, "ok": worst <= tol})
    if full_block:
        setups = {"block": {}}
        if variants:
            setups.update({"block[separate-A]": {"ablation": "separate-A"},
                           "block[euler]": {"discretization": "euler"},
                           "block[chunk=3]": {"chunk": 3},
                           "block[depth=2]": {"depth": 2},
                           "block[mlp-fusion]": {"ablation": "mlp-fusion"}})
        for label, kw in setups.items():
            fn, params = block_case(seed, **kw)
            for pname, err in check(fn, params, h).items():
                rows.append({"check": f"{label}:{pname}", "rel_err": err, "ok": err <= tol})
    report = GradcheckReport(rows, tol)
    logger.info("gradcheck: %d checks, max rel err %.3e", len(rows), report.max_error)
    return report
