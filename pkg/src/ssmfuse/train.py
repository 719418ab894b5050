"""Optimisation loop: warmup + half-cosine schedule with per-group peaks,
decoupled-weight-decay Adam, metrics and binary checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, ContractError, TrainingDivergedError, ValidationError
from .fusion import FusionBlock
from .synth import SynthDataset, dataset_for
from .tensor import Tensor

logger = logging.getLogger(__name__)

GROUPS = ("default", "fusion")
METRIC_FIELDS = ("epoch", "split", "loss", "verb_acc", "noun_acc", "action_acc", "recall5", "lr_default",
                 "lr_fusion")
CKPT_MAGIC = b"SSMC"
CKPT_VERSION = 1
EVAL_BATCH = 128


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from ``base_lr`` to the group peak, then a half cosine to
    ``final_lr``. Steps are indexed 0 .. ``last_step`` inclusive."""

    base_lr: float
    peak_lr: float
    final_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int
    group_peaks: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.base_lr, self.peak_lr, self.final_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.steps_per_epoch < 1 or self.total_epochs < 1:
            raise ConfigError("need at least one epoch of one step")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must lie in [0, total_epochs)")

    @classmethod
    def from_config(cls, config: RunConfig, steps_per_epoch: int) -> Schedule:
        return cls(config.base_lr, config.peak_lr, config.final_lr, config.warmup_epochs, config.epochs,
                   steps_per_epoch, {"default": config.peak_lr, "fusion": config.fusion_peak_lr})

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def last_step(self) -> int:
        return self.total_epochs * self.steps_per_epoch - 1

    def peak(self, group: str) -> float:
        return self.group_peaks.get(group, self.peak_lr)


def lr_at(step: int, group: str, schedule: Schedule) -> float:
    if not 0 <= step <= schedule.last_step:
        raise ContractError(f"step {step} outside [0, {schedule.last_step}]")
    peak = schedule.peak(group)
    W = schedule.warmup_steps
    if step < W:
        return schedule.base_lr + (peak - schedule.base_lr) * step / W
    span = schedule.last_step - W
    t = 1.0 if span == 0 else (step - W) / span
    if t == 0.0:
        return peak
    if t == 1.0:
        return schedule.final_lr
    return schedule.final_lr + 0.5 * (peak - schedule.final_lr) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float | dict[str, float] = 0.0) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``lr`` and ``weight_decay`` may be per-parameter dicts.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step_lr = lr[name] if isinstance(lr, dict) else lr
        wd = weight_decay[name] if isinstance(weight_decay, dict) else weight_decay
        if wd:
            p -= step_lr * wd * p
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + eps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- metrics


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def top1_metrics(verb_logits, noun_logits, verbs, nouns) -> dict[str, float]:
    pv = _arr(verb_logits).argmax(axis=-1)
    pn = _arr(noun_logits).argmax(axis=-1)
    vok = pv == np.asarray(verbs)
    nok = pn == np.asarray(nouns)
    return {"verb_acc": float(vok.mean()), "noun_acc": float(nok.mean()), "action_acc": float((vok & nok).mean())}


def _log_softmax(x: np.ndarray) -> np.ndarray:
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def recall_at_5(verb_logits, noun_logits, verbs, nouns, k: int = 5) -> float:
    """Fraction of rows whose true (verb, noun) pair is among the ``k`` best pairs.

    Pair score is the sum of the two log-softmaxes; ties go to the smaller
    (verb, noun) index in row-major order.
    """
    lv = _log_softmax(_arr(verb_logits))
    ln = _log_softmax(_arr(noun_logits))
    n_rows, Vv = lv.shape
    Vn = ln.shape[1]
    if Vv * Vn < k:
        raise ConfigError(f"recall@{k} needs at least {k} verb-noun pairs, got {Vv * Vn}")
    joint = (lv[:, :, None] + ln[:, None, :]).reshape(n_rows, Vv * Vn)
    true = np.asarray(verbs) * Vn + np.asarray(nouns)
    true_score = joint[np.arange(n_rows), true]
    # pairs strictly better, or equal with a smaller flat index, rank ahead of the true pair
    idx = np.arange(Vv * Vn)
    ahead = (joint > true_score[:, None]) | ((joint == true_score[:, None]) & (idx[None, :] < true[:, None]))
    return float((ahead.sum(axis=1) < k).mean())


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    config_hash: str

    def to_bytes(self) -> bytes:
        arrays = {"step": np.array([self.step], dtype=np.float64)}
        arrays.update({f"param/{k}": a for k, a in self.params.items()})
        arrays.update({f"m/{k}": a for k, a in self.m.items()})
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        return binfmt.pack(CKPT_MAGIC, CKPT_VERSION, self.config_hash, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
        version, h, arrays = binfmt.unpack(blob, CKPT_MAGIC)
        if version != CKPT_VERSION:
            raise ValidationError(f"checkpoint version {version} not supported")
        if expected_hash is not None and h != expected_hash and not force:
            raise ValidationError("checkpoint was written for a different configuration (use force to override)")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
        for key, arr in arrays.items():
            if key == "step":
                continue
            kind, _, name = key.partition("/")
            if kind not in groups:
                raise ValidationError(f"unexpected checkpoint entry {key!r}")
            groups[kind][name] = arr
        return cls(groups["param"], groups["m"], groups["v"], int(arrays["step"][0]), h)

    def save(self, path: str | Path) -> None:
        binfmt.write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
        return cls.from_bytes(binfmt.read(path), expected_hash, force)

    @classmethod
    def capture(cls, block: FusionBlock, state: AdamState, config: RunConfig) -> Checkpoint:
        params = {k: p.data.copy() for k, p in block.parameters().items()}
        return cls(params, {k: a.copy() for k, a in state.m.items()}, {k: a.copy() for k, a in state.v.items()},
                   state.step, config.config_hash())

    def restore(self, block: FusionBlock) -> AdamState:
        params = block.parameters()
        if set(params) != set(self.params):
            missing = sorted(set(params) ^ set(self.params))
            raise ValidationError(f"checkpoint parameters do not match the model: {missing[:3]}")
        for k, p in params.items():
            if p.data.shape != self.params[k].shape:
                raise ValidationError(f"shape mismatch for {k}: {p.data.shape} vs {self.params[k].shape}")
            p.data[...] = self.params[k]
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                         self.step)


# ---------------------------------------------------------------- loop


@dataclass
class Batch:
    x_V: Tensor
    x_T: Tensor
    verbs: np.ndarray
    nouns: np.ndarray
    ids: np.ndarray


def make_batch(ds: SynthDataset, idx: np.ndarray, config: RunConfig) -> Batch:
    return Batch(Tensor(ds.x_V[idx]), Tensor(ds.text_features(idx, config)), ds.verbs[idx], ds.nouns[idx],
                 ds.ids[idx])


def evaluate(block: FusionBlock, ds: SynthDataset, split: str = "val", batch_size: int = EVAL_BATCH) -> dict:
    """Loss and metrics over a split, computed without recording a graph."""
    idx = ds.split(split)
    vl, nl = [], []
    with T.no_grad():
        for s in range(0, len(idx), batch_size):
            b = make_batch(ds, idx[s:s + batch_size], block.config)
            scores = block(b.x_V, b.x_T)
            vl.append(scores.verb_logits.data)
            nl.append(scores.noun_logits.data)
    return _summarise(np.concatenate(vl), np.concatenate(nl), ds.verbs[idx], ds.nouns[idx])


def _ce(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-_log_softmax(logits)[np.arange(len(labels)), labels].mean())


def _summarise(vl, nl, verbs, nouns) -> dict:
    out = {"loss": _ce(vl, verbs) + _ce(nl, nouns)}
    out.update(top1_metrics(vl, nl, verbs, nouns))
    out["recall5"] = recall_at_5(vl, nl, verbs, nouns)
    return out


@dataclass
class TrainResult:
    history: list[dict]
    lr_trace: list[tuple[int, float, float]]
    a_log: list[tuple[int, float, float]]      # (step, grad norm of A, update norm of A)
    block: FusionBlock
    state: AdamState
    seconds: float

    def final(self, split: str = "val") -> dict:
        return [r for r in self.history if r["split"] == split][-1]


def _a_names(params: dict) -> list[str]:
    return [k for k in params if k.endswith("A_log")]


def train(config: RunConfig, dataset: SynthDataset | None = None, out_dir: str | Path | None = None,
          block: FusionBlock | None = None, state: AdamState | None = None,
          until_epoch: int | None = None) -> TrainResult:
    """Train ``config`` on ``dataset`` (generated if omitted).

    Passing ``block`` and ``state`` (e.g. from :meth:`Checkpoint.restore`)
    resumes at ``state.step``. ``until_epoch`` stops early without changing
    the schedule. With ``out_dir`` the metrics, lr trace, A-gradient log and
    checkpoint are written there.
    """
    t0 = time.perf_counter()
    ds = dataset if dataset is not None else dataset_for(config)
    block = block or FusionBlock.build(config)
    state = state or AdamState()
    train_idx = ds.split("train")
    spe = math.ceil(len(train_idx) / config.batch_size)
    sched = Schedule.from_config(config, spe)
    params = block.parameters()
    trainable = block.trainable()
    groups = {k: ("fusion" if block.is_fusion_param(k) else "default") for k in trainable}
    decay = {k: (config.weight_decay if block.decays(k) else 0.0) for k in trainable}
    a_names = _a_names(params)

    history: list[dict] = []
    lr_trace: list[tuple[int, float, float]] = []
    a_log: list[tuple[int, float, float]] = []
    first = state.step
    init_val = evaluate(block, ds, "val")
    init_train = evaluate(block, ds, "train")
    lr0 = (lr_at(first, "default", sched), lr_at(first, "fusion", sched)) if first <= sched.last_step else (0, 0)
    for split, m in (("train", init_train), ("val", init_val)):
        history.append(_row(0, split, m, *lr0))

    start_epoch = first // spe
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    for epoch in range(start_epoch, stop):
        order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, 0xBA7C])).permutation(train_idx)
        losses, vls, nls, ys_v, ys_n = [], [], [], [], []
        for bi in range(spe):
            step = epoch * spe + bi
            if step < first:
                continue
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            batch = make_batch(ds, idx, config)
            loss, scores = block.loss(batch.x_V, batch.x_T, batch.verbs, batch.nouns)
            lval = float(loss.data)
            if not math.isfinite(lval) or not scores.check_finite():
                _dump_nan(out_dir, config, epoch, bi, batch, lval)
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch {bi} (sample ids {batch.ids[:8].tolist()}...)")
            T.backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            a_grad = global_norm(grads[k] for k in a_names) if a_names else 0.0
            clip_by_global_norm({k: grads[k] for k in trainable}, config.grad_clip)
            lr_d, lr_f = lr_at(step, "default", sched), lr_at(step, "fusion", sched)
            before = {k: params[k].data.copy() for k in a_names}
            adam_step({k: p.data for k, p in trainable.items()}, {k: grads[k] for k in trainable}, state,
                      {k: (lr_f if g == "fusion" else lr_d) for k, g in groups.items()},
                      config.betas, config.eps, decay)
            a_upd = global_norm(params[k].data - before[k] for k in a_names) if a_names else 0.0
            for p in params.values():
                p.grad = None
            lr_trace.append((step, lr_d, lr_f))
            a_log.append((step, a_grad, a_upd))
            losses.append(lval * len(idx))
            vls.append(scores.verb_logits.data)
            nls.append(scores.noun_logits.data)
            ys_v.append(batch.verbs)
            ys_n.append(batch.nouns)
        if not losses:
            continue
        tr = _summarise(np.concatenate(vls), np.concatenate(nls), np.concatenate(ys_v), np.concatenate(ys_n))
        tr["loss"] = sum(losses) / sum(len(y) for y in ys_v)
        va = evaluate(block, ds, "val")
        history.append(_row(epoch + 1, "train", tr, *lr_trace[-1][1:]))
        history.append(_row(epoch + 1, "val", va, *lr_trace[-1][1:]))
        logger.info("epoch %d  train loss %.4f  val verb %.3f noun %.3f action %.3f", epoch + 1, tr["loss"],
                    va["verb_acc"], va["noun_acc"], va["action_acc"])

    result = TrainResult(history, lr_trace, a_log, block, state, time.perf_counter() - t0)
    if out_dir is not None:
        write_outputs(result, config, out_dir)
    return result


def _row(epoch, split, m, lr_d, lr_f) -> dict:
    return {"epoch": epoch, "split": split, "loss": m["loss"], "verb_acc": m["verb_acc"], "noun_acc": m["noun_acc"],
            "action_acc": m["action_acc"], "recall5": m["recall5"], "lr_default": lr_d, "lr_fusion": lr_f}


def _dump_nan(out_dir, config: RunConfig, epoch: int, batch_index: int, batch: Batch, loss: float) -> None:
    info = {"epoch": epoch + 1, "batch_index": batch_index, "seed": config.seed, "sample_ids": batch.ids.tolist(),
            "loss": repr(loss), "config_hash": config.config_hash()}
    logger.error("non-finite loss: %s", info)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nan_dump.json").write_text(json.dumps(info, indent=2), encoding="utf-8")


def write_csv(path: str | Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_metrics(path: str | Path, history: list[dict]) -> None:
    write_csv(path, METRIC_FIELDS, ([r[f] for f in METRIC_FIELDS] for r in history))


def write_outputs(result: TrainResult, config: RunConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.csv",
        "lr_trace": out / "lr_trace.csv",
        "a_grad": out / "a_grad_norms.csv",
        "checkpoint": out / "checkpoint.ssmc",
    }
    write_metrics(paths["metrics"], result.history)
    write_csv(paths["lr_trace"], ("step", "lr_default", "lr_fusion"), result.lr_trace)
    write_csv(paths["a_grad"], ("step", "a_grad_norm", "a_update_norm"), result.a_log)
    Checkpoint.capture(result.block, result.state, config).save(paths["checkpoint"])
    from .plotting import plot_training

    paths.update(plot_training(result.history, result.lr_trace, out))
    return paths
