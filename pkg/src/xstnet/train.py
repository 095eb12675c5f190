"""Staged multi-task training: Adam with warmup, recipes, checkpoints.

A recipe is an ordered list of stages; every stage samples a task uniformly
(or by explicit weights) each step, pulls the next batch from that task's
seeded stream, and applies one Adam update.  Stages that are not last act as
pretraining: parameters carry forward, but the optimizer and learning-rate
schedule restart per stage.  Checkpoints use a small binary format; the
final model is the mean of the trailing checkpoint window, with the best
dev checkpoint kept alongside.
"""

from __future__ import annotations

import io
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import SynthCorpus, Task, TaskDataset, Vocabulary, batch_stream, build_batch, task_datasets
from .infer import DecodeRequest, translate_examples
from .metrics import corpus_bleu, wer
from .model import ModelConfig, XstNetModel, config_to_dict

CHECKPOINT_MAGIC = b"XSTCKPT1"
CHECKPOINT_VERSION = 1
OPTIM_PREFIX = "optim."


class DivergenceError(RuntimeError):
    """Training loss stopped being finite."""


# ---------------------------------------------------------------------------
# Stages and recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    """One training phase: a task set, its sampling weights, a step budget."""

    name: str
    tasks: tuple[Task, ...]
    n_steps: int
    weights: tuple[float, ...] | None = None  # None: uniform

    def __post_init__(self):
        if not self.tasks:
            raise ValueError(f"stage {self.name}: task set is empty")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"stage {self.name}: duplicate tasks")
        if self.n_steps < 0:
            raise ValueError(f"stage {self.name}: n_steps must be non-negative")
        if self.weights is not None:
            if len(self.weights) != len(self.tasks):
                raise ValueError(f"stage {self.name}: {len(self.weights)} weights for {len(self.tasks)} tasks")
            if min(self.weights) <= 0:
                raise ValueError(f"stage {self.name}: weights must be positive")


@dataclass(frozen=True)
class TrainingRecipe:
    name: str
    stages: tuple[Stage, ...]


RECIPE_NAMES = ("exp1", "exp2", "exp3", "exp4", "exp5", "exp6", "xstnet-base", "w-transf")

_D = (Task.ST, Task.ASR, Task.MT)


def make_recipe(name: str, pretrain_steps: int, finetune_steps: int) -> TrainingRecipe:
    """Named stage layouts; every pretraining stage gets pretrain_steps.

    exp1  mt-ext                 -> st+asr+mt+mt-ext
    exp2  mt-ext                 -> st+asr+mt
    exp3  (none)                 -> st+asr+mt+mt-ext
    exp4  mt-ext, asr+mt+mt-ext  -> st
    exp5  mt-ext, asr+mt         -> st
    exp6  mt+mt-ext, asr         -> st
    xstnet-base  (none)          -> st+asr+mt
    w-transf     (none)          -> st
    """
    pre = pretrain_steps
    fin = finetune_steps
    layouts: dict[str, tuple[Stage, ...]] = {
        "exp1": (
            Stage("pretrain-mt", (Task.MT_EXT,), pre),
            Stage("finetune", (*_D, Task.MT_EXT), fin),
        ),
        "exp2": (
            Stage("pretrain-mt", (Task.MT_EXT,), pre),
            Stage("finetune", _D, fin),
        ),
        "exp3": (Stage("finetune", (*_D, Task.MT_EXT), fin),),
        "exp4": (
            Stage("pretrain-mt", (Task.MT_EXT,), pre),
            Stage("pretrain-multi", (Task.ASR, Task.MT, Task.MT_EXT), pre),
            Stage("finetune", (Task.ST,), fin),
        ),
        "exp5": (
            Stage("pretrain-mt", (Task.MT_EXT,), pre),
            Stage("pretrain-multi", (Task.ASR, Task.MT), pre),
            Stage("finetune", (Task.ST,), fin),
        ),
        "exp6": (
            Stage("pretrain-mt", (Task.MT, Task.MT_EXT), pre),
            Stage("pretrain-asr", (Task.ASR,), pre),
            Stage("finetune", (Task.ST,), fin),
        ),
        "xstnet-base": (Stage("finetune", _D, fin),),
        "w-transf": (Stage("finetune", (Task.ST,), fin),),
    }
    if name not in layouts:
        raise ValueError(f"unknown recipe {name!r}; choose from {RECIPE_NAMES}")
    return TrainingRecipe(name, layouts[name])


def sample_task(rng: np.random.Generator, tasks: Sequence[Task], weights: Sequence[float] | None = None) -> Task:
    """One categorical draw over the stage's task set (uniform by default)."""
    if not tasks:
        raise ValueError("sample_task: empty task set")
    if weights is None:
        return tasks[int(rng.integers(len(tasks)))]
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(tasks) or np.any(w <= 0):
        raise ValueError("sample_task: weights must be positive, one per task")
    return tasks[int(rng.choice(len(tasks), p=w / w.sum()))]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 200
    batch_size: int = 32
    label_smoothing: float = 0.1
    eval_interval: int = 200
    patience: int = 10  # evals without dev improvement before a stage stops
    keep_checkpoints: int = 10  # trailing window size for averaging
    dev_limit: int | None = None  # cap dev examples per eval (None: all)

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be at least 1")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.keep_checkpoints < 1:
            raise ValueError("keep_checkpoints must be at least 1")


@dataclass
class AdamState:
    """First/second moment buffers keyed like the model parameters."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(model: XstNetModel) -> AdamState:
    state = AdamState()
    for name, p in model.named_parameters():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def lr_at(step: int, base_lr: float, warmup: int) -> float:
    """Inverse-sqrt schedule: linear to base_lr at `warmup`, then decay."""
    if step < 1:
        raise ValueError("schedule is defined for steps >= 1")
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


def adam_step(model: XstNetModel, opt: AdamState, base_lr: float, warmup: int) -> float:
    """One bias-corrected Adam update; gradients are consumed (zeroed).

    Parameters the backward pass never touched are skipped entirely, so a
    text-only stage leaves acoustic weights bit-identical.
    """
    opt.step += 1
    lr = lr_at(opt.step, base_lr, warmup)
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for name, p in model.named_parameters():
        if not p.has_grad:
            continue
        g = p.grad
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.zero_grad()
    return lr


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------


def _write_block(buf: io.BufferedIOBase, payload: bytes) -> None:
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(raw)}")
    return raw


def save_checkpoint(path: str | os.PathLike, state: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    """Binary layout: magic, version, key=value metadata block, tensors."""
    meta_lines = "\n".join(f"{k}={v}" for k, v in (metadata or {}).items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(fh, meta_lines.encode("utf-8"))
        for name, value in state.items():
            arr = np.ascontiguousarray(value, dtype="<f4")
            _write_block(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Inverse of save_checkpoint; magic/version/truncation all error."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta_raw = _read_exact(fh, meta_len, "metadata").decode("utf-8")
        metadata = {}
        for line in meta_raw.splitlines():
            key, _, value = line.partition("=")
            metadata[key] = value
        state: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} dims"))
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
            raw = _read_exact(fh, n_bytes, f"{name} payload")
            state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return state, metadata


def checkpoint_state(model: XstNetModel, optimizer: AdamState | None = None) -> dict[str, np.ndarray]:
    """Model parameters, plus moment buffers under the optim. prefix."""
    state = model.state()
    if optimizer is not None:
        for name in optimizer.m:
            state[f"{OPTIM_PREFIX}m.{name}"] = optimizer.m[name].copy()
            state[f"{OPTIM_PREFIX}v.{name}"] = optimizer.v[name].copy()
    return state


def split_optimizer(state: dict[str, np.ndarray], metadata: dict[str, str]) -> tuple[dict[str, np.ndarray], AdamState | None]:
    """Separate model tensors from any optimizer buffers in a checkpoint."""
    model_state = {k: v for k, v in state.items() if not k.startswith(OPTIM_PREFIX)}
    moments = {k: v for k, v in state.items() if k.startswith(OPTIM_PREFIX)}
    if not moments:
        return model_state, None
    opt = AdamState(step=int(metadata.get("optim_step", "0")))
    for key, value in moments.items():
        kind, _, name = key[len(OPTIM_PREFIX) :].partition(".")
        (opt.m if kind == "m" else opt.v)[name] = value.copy()
    return model_state, opt


def average_checkpoints(paths: Sequence[str | os.PathLike]) -> dict[str, np.ndarray]:
    """Elementwise float64 mean of the model tensors; optimizer state dropped."""
    if not paths:
        raise ValueError("average_checkpoints: need at least one path")
    acc: dict[str, np.ndarray] = {}
    for i, path in enumerate(paths):
        state, _ = load_checkpoint(path)
        state = {k: v for k, v in state.items() if not k.startswith(OPTIM_PREFIX)}
        if i == 0:
            acc = {k: v.astype(np.float64) for k, v in state.items()}
            continue
        if set(state) != set(acc):
            raise ValueError(f"checkpoint {path}: parameter names differ from {paths[0]}")
        for k, v in state.items():
            if v.shape != acc[k].shape:
                raise ValueError(f"checkpoint {path}: {k} shape {v.shape} != {acc[k].shape}")
            acc[k] += v
    return {k: (v / len(paths)).astype(np.float32) for k, v in acc.items()}


def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """In-memory counterpart of average_checkpoints."""
    if not states:
        raise ValueError("average_states: need at least one state")
    acc = {k: v.astype(np.float64) for k, v in states[0].items()}
    for state in states[1:]:
        for k, v in state.items():
            acc[k] += v
    return {k: (v / len(states)).astype(np.float32) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def dev_metric_for(tasks: Sequence[Task]) -> str:
    """Stages that translate track dev BLEU; recognition-only stages track NLL."""
    if Task.ST in tasks:
        return "dev_st_bleu"
    if Task.MT in tasks or Task.MT_EXT in tasks:
        return "dev_mt_bleu"
    return "dev_nll"


def metric_improves(name: str, new: float, old: float | None) -> bool:
    if old is None:
        return True
    return new > old if name.endswith("bleu") else new < old


def evaluate_dev(
    model: XstNetModel,
    vocab: Vocabulary,
    dev: Sequence,
    metric: str,
    batch_size: int = 32,
) -> float:
    """Greedy-decode the dev split and score it under the stage metric."""
    if metric == "dev_st_bleu":
        hyps = translate_examples(model, vocab, dev, Task.ST, DecodeRequest(beam_size=1), batch_size)
        return corpus_bleu(hyps, [ex.translation for ex in dev]).value
    if metric == "dev_mt_bleu":
        hyps = translate_examples(model, vocab, dev, Task.MT, DecodeRequest(beam_size=1), batch_size)
        return corpus_bleu(hyps, [ex.translation for ex in dev]).value
    total = 0.0
    n = 0
    for lo in range(0, len(dev), batch_size):
        batch = build_batch(Task.ASR, list(dev[lo : lo + batch_size]), vocab)
        loss = model.forward_loss(batch)
        total += float(loss.data) * batch.size
        n += batch.size
    return total / max(n, 1)


def score_tasks(
    model: XstNetModel,
    vocab: Vocabulary,
    examples: Sequence,
    request: DecodeRequest | None = None,
    batch_size: int = 32,
) -> dict[str, float]:
    """Test-time summary: ST BLEU, MT BLEU, ASR WER on one example list."""
    request = request or DecodeRequest(beam_size=1)
    st = translate_examples(model, vocab, examples, Task.ST, request, batch_size)
    mt = translate_examples(model, vocab, examples, Task.MT, request, batch_size)
    asr = translate_examples(model, vocab, examples, Task.ASR, request, batch_size)
    refs_t = [ex.translation for ex in examples]
    refs_x = [ex.transcript for ex in examples]
    return {
        "st_bleu": corpus_bleu(st, refs_t).value,
        "mt_bleu": corpus_bleu(mt, refs_t).value,
        "wer": wer(asr, refs_x).value,
    }


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

METRICS_HEADER = "step,stage,task,loss,dev_metric_name,dev_metric_value"


@dataclass
class RecipeResult:
    model: XstNetModel
    averaged_state: dict[str, np.ndarray]
    metrics_rows: list[str]  # METRICS_HEADER rows, one per step
    dev_history: list[tuple[int, str, str, float]]  # (step, stage, metric, value)
    best_dev: tuple[int, str, float] | None  # (step, metric, value)
    best_state: dict[str, np.ndarray] | None
    task_counts: dict[str, Counter]
    stopped_early: dict[str, bool]
    stage_end_states: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def run_recipe(
    recipe: TrainingRecipe,
    corpus: SynthCorpus,
    vocab: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    out_dir: str | os.PathLike | None = None,
    log: bool = False,
) -> RecipeResult:
    """Execute every stage in order, carrying parameters forward.

    Determinism: (recipe, corpus, seed) fixes task draws, batch order and
    dropout, so reruns produce identical metrics rows.  When out_dir is set,
    checkpoints rotate there (trailing window plus best-dev) and the metrics
    log is written as train_log.csv.
    """
    cfg = train_config or TrainConfig()
    model = XstNetModel(model_config, seed=seed)
    datasets = task_datasets(corpus.train, corpus.ext_pairs)
    dev = corpus.dev[: cfg.dev_limit] if cfg.dev_limit else corpus.dev

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    rows: list[str] = []
    dev_history: list[tuple[int, str, str, float]] = []
    task_counts: dict[str, Counter] = {}
    stopped_early: dict[str, bool] = {}
    stage_end_states: dict[str, dict[str, np.ndarray]] = {}
    trailing: list[dict[str, np.ndarray]] = []
    trailing_paths: list[Path] = []
    best: tuple[int, str, float] | None = None
    best_state: dict[str, np.ndarray] | None = None
    global_step = 0

    def save_rotating(step: int, stage_name: str) -> None:
        state = model.state()
        trailing.append(state)
        del trailing[: -cfg.keep_checkpoints]
        if out_path is not None:
            meta = dict(config_to_dict(model_config))
            meta.update(recipe=recipe.name, stage=stage_name, step=str(step), seed=str(seed))
            path = out_path / f"ckpt-{step:06d}.xck"
            save_checkpoint(path, state, meta)
            trailing_paths.append(path)
            while len(trailing_paths) > cfg.keep_checkpoints:
                old = trailing_paths.pop(0)
                old.unlink(missing_ok=True)

    for stage_index, stage in enumerate(recipe.stages):
        for task in stage.tasks:
            if not datasets[task].examples:
                raise ValueError(f"stage {stage.name}: dataset for task {task.value} is empty")
        task_rng = np.random.default_rng([seed, stage_index, 1])
        drop_rng = np.random.default_rng([seed, stage_index, 2])
        opt = init_adam(model)
        streams = {task: batch_stream(datasets[task], vocab, cfg.batch_size, seed) for task in stage.tasks}
        counts: Counter = Counter()
        task_counts[stage.name] = counts
        stopped_early[stage.name] = False
        metric_name = dev_metric_for(stage.tasks)
        stage_best: float | None = None
        evals_since_best = 0

        for stage_step in range(1, stage.n_steps + 1):
            task = sample_task(task_rng, stage.tasks, stage.weights)
            batch = next(streams[task])
            with nm.Tape() as tape:
                loss = model.forward_loss(batch, cfg.label_smoothing, train=True, rng=drop_rng)
                nm.backward(tape, loss)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise DivergenceError(f"loss became non-finite at stage {stage.name} step {stage_step}")
            adam_step(model, opt, cfg.base_lr, cfg.warmup_steps)
            counts[task.value] += 1
            global_step += 1

            dev_cell = ("", "")
            if stage_step % cfg.eval_interval == 0 or stage_step == stage.n_steps:
                value = evaluate_dev(model, vocab, dev, metric_name, cfg.batch_size)
                dev_cell = (metric_name, f"{value:.4f}")
                dev_history.append((global_step, stage.name, metric_name, value))
                save_rotating(global_step, stage.name)
                if metric_improves(metric_name, value, stage_best):
                    stage_best = value
                    evals_since_best = 0
                    # Best-dev restarts whenever the stage metric changes;
                    # the last stage's metric is the one finally reported.
                    if best is None or best[1] != metric_name or metric_improves(metric_name, value, best[2]):
                        best = (global_step, metric_name, value)
                        best_state = model.state()
                        if out_path is not None:
                            meta = dict(config_to_dict(model_config))
                            meta.update(recipe=recipe.name, stage=stage.name, step=str(global_step), seed=str(seed))
                            save_checkpoint(out_path / "ckpt-best.xck", best_state, meta)
                else:
                    evals_since_best += 1
                if log:
                    print(f"[{recipe.name}] step {global_step} {stage.name} {metric_name}={value:.4f}")
            rows.append(f"{global_step},{stage.name},{task.value},{loss_value:.6f},{dev_cell[0]},{dev_cell[1]}")
            if dev_cell[0] and evals_since_best >= cfg.patience:
                stopped_early[stage.name] = True
                break
        stage_end_states[stage.name] = model.state()

    averaged = average_states(trailing[-cfg.keep_checkpoints :] or [model.state()])
    if out_path is not None:
        meta = dict(config_to_dict(model_config))
        meta.update(recipe=recipe.name, stage="averaged", step=str(global_step), seed=str(seed))
        save_checkpoint(out_path / "ckpt-avg.xck", averaged, meta)
        (out_path / "train_log.csv").write_text(METRICS_HEADER + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")

    return RecipeResult(
        model=model,
        averaged_state=averaged,
        metrics_rows=rows,
        dev_history=dev_history,
        best_dev=best,
        best_state=best_state,
        task_counts=task_counts,
        stopped_early=stopped_early,
        stage_end_states=stage_end_states,
    )
