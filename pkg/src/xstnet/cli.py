"""Command line entry points.

Commands share one flat `key = value` configuration namespace (corpus.*,
model.*, train.*, plus run-level keys); unknown keys are rejected and the
resolved configuration is echoed so runs are auditable.  Every report
command writes a CSV and renders the matching PNG beside it.  Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path
from statistics import mean
from typing import Sequence

import numpy as np

from . import figures
from .data import (
    SynthSpec,
    Task,
    build_vocab,
    generate_corpus,
    load_corpus,
    read_manifest,
    read_vocab,
    save_corpus,
)
from .infer import DecodeRequest, translate_examples
from .metrics import corpus_bleu, emit_report, wer
from .model import ModelConfig, XstNetModel, config_from_dict, config_to_dict
from .train import (
    RECIPE_NAMES,
    DivergenceError,
    Stage,
    TrainConfig,
    TrainingRecipe,
    average_checkpoints,
    load_checkpoint,
    make_recipe,
    run_recipe,
    save_checkpoint,
    score_tasks,
    split_optimizer,
)


class UsageError(ValueError):
    """Bad flags, config keys, or config values; exits with code 1."""


# ---------------------------------------------------------------------------
# Configuration namespace
# ---------------------------------------------------------------------------


def _default_config() -> dict[str, str]:
    cfg: dict[str, str] = {}
    for f in fields(SynthSpec):
        cfg[f"corpus.{f.name}"] = str(getattr(SynthSpec(), f.name))
    model_defaults = config_to_dict(ModelConfig(vocab_size=5))
    for key, value in model_defaults.items():
        if key != "vocab_size":  # always derived from the corpus vocabulary
            cfg[f"model.{key}"] = value
    for f in fields(TrainConfig):
        value = getattr(TrainConfig(), f.name)
        cfg[f"train.{f.name}"] = "" if value is None else str(value)
    cfg.update(
        seed="0",
        recipe="exp1",
        stages="",
        pretrain_steps="1200",
        finetune_steps="3000",
        task="st",
        split="test",
        beam="10",
        alpha="1.0",
        max_len="",
        sizes="2000,5000,10000,20000",
        seeds="0,1,2",
    )
    return cfg


CONFIG_DEFAULTS = _default_config()


def parse_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' comments; unknown keys are errors."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path} line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_DEFAULTS:
            raise UsageError(f"{path} line {lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def resolve_config(ns: argparse.Namespace) -> dict[str, str]:
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(ns, "config", None):
        cfg.update(parse_config_file(ns.config))
    overrides = {
        "seed": getattr(ns, "seed", None),
        "recipe": getattr(ns, "recipe", None),
        "beam": getattr(ns, "beam", None),
        "task": getattr(ns, "task", None),
        "split": getattr(ns, "split", None),
        "sizes": getattr(ns, "sizes", None),
        "seeds": getattr(ns, "seeds", None),
        "pretrain_steps": getattr(ns, "pretrain_steps", None),
        "finetune_steps": getattr(ns, "finetune_steps", None),
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = str(value)
    stage_flags = getattr(ns, "stage", None)
    if stage_flags:
        cfg["stages"] = ";".join(stage_flags)
    return cfg


def _pick(cfg: dict[str, str], key: str, cast, what: str):
    try:
        return cast(cfg[key])
    except (TypeError, ValueError) as e:
        raise UsageError(f"config {key}: {cfg[key]!r} is not a valid {what}") from e


def _parse_bool(raw: str) -> bool:
    if raw in ("True", "true", "1"):
        return True
    if raw in ("False", "false", "0"):
        return False
    raise ValueError(raw)


def synth_spec_from(cfg: dict[str, str]) -> SynthSpec:
    kw = {}
    for f in fields(SynthSpec):
        key = f"corpus.{f.name}"
        if f.type == "int":
            kw[f.name] = _pick(cfg, key, int, "integer")
        elif f.type == "float":
            kw[f.name] = _pick(cfg, key, float, "number")
        else:
            kw[f.name] = cfg[key]
    try:
        return SynthSpec(**kw)
    except ValueError as e:
        raise UsageError(f"corpus spec: {e}") from e


def model_config_from(cfg: dict[str, str], vocab_size: int) -> ModelConfig:
    d = {key[len("model.") :]: value for key, value in cfg.items() if key.startswith("model.")}
    d["vocab_size"] = str(vocab_size)
    try:
        return config_from_dict(d)
    except ValueError as e:
        raise UsageError(f"model config: {e}") from e


def train_config_from(cfg: dict[str, str]) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        raw = cfg[f"train.{f.name}"]
        if f.name == "dev_limit":
            kw[f.name] = int(raw) if raw else None
        elif f.type == "float":
            kw[f.name] = _pick(cfg, f"train.{f.name}", float, "number")
        else:
            kw[f.name] = _pick(cfg, f"train.{f.name}", int, "integer")
    try:
        return TrainConfig(**kw)
    except ValueError as e:
        raise UsageError(f"train config: {e}") from e


def parse_stages(spec: str) -> TrainingRecipe:
    """Inline recipe syntax: name:task+task:steps, stages joined by ';'."""
    stages = []
    for part in spec.split(";"):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise UsageError(f"stage {part!r}: expected name:task+task:steps")
        name, task_field, steps = bits
        try:
            tasks = tuple(Task(t.strip()) for t in task_field.split("+"))
        except ValueError as e:
            raise UsageError(f"stage {part!r}: {e}") from e
        try:
            stages.append(Stage(name.strip(), tasks, int(steps)))
        except ValueError as e:
            raise UsageError(f"stage {part!r}: {e}") from e
    return TrainingRecipe("custom", tuple(stages))


def recipe_from(cfg: dict[str, str]) -> TrainingRecipe:
    if cfg["stages"]:
        return parse_stages(cfg["stages"])
    name = cfg["recipe"]
    if name not in RECIPE_NAMES:
        raise UsageError(f"unknown recipe {name!r}; choose from {', '.join(RECIPE_NAMES)}")
    return make_recipe(name, _pick(cfg, "pretrain_steps", int, "integer"), _pick(cfg, "finetune_steps", int, "integer"))


def echo_config(cfg: dict[str, str], out_dir: Path | None = None) -> None:
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    print("resolved configuration:")
    for line in lines:
        print(f"  {line}")
    if out_dir is not None:
        (out_dir / "resolved.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_world(ns: argparse.Namespace, cfg: dict[str, str]):
    """Corpus and vocabulary from --data when given, else generated."""
    if getattr(ns, "data", None):
        return load_corpus(ns.data)
    corpus = generate_corpus(synth_spec_from(cfg))
    langs = list(dict.fromkeys(c for ex in corpus.train + corpus.ext_pairs for c in (ex.src_lang, ex.tgt_lang)))
    return corpus, build_vocab(corpus.all_sentences(), langs)


def _model_from_checkpoint(path: str) -> tuple[XstNetModel, dict[str, str]]:
    state, meta = load_checkpoint(path)
    model_state, _ = split_optimizer(state, meta)
    try:
        config = config_from_dict(meta)
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"checkpoint {path}: metadata does not describe a model config: {e}") from e
    model = XstNetModel(config)
    model.load_state(model_state)
    return model, meta


def _write_csv(path: Path, header: str, rows: Sequence[str]) -> None:
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    if ns.seed is not None:
        cfg["corpus.seed"] = str(ns.seed)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    corpus = generate_corpus(synth_spec_from(cfg))
    save_corpus(corpus, out)
    print(
        f"wrote {len(corpus.train)} train / {len(corpus.dev)} dev / {len(corpus.test)} test triples "
        f"and {len(corpus.ext_pairs)} external pairs to {out}"
    )
    return 0


def cmd_train(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    corpus, vocab = _load_world(ns, cfg)
    model_config = model_config_from(cfg, len(vocab))
    recipe = recipe_from(cfg)
    result = run_recipe(
        recipe,
        corpus,
        vocab,
        model_config,
        train_config_from(cfg),
        seed=_pick(cfg, "seed", int, "integer"),
        out_dir=out,
        log=not ns.quiet,
    )
    for stage in recipe.stages:
        counts = result.task_counts.get(stage.name, {})
        print(f"stage {stage.name}: {dict(sorted(counts.items()))}" + (" (stopped early)" if result.stopped_early.get(stage.name) else ""))
    final = XstNetModel(model_config)
    final.load_state(result.averaged_state)
    score_rows = []
    if corpus.test:
        scores = score_tasks(final, vocab, corpus.test)
        score_rows = [f"{k},{v:.4f}" for k, v in scores.items()]
        print("test scores (averaged model):", {k: round(v, 2) for k, v in scores.items()})
    _write_csv(out / "final_scores.csv", "metric,value", score_rows)
    if result.best_dev:
        step, metric, value = result.best_dev
        print(f"best dev: {metric}={value:.4f} at step {step}")

    loss_points = []
    dev_points: dict[str, list[figures.CurvePoint]] = {}
    for row in result.metrics_rows:
        step, _, _, loss, dev_name, dev_value = row.split(",")
        loss_points.append(figures.CurvePoint(int(step), float(loss)))
        if dev_name:
            dev_points.setdefault(dev_name, []).append(figures.CurvePoint(int(step), float(dev_value)))
    figures.plot_training_curves(loss_points, dev_points, out / "train_curves.png", title=recipe.name)
    print(f"metrics: {out / 'train_log.csv'}  curves: {out / 'train_curves.png'}")
    return 0


def cmd_decode(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    echo_config(cfg)
    model, _ = _model_from_checkpoint(ns.ckpt)
    vocab = read_vocab(Path(ns.data) / "vocab.txt")
    if len(vocab) != model.config.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab)} does not match the checkpoint's {model.config.vocab_size}"
        )
    split = cfg["split"]
    examples = read_manifest(Path(ns.data) / f"{split}.tsv")
    task = Task(cfg["task"])
    request = DecodeRequest(
        beam_size=_pick(cfg, "beam", int, "integer"),
        alpha=_pick(cfg, "alpha", float, "number"),
        max_len=int(cfg["max_len"]) if cfg["max_len"] else None,
    )
    lines = translate_examples(model, vocab, examples, task, request)
    Path(ns.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"decoded {len(lines)} examples ({task.value}, beam {request.beam_size}) -> {ns.out}")
    return 0


def cmd_score(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    task = Task(cfg["task"])
    examples = read_manifest(Path(ns.data) / f"{cfg['split']}.tsv")
    hyps = Path(ns.hyp).read_text(encoding="utf-8").splitlines()
    if task is Task.ASR:
        report = wer(hyps, [ex.transcript for ex in examples])
    else:
        report = corpus_bleu(hyps, [ex.translation for ex in examples])
    emit_report(report, ns.out)
    print(f"{report.metric} = {report.value:.4f} over {report.n_sentences} sentences -> {ns.out}")
    return 0


def cmd_average(ns: argparse.Namespace) -> int:
    averaged = average_checkpoints(ns.checkpoints)
    _, meta = load_checkpoint(ns.checkpoints[0])
    meta = dict(meta)
    meta.update(stage="averaged", averaged_over=str(len(ns.checkpoints)))
    save_checkpoint(ns.out, averaged, meta)
    print(f"averaged {len(ns.checkpoints)} checkpoints -> {ns.out}")
    return 0


def _seed_list(cfg: dict[str, str]) -> list[int]:
    try:
        return [int(s) for s in cfg["seeds"].split(",") if s.strip() != ""]
    except ValueError as e:
        raise UsageError(f"config seeds: {cfg['seeds']!r} is not a comma-separated integer list") from e


def cmd_ablate(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    corpus, vocab = _load_world(ns, cfg)
    model_config = model_config_from(cfg, len(vocab))
    train_config = train_config_from(cfg)
    seeds = _seed_list(cfg)
    pre = _pick(cfg, "pretrain_steps", int, "integer")
    fin = _pick(cfg, "finetune_steps", int, "integer")

    rows: list[str] = []
    convergence_rows: list[str] = []
    means: dict[str, dict[str, float]] = {}
    for name in RECIPE_NAMES:
        per_seed: list[dict[str, float]] = []
        for seed in seeds:
            result = run_recipe(make_recipe(name, pre, fin), corpus, vocab, model_config, train_config, seed=seed)
            final = XstNetModel(model_config)
            final.load_state(result.averaged_state)
            scores = score_tasks(final, vocab, corpus.test)
            per_seed.append(scores)
            rows.append(f"{name},{seed},{scores['st_bleu']:.4f},{scores['mt_bleu']:.4f},{scores['wer']:.4f}")
            if not ns.quiet:
                print(f"{name} seed {seed}: " + ", ".join(f"{k}={v:.2f}" for k, v in scores.items()))
            if ns.convergence_report and name in ("exp1", "exp3"):
                for step, stage, metric, value in result.dev_history:
                    convergence_rows.append(f"{name},{seed},{step},{stage},{metric},{value:.4f}")
        means[name] = {k: mean(s[k] for s in per_seed) for k in per_seed[0]}
        rows.append(
            f"{name},mean,{means[name]['st_bleu']:.4f},{means[name]['mt_bleu']:.4f},{means[name]['wer']:.4f}"
        )
    _write_csv(out / "ablation.csv", "recipe,seed,st_bleu,mt_bleu,wer", rows)
    figures.plot_recipe_bars(
        [(name, means[name]["st_bleu"]) for name in RECIPE_NAMES], "mean test ST BLEU", out / "ablation.png"
    )
    print(f"ablation table: {out / 'ablation.csv'}  bars: {out / 'ablation.png'}")
    if ns.convergence_report:
        _write_csv(out / "convergence.csv", "recipe,seed,step,stage,dev_metric_name,dev_metric_value", convergence_rows)
        curves: dict[str, list[figures.CurvePoint]] = {}
        for row in convergence_rows:
            name, seed, step, stage, metric, value = row.split(",")
            if stage == "finetune" and metric == "dev_st_bleu":
                curves.setdefault(f"{name}-seed{seed}", []).append(figures.CurvePoint(int(step), float(value)))
        figures.plot_convergence(curves, out / "convergence.png")
        print(f"convergence report: {out / 'convergence.csv'}")
    return 0


def cmd_sweep_ext(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    try:
        sizes = [int(s) for s in cfg["sizes"].split(",") if s.strip() != ""]
    except ValueError as e:
        raise UsageError(f"config sizes: {cfg['sizes']!r} is not a comma-separated integer list") from e
    if not sizes:
        raise UsageError("config sizes: need at least one external size")
    base_spec = synth_spec_from(cfg)
    seed = _pick(cfg, "seed", int, "integer")
    pre = _pick(cfg, "pretrain_steps", int, "integer")
    fin = _pick(cfg, "finetune_steps", int, "integer")
    train_config = train_config_from(cfg)

    rows = []
    points = []
    for size in sizes:
        corpus = generate_corpus(replace(base_spec, n_ext_pairs=size))
        langs = list(dict.fromkeys(c for ex in corpus.train + corpus.ext_pairs for c in (ex.src_lang, ex.tgt_lang)))
        vocab = build_vocab(corpus.all_sentences(), langs)
        model_config = model_config_from(cfg, len(vocab))
        # Size 0 degenerates to a no-external run: no pretraining stage and
        # no mt_ext task, since that dataset is empty.
        recipe = make_recipe("xstnet-base" if size == 0 else "exp1", pre, fin)
        result = run_recipe(recipe, corpus, vocab, model_config, train_config, seed=seed)
        pretrained = XstNetModel(model_config)
        pretrained.load_state(result.stage_end_states.get("pretrain-mt", result.averaged_state))
        mt_hyps = translate_examples(pretrained, vocab, corpus.test, Task.MT, DecodeRequest(beam_size=1))
        mt_bleu = corpus_bleu(mt_hyps, [ex.translation for ex in corpus.test]).value
        final = XstNetModel(model_config)
        final.load_state(result.averaged_state)
        st_hyps = translate_examples(final, vocab, corpus.test, Task.ST, DecodeRequest(beam_size=1))
        st_bleu = corpus_bleu(st_hyps, [ex.translation for ex in corpus.test]).value
        rows.append(f"{size},{mt_bleu:.4f},{st_bleu:.4f}")
        points.append((size, mt_bleu, st_bleu))
        if not ns.quiet:
            print(f"ext {size}: pretrained mt_bleu={mt_bleu:.2f} final st_bleu={st_bleu:.2f}")
    _write_csv(out / "sweep_ext.csv", "ext_size,mt_bleu,st_bleu", rows)
    figures.plot_ext_sweep(points, out / "sweep_ext.png")
    print(f"sweep table: {out / 'sweep_ext.csv'}  curve: {out / 'sweep_ext.png'}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xstnet", description="Speech-and-text translation experiments on synthetic corpora.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, out_required=True, out_is_dir=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="run seed override")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")
        p.add_argument("--out", required=out_required, help="output " + ("directory" if out_is_dir else "file"))

    p = sub.add_parser("gen-data", help="generate a synthetic corpus into a directory")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a training recipe")
    common(p)
    p.add_argument("--data", help="corpus directory from gen-data (default: generate in memory)")
    p.add_argument("--recipe", help=f"one of {', '.join(RECIPE_NAMES)}")
    p.add_argument("--stage", action="append", help="inline stage name:task+task:steps (repeatable, overrides --recipe)")
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="translate a corpus split with a trained checkpoint")
    common(p, out_is_dir=False)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--split", choices=["train", "dev", "test", "ext"])
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="score a hypothesis file against a corpus split")
    common(p, out_is_dir=False)
    p.add_argument("--hyp", required=True, help="hypothesis text file, one line per example")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--split", choices=["train", "dev", "test", "ext"])
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("average", help="average checkpoint files into one")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files")
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("ablate", help="run every recipe across seeds and tabulate scores")
    common(p)
    p.add_argument("--data", help="corpus directory (default: generate in memory)")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int)
    p.add_argument("--convergence-report", action="store_true", help="join the exp1/exp3 dev curves into one CSV")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-ext", help="external MT size sweep: pretrained MT BLEU and final ST BLEU")
    common(p)
    p.add_argument("--sizes", help="comma-separated external pair counts")
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int)
    p.set_defaults(func=cmd_sweep_ext)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not getattr(ns, "func", None):
            parser.print_help()
            return 1
        return ns.func(ns)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DivergenceError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
