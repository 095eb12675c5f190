"""Decoding: greedy and beam search over any per-step scoring function.

The search routines consume a step function mapping a list of equal-length
prefixes (each starting with the decoder start tag) to a (n, V) array of
natural-log next-token probabilities, so they can be exercised against tiny
enumerable distributions as well as the real model.  Scores are accumulated
in float64; final ranking divides by length**alpha where length counts the
generated tokens including [eos] when it was produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Task, TripleExample, Vocabulary, build_batch, source_length
from .model import NEG_INF_BIAS, XstNetModel
from .numerics import Tensor

StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass
class DecodeRequest:
    """Search settings; max_len counts the start tag plus generated tokens."""

    beam_size: int = 10
    alpha: float = 1.0
    max_len: int | None = None  # None: 2 * source_len + 10 per example
    n_best: int = 1

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be at least 1 (the start tag itself)")
        if self.n_best < 1:
            raise ValueError("n_best must be at least 1")


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)  # generated ids, [eos] kept
    score: float = 0.0  # sum of token log-probs
    normalized: float = 0.0  # score / max(len(tokens), 1) ** alpha


def default_max_len(source_len: int) -> int:
    """Decoder length budget (tag included) grows linearly with the source."""
    return 2 * source_len + 10


def log_softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Rows of natural-log probabilities, computed stably in float64."""
    x = np.asarray(scores, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))


def _ranked(pool: list[tuple[tuple[int, ...], float]], alpha: float) -> list[Hypothesis]:
    hyps = [
        Hypothesis(tokens=list(ids[1:]), score=lp, normalized=lp / max(len(ids) - 1, 1) ** alpha)
        for ids, lp in pool
    ]
    hyps.sort(key=lambda h: (-h.normalized, h.tokens))
    return hyps


def beam_search(
    step_fn: StepFn,
    bos_id: int,
    eos_id: int,
    max_len: int,
    beam_size: int = 10,
    alpha: float = 1.0,
    n_best: int = 1,
) -> list[Hypothesis]:
    """Standard beam search with deterministic tie-breaks.

    Each step keeps the beam_size best continuations by running score, ties
    going to the lexicographically smaller token sequence.  Hypotheses that
    emit [eos] move to a finished pool that is never pruned; hypotheses still
    alive at the length budget are kept as-is.  The final ranking uses
    score / length**alpha.
    """
    live: list[tuple[tuple[int, ...], float]] = [((bos_id,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len - 1):
        if not live:
            break
        rows = np.asarray(step_fn([list(ids) for ids, _ in live]), dtype=np.float64)
        vocab_size = rows.shape[1]
        token_order = np.arange(vocab_size)
        cands: list[tuple[tuple[int, ...], float]] = []
        for (ids, lp), row in zip(live, rows):
            best = np.lexsort((token_order, -row))[: min(beam_size, vocab_size)]
            for tok in best:
                cands.append((ids + (int(tok),), lp + float(row[tok])))
        cands.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for ids, lp in cands[:beam_size]:
            if ids[-1] == eos_id:
                finished.append((ids, lp))
            else:
                live.append((ids, lp))
    finished.extend(live)
    return _ranked(finished, alpha)[:n_best]


def greedy_decode(step_fn: StepFn, bos_id: int, eos_id: int, max_len: int, alpha: float = 1.0) -> Hypothesis:
    """Pick the argmax token each step; identical to beam_size=1 search."""
    ids = [bos_id]
    lp = 0.0
    for _ in range(max_len - 1):
        row = np.asarray(step_fn([ids]), dtype=np.float64)[0]
        tok = int(np.argmax(row))  # first maximum, so ties go to the smallest id
        lp += float(row[tok])
        ids.append(tok)
        if tok == eos_id:
            break
    return _ranked([(tuple(ids), lp)], alpha)[0]


# ---------------------------------------------------------------------------
# Model-backed decoding
# ---------------------------------------------------------------------------


def model_step_fn(model: XstNetModel, memory_data: np.ndarray, memory_mask: np.ndarray) -> StepFn:
    """Step function over one encoded source; [pad] and [audio] are unreachable."""

    def step(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        dec_in = np.asarray(prefixes, dtype=np.int64)
        mem = memory_data if memory_data.shape[0] == n else np.repeat(memory_data, n, axis=0)
        mask = memory_mask if memory_mask.shape[0] == n else np.repeat(memory_mask, n, axis=0)
        logits = model.decoder_forward(dec_in, Tensor(mem), mask)
        last = logits.data[:, -1, :].astype(np.float64)
        last[:, Vocabulary.pad_id] = NEG_INF_BIAS
        last[:, Vocabulary.audio_id] = NEG_INF_BIAS
        return log_softmax_rows(last)

    return step


def decode_example(
    model: XstNetModel,
    vocab: Vocabulary,
    example: TripleExample,
    task: Task,
    request: DecodeRequest | None = None,
) -> list[Hypothesis]:
    """Encode one example and search; returns request.n_best hypotheses."""
    request = request or DecodeRequest()
    batch = build_batch(task, [example], vocab)
    memory, mask = model.encode_source(batch)
    source_len = int(mask.sum()) - 1  # memory positions minus the modality tag
    max_len = request.max_len if request.max_len is not None else default_max_len(source_len)
    step = model_step_fn(model, memory.data, mask)
    bos = int(batch.bos_ids[0])
    if request.beam_size == 1:
        return [greedy_decode(step, bos, vocab.eos_id, max_len, request.alpha)]
    return beam_search(step, bos, vocab.eos_id, max_len, request.beam_size, request.alpha, request.n_best)


def greedy_decode_batch(
    model: XstNetModel,
    vocab: Vocabulary,
    examples: Sequence[TripleExample],
    task: Task,
    max_len: int | None = None,
) -> list[list[int]]:
    """Batched greedy pass for evaluation loops; one token list per example."""
    batch = build_batch(task, list(examples), vocab)
    memory, mask = model.encode_source(batch)
    n = batch.size
    source_lens = mask.sum(axis=1) - 1
    caps = np.full(n, max_len) if max_len is not None else 2 * source_lens + 10
    dec = batch.bos_ids[:, None].copy()
    done = np.zeros(n, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(n)]
    for t in range(int(caps.max()) - 1):
        logits = model.decoder_forward(dec, memory, mask)
        last = logits.data[:, -1, :].astype(np.float64)
        last[:, Vocabulary.pad_id] = NEG_INF_BIAS
        last[:, Vocabulary.audio_id] = NEG_INF_BIAS
        toks = np.argmax(last, axis=1)
        for i in range(n):
            if done[i]:
                continue
            if t >= caps[i] - 1:
                done[i] = True
                continue
            tok = int(toks[i])
            outs[i].append(tok)
            if tok == vocab.eos_id:
                done[i] = True
        if done.all():
            break
        next_col = np.where(done, Vocabulary.pad_id, toks).astype(np.int64)
        dec = np.concatenate([dec, next_col[:, None]], axis=1)
    return outs


def translate_examples(
    model: XstNetModel,
    vocab: Vocabulary,
    examples: Sequence[TripleExample],
    task: Task,
    request: DecodeRequest | None = None,
    batch_size: int = 32,
) -> list[str]:
    """Decode a dataset in input order; returns one detokenized line each.

    Greedy requests run batched over length-sorted chunks for small pads;
    wider beams decode per example.  The start tag never appears in output.
    """
    request = request or DecodeRequest()
    if request.beam_size == 1:
        order = sorted(range(len(examples)), key=lambda i: (source_length(task, examples[i]), i))
        out: list[str] = [""] * len(examples)
        for lo in range(0, len(order), batch_size):
            chunk = order[lo : lo + batch_size]
            ids = greedy_decode_batch(model, vocab, [examples[i] for i in chunk], task, request.max_len)
            for i, toks in zip(chunk, ids):
                out[i] = vocab.decode(toks)
        return out
    return [vocab.decode(decode_example(model, vocab, ex, task, request)[0].tokens) for ex in examples]
