"""Corpus BLEU and WER with recomputable count breakdowns."""

from __future__ import annotations

import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

MAX_NGRAM = 4


@dataclass
class ScoreReport:
    """A corpus score plus the raw counts it was computed from.

    `fields` preserves insertion order and is what emit_report writes; the
    value must be recomputable from the counts alone (see recompute_value).
    """

    metric: str
    value: float
    n_sentences: int
    fields: dict[str, float] = field(default_factory=dict)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str]) -> ScoreReport:
    """Corpus BLEU-4: clipped n-gram precisions, brevity penalty, no smoothing.

    Tokenization is whitespace; one reference per hypothesis.  Any zero
    precision gives BLEU 0, as does an empty hypothesis corpus.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"corpus_bleu: {len(hyps)} hypotheses vs {len(refs)} references")
    match = [0] * MAX_NGRAM
    total = [0] * MAX_NGRAM
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h = hyp.split()
        r = ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_NGRAM + 1):
            hgrams = _ngrams(h, n)
            rgrams = _ngrams(r, n)
            match[n - 1] += sum(min(c, rgrams[g]) for g, c in hgrams.items())
            total[n - 1] += max(len(h) - n + 1, 0)

    if hyp_len == 0 or any(t == 0 for t in total) or any(m == 0 for m in match):
        value = 0.0
        bp = 0.0 if hyp_len == 0 else (1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len))
    else:
        bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
        log_prec = sum(math.log(m / t) for m, t in zip(match, total)) / MAX_NGRAM
        value = bp * math.exp(log_prec) * 100.0

    fields: dict[str, float] = {}
    for n in range(1, MAX_NGRAM + 1):
        fields[f"p{n}"] = (match[n - 1] / total[n - 1]) if total[n - 1] else 0.0
    fields["bp"] = bp
    fields["hyp_len"] = float(hyp_len)
    fields["ref_len"] = float(ref_len)
    for n in range(1, MAX_NGRAM + 1):
        fields[f"match_{n}"] = float(match[n - 1])
        fields[f"total_{n}"] = float(total[n - 1])
    return ScoreReport(metric="bleu", value=value, n_sentences=len(hyps), fields=fields)


def _edit_counts(hyp: list[str], ref: list[str]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of one optimal alignment.

    Ties prefer substitution/match, then deletion, then insertion, so the
    breakdown is deterministic; the total always equals the edit distance.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i][j] = min(dist[i - 1][j - 1] + (0 if same else 1), dist[i - 1][j] + 1, dist[i][j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, ins, dels


def wer(hyps: Sequence[str], refs: Sequence[str]) -> ScoreReport:
    """Corpus word error rate: total edit distance over total reference tokens."""
    if len(hyps) != len(refs):
        raise ValueError(f"wer: {len(hyps)} hypotheses vs {len(refs)} references")
    ref_tokens = sum(len(r.split()) for r in refs)
    if ref_tokens == 0:
        raise ValueError("wer: reference corpus has no tokens")
    subs = ins = dels = 0
    for hyp, ref in zip(hyps, refs):
        s, i, d = _edit_counts(hyp.split(), ref.split())
        subs += s
        ins += i
        dels += d
    edits = subs + ins + dels
    fields = {
        "edits": float(edits),
        "substitutions": float(subs),
        "insertions": float(ins),
        "deletions": float(dels),
        "ref_tokens": float(ref_tokens),
    }
    return ScoreReport(metric="wer", value=edits / ref_tokens, n_sentences=len(hyps), fields=fields)


def recompute_value(report: ScoreReport) -> float:
    """Re-derive the corpus value from the stored counts."""
    f = report.fields
    if report.metric == "bleu":
        hyp_len, ref_len = f["hyp_len"], f["ref_len"]
        match = [f[f"match_{n}"] for n in range(1, MAX_NGRAM + 1)]
        total = [f[f"total_{n}"] for n in range(1, MAX_NGRAM + 1)]
        if hyp_len == 0 or any(t == 0 for t in total) or any(m == 0 for m in match):
            return 0.0
        bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
        return bp * math.exp(sum(math.log(m / t) for m, t in zip(match, total)) / MAX_NGRAM) * 100.0
    if report.metric == "wer":
        return f["edits"] / f["ref_tokens"]
    raise ValueError(f"unknown metric {report.metric!r}")


def emit_report(report: ScoreReport, path: str | os.PathLike) -> None:
    """CSV with header metric,value,detail; values at 4 decimals, fixed order."""
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        out.write("metric,value,detail\n")
        out.write(f"{report.metric},{report.value:.4f},corpus score over {report.n_sentences} sentences\n")
        for name, value in report.fields.items():
            out.write(f"{name},{value:.4f},\n")
