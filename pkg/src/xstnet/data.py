"""Synthetic speech-translation corpora, vocabulary, and batch plumbing.

A corpus is a set of (frames, transcript, translation) triples plus a larger
text-only external pair set sharing the same word dictionary.  Translation is
a bijective word map followed by sequence reversal, so the task is exactly
learnable; audio frames are per-word Gaussian prototypes plus noise, so the
acoustic side is exactly decodable too.
"""

from __future__ import annotations

import enum
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, EOS, UNK, AUDIO = "[pad]", "[eos]", "[unk]", "[audio]"
SPECIALS = (PAD, EOS, UNK, AUDIO)
FRAMES_MAGIC = b"XSTFRM1\x00"
MANIFEST_COLUMNS = ("id", "frames_file", "n_frames", "src_lang", "tgt_lang", "transcript", "translation")


class Task(enum.Enum):
    ST = "st"
    ASR = "asr"
    MT = "mt"
    MT_EXT = "mt_ext"

    @classmethod
    def from_str(cls, name: str) -> "Task":
        for task in cls:
            if task.value == name.lower():
                return task
        raise ValueError(f"unknown task {name!r}; expected one of {[t.value for t in cls]}")


@dataclass
class TripleExample:
    """One utterance: speech frames with its transcript and translation.

    Text-only pairs (the external MT set) carry frames=None.
    """

    id: str
    src_lang: str
    tgt_lang: str
    transcript: str
    translation: str
    frames: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return 0 if self.frames is None else int(self.frames.shape[0])


@dataclass
class TaskDataset:
    """A per-task projection of the corpus; batching picks fields by task."""

    task: Task
    examples: list[TripleExample]

    def __len__(self) -> int:
        return len(self.examples)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Joint token inventory over both languages.

    Ids are fixed: [pad]=0, [eos]=1, [unk]=2, [audio]=3, then one tag per
    language in registration order, then content tokens by descending
    frequency with lexicographic tie-breaks.
    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}, got {tuple(tokens[:4])}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    pad_id, eos_id, unk_id, audio_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def tag_id(self, lang: str) -> int:
        tag = f"[{lang}]"
        if tag not in self._ids:
            raise KeyError(f"unknown language tag {tag}; vocabulary has {self.lang_tags()}")
        return self._ids[tag]

    def lang_tags(self) -> list[str]:
        return [t for t in self._tokens[4:] if t.startswith("[") and t.endswith("]")]

    def encode(self, sentence: str) -> list[int]:
        """Whitespace-tokenized ids with [eos] appended; OOV maps to [unk]."""
        ids = [self._ids.get(tok, self.unk_id) for tok in sentence.split()]
        ids.append(self.eos_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of encode: [eos] and [pad] are dropped."""
        toks = []
        for i in ids:
            if i == self.eos_id or i == self.pad_id:
                continue
            toks.append(self._tokens[int(i)])
        return " ".join(toks)


def build_vocab(sentences: Iterable[str], lang_codes: Sequence[str]) -> Vocabulary:
    """Count whitespace tokens and lay the inventory out in canonical order."""
    counts: Counter[str] = Counter()
    n_sentences = 0
    for s in sentences:
        n_sentences += 1
        counts.update(s.split())
    if n_sentences == 0:
        raise ValueError("build_vocab: need at least one sentence")
    tags = [f"[{code}]" for code in lang_codes]
    content = sorted(counts, key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(SPECIALS) + tags + content)


def write_vocab(vocab: Vocabulary, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, tok in enumerate(vocab.tokens):
            f.write(f"{tok}\t{i}\n")


def read_vocab(path: str | os.PathLike) -> Vocabulary:
    tokens = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].isdigit():
                raise ValueError(f"vocab file {path} line {lineno}: expected 'token<TAB>id'")
            if int(parts[1]) != len(tokens):
                raise ValueError(f"vocab file {path} line {lineno}: ids must ascend from 0")
            tokens.append(parts[0])
    return Vocabulary(tokens)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Knobs for the synthetic corpus generator; identical specs give
    byte-identical corpora."""

    seed: int = 0
    n_triples: int = 1000
    n_ext_pairs: int = 20000
    src_vocab_size: int = 40
    len_min: int = 3
    len_max: int = 8
    frames_min: int = 4
    frames_max: int = 4
    frame_dim: int = 16
    noise_sigma: float = 0.05
    dev_size: int = 200
    test_size: int = 200
    src_lang: str = "en"
    tgt_lang: str = "fr"
    ext_len_extra: int = 4  # external pairs draw lengths from [len_min, len_max + extra]

    def __post_init__(self):
        if self.src_vocab_size < 2:
            raise ValueError("src_vocab_size must be at least 2")
        if not (1 <= self.len_min <= self.len_max):
            raise ValueError("need 1 <= len_min <= len_max")
        if not (1 <= self.frames_min <= self.frames_max):
            raise ValueError("need 1 <= frames_min <= frames_max")
        if min(self.n_triples, self.n_ext_pairs, self.dev_size, self.test_size) < 0:
            raise ValueError("corpus sizes must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SynthCorpus:
    spec: SynthSpec | None
    train: list[TripleExample]
    dev: list[TripleExample]
    test: list[TripleExample]
    ext_pairs: list[TripleExample]
    word_map: dict[str, str]
    prototypes: np.ndarray  # (src_vocab_size, frame_dim) float32

    def all_sentences(self) -> Iterator[str]:
        for ex in self.train + self.ext_pairs:
            yield ex.transcript
            yield ex.translation


def _src_word(i: int) -> str:
    return f"s{i:03d}"


def _tgt_word(i: int) -> str:
    return f"t{i:03d}"


def generate_corpus(spec: SynthSpec) -> SynthCorpus:
    """Draw a full corpus from one seeded stream.

    Translation applies a bijective word dictionary and reverses the word
    order.  Each source word emits k frames (k uniform in
    [frames_min, frames_max]) equal to that word's Gaussian prototype plus
    N(0, noise_sigma^2) noise.
    """
    rng = np.random.default_rng(spec.seed)
    n_words = spec.src_vocab_size
    prototypes = rng.normal(size=(n_words, spec.frame_dim)).astype(np.float32)
    perm = rng.permutation(n_words)
    word_map = {_src_word(i): _tgt_word(int(perm[i])) for i in range(n_words)}

    def draw_sentence(len_lo: int, len_hi: int) -> tuple[np.ndarray, str, str]:
        length = int(rng.integers(len_lo, len_hi + 1))
        word_ids = rng.integers(0, n_words, size=length)
        transcript = " ".join(_src_word(int(w)) for w in word_ids)
        translation = " ".join(_tgt_word(int(perm[w])) for w in word_ids[::-1])
        return word_ids, transcript, translation

    def draw_triple(ex_id: str) -> TripleExample:
        word_ids, transcript, translation = draw_sentence(spec.len_min, spec.len_max)
        ks = rng.integers(spec.frames_min, spec.frames_max + 1, size=word_ids.size)
        frames = np.repeat(prototypes[word_ids], ks, axis=0)
        if spec.noise_sigma > 0:
            frames = frames + rng.normal(size=frames.shape).astype(np.float32) * spec.noise_sigma
        return TripleExample(
            id=ex_id,
            src_lang=spec.src_lang,
            tgt_lang=spec.tgt_lang,
            transcript=transcript,
            translation=translation,
            frames=frames.astype(np.float32),
        )

    splits: dict[str, list[TripleExample]] = {}
    for split, size in (("train", spec.n_triples), ("dev", spec.dev_size), ("test", spec.test_size)):
        splits[split] = [draw_triple(f"{split}-{i:06d}") for i in range(size)]

    ext_pairs = []
    for i in range(spec.n_ext_pairs):
        _, transcript, translation = draw_sentence(spec.len_min, spec.len_max + spec.ext_len_extra)
        ext_pairs.append(
            TripleExample(
                id=f"ext-{i:06d}",
                src_lang=spec.src_lang,
                tgt_lang=spec.tgt_lang,
                transcript=transcript,
                translation=translation,
                frames=None,
            )
        )
    return SynthCorpus(
        spec=spec,
        train=splits["train"],
        dev=splits["dev"],
        test=splits["test"],
        ext_pairs=ext_pairs,
        word_map=word_map,
        prototypes=prototypes,
    )


def task_datasets(triples: list[TripleExample], ext_pairs: list[TripleExample]) -> dict[Task, TaskDataset]:
    """Project a triple corpus (and its external pairs) into the four tasks."""
    triple_ids = {ex.id for ex in triples}
    overlap = triple_ids.intersection(ex.id for ex in ext_pairs)
    if overlap:
        raise ValueError(f"external pairs overlap the triple corpus by id: {sorted(overlap)[:3]}")
    return {
        Task.ST: TaskDataset(Task.ST, triples),
        Task.ASR: TaskDataset(Task.ASR, triples),
        Task.MT: TaskDataset(Task.MT, triples),
        Task.MT_EXT: TaskDataset(Task.MT_EXT, ext_pairs),
    }


# ---------------------------------------------------------------------------
# Manifest + frames sidecar I/O
# ---------------------------------------------------------------------------


def write_frames(path: str | os.PathLike, items: Iterable[tuple[str, np.ndarray]]) -> None:
    """Binary sidecar: magic, then per utterance id, frame count, dim, f32 LE data."""
    with open(path, "wb") as f:
        f.write(FRAMES_MAGIC)
        for ex_id, frames in items:
            id_bytes = ex_id.encode("utf-8")
            n_frames, frame_dim = frames.shape
            f.write(struct.pack("<I", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<II", n_frames, frame_dim))
            f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_frames(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(FRAMES_MAGIC))
        if magic != FRAMES_MAGIC:
            raise ValueError(f"frames file {path}: bad magic {magic!r}")

        def need(n: int) -> bytes:
            buf = f.read(n)
            if len(buf) != n:
                raise ValueError(f"frames file {path}: truncated")
            return buf

        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError(f"frames file {path}: truncated")
            (id_len,) = struct.unpack("<I", head)
            ex_id = need(id_len).decode("utf-8")
            n_frames, frame_dim = struct.unpack("<II", need(8))
            data = need(4 * n_frames * frame_dim)
            out[ex_id] = np.frombuffer(data, dtype="<f4").reshape(n_frames, frame_dim).copy()
    return out


def write_manifest(
    examples: Sequence[TripleExample],
    manifest_path: str | os.PathLike,
    frames_path: str | os.PathLike | None = None,
) -> None:
    """TSV manifest plus (when any example has audio) a frames sidecar.

    The frames_file column stores the sidecar name relative to the manifest
    directory, or "-" for text-only rows.
    """
    with_audio = [ex for ex in examples if ex.frames is not None]
    if with_audio and frames_path is None:
        raise ValueError("write_manifest: examples have frames but no frames_path was given")
    frames_name = "-"
    if with_audio:
        write_frames(frames_path, ((ex.id, ex.frames) for ex in with_audio))
        frames_name = os.path.basename(os.fspath(frames_path))
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for ex in examples:
            col = frames_name if ex.frames is not None else "-"
            f.write(
                f"{ex.id}\t{col}\t{ex.n_frames}\t{ex.src_lang}\t{ex.tgt_lang}\t"
                f"{ex.transcript}\t{ex.translation}\n"
            )


def read_manifest(manifest_path: str | os.PathLike) -> list[TripleExample]:
    """Load a manifest and its sidecars; validates frame counts per id."""
    base = os.path.dirname(os.path.abspath(os.fspath(manifest_path)))
    rows: list[tuple[int, list[str]]] = []
    with open(manifest_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if lineno == 1:
                if tuple(parts) != MANIFEST_COLUMNS:
                    raise ValueError(f"manifest {manifest_path} line 1: bad header {parts}")
                continue
            if len(parts) != len(MANIFEST_COLUMNS):
                raise ValueError(
                    f"manifest {manifest_path} line {lineno}: expected "
                    f"{len(MANIFEST_COLUMNS)} tab-separated fields, got {len(parts)}"
                )
            if not parts[2].isdigit():
                raise ValueError(f"manifest {manifest_path} line {lineno}: n_frames {parts[2]!r} is not an integer")
            rows.append((lineno, parts))

    sidecars: dict[str, dict[str, np.ndarray]] = {}
    examples = []
    for lineno, (ex_id, frames_file, n_frames, src_lang, tgt_lang, transcript, translation) in rows:
        frames = None
        if frames_file != "-":
            if frames_file not in sidecars:
                sidecars[frames_file] = read_frames(os.path.join(base, frames_file))
            table = sidecars[frames_file]
            if ex_id not in table:
                raise KeyError(f"manifest {manifest_path}: id {ex_id} missing from frames file {frames_file}")
            frames = table[ex_id]
        if int(n_frames) != (0 if frames is None else frames.shape[0]):
            raise ValueError(
                f"manifest {manifest_path}: id {ex_id} lists {n_frames} frames but "
                f"the frames file holds {0 if frames is None else frames.shape[0]}"
            )
        examples.append(
            TripleExample(
                id=ex_id,
                src_lang=src_lang,
                tgt_lang=tgt_lang,
                transcript=transcript,
                translation=translation,
                frames=frames,
            )
        )
    return examples


CORPUS_SPLITS = ("train", "dev", "test", "ext")


def save_corpus(corpus: SynthCorpus, out_dir: str | os.PathLike) -> None:
    """Write the four split manifests, their frame sidecars, and vocab.txt."""
    out = os.fspath(out_dir)
    os.makedirs(out, exist_ok=True)
    for split in CORPUS_SPLITS:
        examples = corpus.ext_pairs if split == "ext" else getattr(corpus, split)
        frames_path = None
        if any(ex.frames is not None for ex in examples):
            frames_path = os.path.join(out, f"{split}.frames.bin")
        write_manifest(examples, os.path.join(out, f"{split}.tsv"), frames_path)
    langs = list(dict.fromkeys(c for ex in corpus.train + corpus.ext_pairs for c in (ex.src_lang, ex.tgt_lang)))
    vocab = build_vocab(corpus.all_sentences(), langs)
    write_vocab(vocab, os.path.join(out, "vocab.txt"))


def load_corpus(data_dir: str | os.PathLike) -> tuple[SynthCorpus, Vocabulary]:
    """Read back what save_corpus wrote; generator internals stay empty."""
    base = os.fspath(data_dir)
    splits = {split: read_manifest(os.path.join(base, f"{split}.tsv")) for split in CORPUS_SPLITS}
    frame_dim = next(
        (ex.frames.shape[1] for exs in splits.values() for ex in exs if ex.frames is not None), 0
    )
    corpus = SynthCorpus(
        spec=None,
        train=splits["train"],
        dev=splits["dev"],
        test=splits["test"],
        ext_pairs=splits["ext"],
        word_map={},
        prototypes=np.zeros((0, frame_dim), dtype=np.float32),
    )
    return corpus, read_vocab(os.path.join(base, "vocab.txt"))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded numeric arrays for one step; which fields are set depends on task."""

    task: Task
    example_ids: list[str]
    frames: np.ndarray | None  # (B, T, frame_dim) float32, zero padded
    frame_lengths: np.ndarray | None  # (B,) int
    src_ids: np.ndarray | None  # (B, S) int, tokens + [eos], pad padded, no tag
    src_tag_ids: np.ndarray | None  # (B,) int, source-language tag per row
    bos_ids: np.ndarray  # (B,) int, decoder start tag
    dec_in: np.ndarray  # (B, L) int: [bos, y1..yn] pad padded
    dec_out: np.ndarray  # (B, L) int: [y1..yn, eos] pad padded

    @property
    def size(self) -> int:
        return len(self.example_ids)


def _pad_ids(seqs: list[list[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def source_length(task: Task, ex: TripleExample) -> int:
    """Bucketing key: frame count for audio-source tasks, token count otherwise."""
    if task in (Task.ST, Task.ASR):
        return ex.n_frames
    return len(ex.transcript.split())


def build_batch(task: Task, examples: Sequence[TripleExample], vocab: Vocabulary) -> Batch:
    frames = frame_lengths = src_ids = src_tag_ids = None
    if task in (Task.ST, Task.ASR):
        for ex in examples:
            if ex.frames is None:
                raise ValueError(f"task {task.value} needs audio but example {ex.id} has none")
        lengths = [ex.n_frames for ex in examples]
        t_max = max(lengths)
        frames = np.zeros((len(examples), t_max, examples[0].frames.shape[1]), dtype=np.float32)
        for i, ex in enumerate(examples):
            frames[i, : ex.n_frames] = ex.frames
        frame_lengths = np.asarray(lengths, dtype=np.int64)
    else:
        src_ids = _pad_ids([vocab.encode(ex.transcript) for ex in examples], vocab.pad_id)
        src_tag_ids = np.asarray([vocab.tag_id(ex.src_lang) for ex in examples], dtype=np.int64)

    if task == Task.ASR:
        bos = [vocab.tag_id(ex.src_lang) for ex in examples]
        targets = [vocab.encode(ex.transcript) for ex in examples]
    else:
        bos = [vocab.tag_id(ex.tgt_lang) for ex in examples]
        targets = [vocab.encode(ex.translation) for ex in examples]
    dec_in = _pad_ids([[b] + t[:-1] for b, t in zip(bos, targets)], vocab.pad_id)
    dec_out = _pad_ids(targets, vocab.pad_id)
    return Batch(
        task=task,
        example_ids=[ex.id for ex in examples],
        frames=frames,
        frame_lengths=frame_lengths,
        src_ids=src_ids,
        src_tag_ids=src_tag_ids,
        bos_ids=np.asarray(bos, dtype=np.int64),
        dec_in=dec_in,
        dec_out=dec_out,
    )


def make_batches(
    dataset: TaskDataset,
    vocab: Vocabulary,
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> list[Batch]:
    """One epoch of batches: every example exactly once, length-bucketed.

    A seeded per-epoch permutation is applied before a stable sort on source
    length, so equal-length groupings vary across epochs while padding stays
    minimal; the batch order itself is then shuffled.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not dataset.examples:
        raise ValueError(f"task {dataset.task.value}: dataset is empty")
    task_salt = list(Task).index(dataset.task)
    rng = np.random.default_rng([seed, epoch, task_salt])
    order = list(rng.permutation(len(dataset.examples)))
    order.sort(key=lambda i: source_length(dataset.task, dataset.examples[i]))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)
    return [build_batch(dataset.task, [dataset.examples[i] for i in chunk], vocab) for chunk in chunks]


def batch_stream(dataset: TaskDataset, vocab: Vocabulary, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless stream over epochs 0, 1, 2, ... of make_batches output."""
    epoch = 0
    while True:
        yield from make_batches(dataset, vocab, batch_size, seed, epoch)
        epoch += 1
