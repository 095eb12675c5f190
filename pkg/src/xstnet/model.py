"""Bimodal transformer: one encoder/decoder shared by speech and text.

Audio enters through a trainable acoustic encoder (stride-1 conv stack plus
pre-LN self-attention blocks over frames), is subsampled by a factor of 4
(two stride-2 convolutions), and gets an [audio] embedding prepended.  Text
enters through the token table with its language tag prepended and scaled by
sqrt(d_model).  Both meet the same pre-LN encoder; the decoder starts from
the output-language tag, so one set of parameters serves speech translation,
recognition, and text translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import numerics as nm
from .data import Batch, Task, Vocabulary
from .numerics import Tensor

NEG_INF_BIAS = -1e9  # additive mask; exp underflows to exactly 0 after softmax


class ModalityError(ValueError):
    """A task was given a batch without the modality it consumes."""


@dataclass
class AcousticConfig:
    frame_dim: int = 16
    n_conv_layers: int = 2
    n_ctx_layers: int = 1
    kernel: int = 5


@dataclass
class SubsamplerConfig:
    kernel: int = 5
    stride: int = 2
    n_layers: int = 2


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    dropout_rate: float = 0.0
    max_positions: int = 512
    tie_output: bool = True
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    subsampler: SubsamplerConfig = field(default_factory=SubsamplerConfig)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate {self.dropout_rate} must be in [0, 1)")
        if self.max_positions < 2:
            raise ValueError("max_positions must be at least 2")
        if self.acoustic.kernel % 2 != 1 or self.subsampler.kernel % 2 != 1:
            raise ValueError("conv kernels must be odd so padding preserves the length law")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the specials and at least one tag")


# Reference scale from the original setup; desk presets shrink everything
# but keep these on record.
PAPER_SCALE = ModelConfig(
    vocab_size=10000,
    d_model=512,
    n_enc_layers=6,
    n_dec_layers=6,
    n_heads=8,
    d_ffn=2048,
    dropout_rate=0.1,
    max_positions=1024,
    acoustic=AcousticConfig(frame_dim=768, n_conv_layers=2, n_ctx_layers=12),
)


def config_to_dict(cfg: ModelConfig) -> dict[str, str]:
    """Flatten a config into string key/values for checkpoint metadata."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, (AcousticConfig, SubsamplerConfig)):
            for g in fields(v):
                out[f"{f.name}.{g.name}"] = str(getattr(v, g.name))
        else:
            out[f.name] = str(v)
    return out


def config_from_dict(d: dict[str, str]) -> ModelConfig:
    def pick(prefix, cls):
        kw = {}
        for f in fields(cls):
            key = f"{prefix}.{f.name}"
            if key in d:
                kw[f.name] = int(d[key])
        return cls(**kw)

    kw = {}
    for f in fields(ModelConfig):
        if f.name == "acoustic":
            kw[f.name] = pick("acoustic", AcousticConfig)
        elif f.name == "subsampler":
            kw[f.name] = pick("subsampler", SubsamplerConfig)
        elif f.name in d:
            raw = d[f.name]
            if f.type == "bool":
                kw[f.name] = raw == "True"
            elif f.type == "float":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
    return ModelConfig(**kw)


def sinusoidal_positions(n_positions: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table, (n_positions, d_model)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((n_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table.astype(dtype)


def _lengths_to_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


class XstNetModel:
    """Parameter container plus the forward passes for all four tasks."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng([seed, 0])
        self.pe = sinusoidal_positions(config.max_positions, config.d_model, dtype)
        self._init_params()

    # -- parameter management -------------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array.astype(self.dtype), requires_grad=True)

    def _xavier(self, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self._rng.uniform(-limit, limit, size=shape)

    def _init_attn(self, prefix: str) -> None:
        d = self.config.d_model
        for part in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{part}", self._xavier((d, d), d, d))
        for part in ("bq", "bk", "bv", "bo"):
            self._add(f"{prefix}.{part}", np.zeros(d))

    def _init_block(self, prefix: str, cross: bool) -> None:
        d, ffn = self.config.d_model, self.config.d_ffn
        self._add(f"{prefix}.ln1.g", np.ones(d))
        self._add(f"{prefix}.ln1.b", np.zeros(d))
        self._init_attn(f"{prefix}.attn")
        if cross:
            self._add(f"{prefix}.ln2.g", np.ones(d))
            self._add(f"{prefix}.ln2.b", np.zeros(d))
            self._init_attn(f"{prefix}.cross")
        ln_ffn = "ln3" if cross else "ln2"
        self._add(f"{prefix}.{ln_ffn}.g", np.ones(d))
        self._add(f"{prefix}.{ln_ffn}.b", np.zeros(d))
        self._add(f"{prefix}.ffn.w1", self._xavier((d, ffn), d, ffn))
        self._add(f"{prefix}.ffn.b1", np.zeros(ffn))
        self._add(f"{prefix}.ffn.w2", self._xavier((ffn, d), ffn, d))
        self._add(f"{prefix}.ffn.b2", np.zeros(d))

    def _init_params(self) -> None:
        cfg = self.config
        d = cfg.d_model
        self._add("embed.tok", self._rng.normal(0.0, d**-0.5, size=(cfg.vocab_size, d)))
        c_in = cfg.acoustic.frame_dim
        for i in range(cfg.acoustic.n_conv_layers):
            k = cfg.acoustic.kernel
            self._add(f"ac.conv{i}.w", self._xavier((k, c_in, d), k * c_in, k * d))
            self._add(f"ac.conv{i}.b", np.zeros(d))
            c_in = d
        for i in range(cfg.acoustic.n_ctx_layers):
            self._init_block(f"ac.ctx{i}", cross=False)
        if cfg.acoustic.n_ctx_layers:
            self._add("ac.ln.g", np.ones(d))
            self._add("ac.ln.b", np.zeros(d))
        for i in range(cfg.subsampler.n_layers):
            k = cfg.subsampler.kernel
            self._add(f"sub.conv{i}.w", self._xavier((k, d, d), k * d, k * d))
            self._add(f"sub.conv{i}.b", np.zeros(d))
        for i in range(cfg.n_enc_layers):
            self._init_block(f"enc{i}", cross=False)
        self._add("enc.ln.g", np.ones(d))
        self._add("enc.ln.b", np.zeros(d))
        for i in range(cfg.n_dec_layers):
            self._init_block(f"dec{i}", cross=True)
        self._add("dec.ln.g", np.ones(d))
        self._add("dec.ln.b", np.zeros(d))
        self._add("ssl.mask", self._rng.normal(0.0, 0.1, size=(cfg.acoustic.frame_dim,)))
        self._add("ssl.head.w", self._xavier((d, cfg.acoustic.frame_dim), d, cfg.acoustic.frame_dim))
        self._add("ssl.head.b", np.zeros(cfg.acoustic.frame_dim))
        if not cfg.tie_output:
            self._add("out.proj", self._xavier((d, cfg.vocab_size), d, cfg.vocab_size))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the model; unknown names or shape clashes error."""
        unknown = sorted(set(state) - set(self.params))
        if unknown:
            raise KeyError(f"unknown parameter names in state: {unknown[:5]}")
        missing = sorted(set(self.params) - set(state))
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, value in state.items():
            if value.shape != self.params[name].data.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {value.shape} does not match "
                    f"model shape {self.params[name].data.shape}"
                )
        for name, value in state.items():
            self.params[name].data = value.astype(self.dtype).copy()
            self.params[name].zero_grad()

    # -- building blocks -------------------------------------------------------

    def _dropout(self, x: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        if not train or self.config.dropout_rate <= 0.0 or rng is None:
            return x
        return nm.dropout(x, self.config.dropout_rate, rng)

    def _key_bias(self, mask: np.ndarray) -> Tensor:
        # (B, T) bool -> (B, 1, 1, T) additive bias.
        bias = np.where(mask, 0.0, NEG_INF_BIAS).astype(self.dtype)
        return Tensor(bias[:, None, None, :])

    def _causal_bias(self, length: int) -> Tensor:
        upper = np.triu(np.full((length, length), NEG_INF_BIAS, dtype=self.dtype), k=1)
        return Tensor(upper[None, None, :, :])

    def _attention(
        self,
        prefix: str,
        q_in: Tensor,
        kv_in: Tensor,
        bias: Tensor | None,
        trace: dict | None = None,
        trace_key: str = "",
    ) -> Tensor:
        p = self.params
        n_heads = self.config.n_heads
        b, t_q, d = q_in.data.shape
        t_k = kv_in.data.shape[1]
        d_h = d // n_heads
        q = nm.add(nm.matmul(q_in, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = nm.add(nm.matmul(kv_in, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = nm.add(nm.matmul(kv_in, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        qh = nm.transpose(nm.reshape(q, (b, t_q, n_heads, d_h)), (0, 2, 1, 3))
        kh = nm.transpose(nm.reshape(k, (b, t_k, n_heads, d_h)), (0, 2, 3, 1))
        vh = nm.transpose(nm.reshape(v, (b, t_k, n_heads, d_h)), (0, 2, 1, 3))
        scores = nm.scale(nm.matmul(qh, kh), 1.0 / math.sqrt(d_h))
        if bias is not None:
            scores = nm.add(scores, bias)
        attn = nm.softmax(scores, axis=-1)
        if trace is not None:
            trace[trace_key] = attn.data
        ctx = nm.reshape(nm.transpose(nm.matmul(attn, vh), (0, 2, 1, 3)), (b, t_q, d))
        return nm.add(nm.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = nm.gelu(nm.add(nm.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return nm.add(nm.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _encoder_block(self, prefix, x, bias, train, rng, trace, trace_key):
        h = self._ln(f"{prefix}.ln1", x)
        a = self._attention(f"{prefix}.attn", h, h, bias, trace, trace_key)
        x = nm.add(x, self._dropout(a, train, rng))
        f = self._ffn(f"{prefix}.ffn", self._ln(f"{prefix}.ln2", x))
        return nm.add(x, self._dropout(f, train, rng))

    # -- acoustic path ----------------------------------------------------------

    def _acoustic_forward(self, x: Tensor, mask: np.ndarray, train: bool, rng, trace=None) -> Tensor:
        cfg = self.config
        mask_mul = Tensor(mask[:, :, None].astype(self.dtype))
        pad = (cfg.acoustic.kernel - 1) // 2
        for i in range(cfg.acoustic.n_conv_layers):
            x = nm.gelu(nm.conv1d(x, self.params[f"ac.conv{i}.w"], self.params[f"ac.conv{i}.b"], 1, pad))
            x = nm.mul(x, mask_mul)  # keep pad frames exactly zero
        if cfg.acoustic.n_ctx_layers:
            bias = self._key_bias(mask)
            for i in range(cfg.acoustic.n_ctx_layers):
                key = f"ac.ctx{i}.attn"
                x = self._encoder_block(f"ac.ctx{i}", x, bias, train, rng, trace, key)
            x = self._ln("ac.ln", x)
        return x

    def encode_acoustic(
        self, frames: np.ndarray, lengths: np.ndarray, train: bool = False, rng=None, trace=None
    ) -> tuple[Tensor, np.ndarray]:
        """Frames (B, T, frame_dim) -> contextual features (B, T, d); length preserved."""
        frames = np.asarray(frames, dtype=self.dtype)
        if frames.ndim != 3 or frames.shape[2] != self.config.acoustic.frame_dim:
            raise nm.ShapeError(
                f"encode_acoustic: frames {frames.shape} must be (B, T, {self.config.acoustic.frame_dim})"
            )
        mask = _lengths_to_mask(lengths, frames.shape[1])
        x = Tensor(frames * mask[:, :, None])
        return self._acoustic_forward(x, mask, train, rng, trace), mask

    def subsample(self, ctx: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Stride-2 conv stack: lengths go T -> ceil(T/2) per layer (ceil(T/4) total)."""
        cfg = self.config.subsampler
        lengths = np.asarray(lengths)
        x = ctx
        pad = (cfg.kernel - 1) // 2
        for i in range(cfg.n_layers):
            mask = _lengths_to_mask(lengths, x.data.shape[1])
            x = nm.mul(x, Tensor(mask[:, :, None].astype(self.dtype)))
            x = nm.gelu(nm.conv1d(x, self.params[f"sub.conv{i}.w"], self.params[f"sub.conv{i}.b"], cfg.stride, pad))
            lengths = -(-lengths // cfg.stride)
        mask = _lengths_to_mask(lengths, x.data.shape[1])
        x = nm.mul(x, Tensor(mask[:, :, None].astype(self.dtype)))
        return x, lengths

    def embed_audio(self, es: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Prepend the [audio] embedding and add positions; mask comes along."""
        b, t, _ = es.data.shape
        if t + 1 > self.config.max_positions:
            raise ValueError(f"embed_audio: sequence length {t + 1} exceeds max_positions {self.config.max_positions}")
        audio_ids = np.full((b, 1), Vocabulary.audio_id, dtype=np.int64)
        tag = nm.embedding_lookup(self.params["embed.tok"], audio_ids)
        x = nm.concat([tag, es], axis=1)
        x = nm.add(x, Tensor(self.pe[: t + 1]))
        mask = np.concatenate([np.ones((b, 1), dtype=bool), _lengths_to_mask(lengths, t)], axis=1)
        return x, mask

    # -- text path ----------------------------------------------------------------

    def embed_text(self, token_ids: np.ndarray, tag_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """[tag] ++ tokens through the table, scaled by sqrt(d), plus positions."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        tag_ids = np.asarray(tag_ids, dtype=np.int64)
        ids = np.concatenate([tag_ids[:, None], token_ids], axis=1)
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(
                f"embed_text: sequence length {ids.shape[1]} exceeds max_positions {self.config.max_positions}"
            )
        emb = nm.scale(nm.embedding_lookup(self.params["embed.tok"], ids), math.sqrt(self.config.d_model))
        x = nm.add(emb, Tensor(self.pe[: ids.shape[1]]))
        mask = ids != Vocabulary.pad_id
        mask[:, 0] = True
        return x, mask

    # -- encoder / decoder ----------------------------------------------------------

    def encoder_forward(self, x: Tensor, pad_mask: np.ndarray, train: bool = False, rng=None, trace=None) -> Tensor:
        """Pre-LN encoder stack; a zero-layer encoder returns layer_norm(input)."""
        bias = self._key_bias(pad_mask)
        x = self._dropout(x, train, rng)
        for i in range(self.config.n_enc_layers):
            x = self._encoder_block(f"enc{i}", x, bias, train, rng, trace, f"enc{i}.attn")
        return self._ln("enc.ln", x)

    def decoder_forward(
        self,
        dec_in: np.ndarray,
        memory: Tensor,
        memory_mask: np.ndarray,
        train: bool = False,
        rng=None,
        trace=None,
    ) -> Tensor:
        """Causal decoder with cross-attention; returns logits (B, L, V)."""
        dec_in = np.asarray(dec_in, dtype=np.int64)
        b, length = dec_in.shape
        if length > self.config.max_positions:
            raise ValueError(f"decoder_forward: length {length} exceeds max_positions {self.config.max_positions}")
        emb = nm.scale(nm.embedding_lookup(self.params["embed.tok"], dec_in), math.sqrt(self.config.d_model))
        x = nm.add(emb, Tensor(self.pe[:length]))
        x = self._dropout(x, train, rng)
        self_bias = nm.add(self._causal_bias(length), self._key_bias(dec_in != Vocabulary.pad_id))
        cross_bias = self._key_bias(memory_mask)
        for i in range(self.config.n_dec_layers):
            p = f"dec{i}"
            a = self._attention(f"{p}.attn", self._ln(f"{p}.ln1", x), self._ln(f"{p}.ln1", x), self_bias, trace, f"{p}.self")
            x = nm.add(x, self._dropout(a, train, rng))
            c = self._attention(f"{p}.cross", self._ln(f"{p}.ln2", x), memory, cross_bias, trace, f"{p}.cross")
            x = nm.add(x, self._dropout(c, train, rng))
            f = self._ffn(f"{p}.ffn", self._ln(f"{p}.ln3", x))
            x = nm.add(x, self._dropout(f, train, rng))
        x = self._ln("dec.ln", x)
        if self.config.tie_output:
            return nm.matmul(x, nm.transpose(self.params["embed.tok"], (1, 0)))
        return nm.matmul(x, self.params["out.proj"])

    # -- task forward ----------------------------------------------------------------

    def encode_source(self, batch: Batch, train: bool = False, rng=None, trace=None) -> tuple[Tensor, np.ndarray]:
        """Run the modality-specific front end plus the shared encoder."""
        if batch.task in (Task.ST, Task.ASR):
            if batch.frames is None:
                raise ModalityError(f"task {batch.task.value} needs audio frames but the batch has none")
            ctx, _ = self.encode_acoustic(batch.frames, batch.frame_lengths, train, rng, trace)
            es, lengths = self.subsample(ctx, batch.frame_lengths)
            x, mask = self.embed_audio(es, lengths)
        else:
            if batch.src_ids is None:
                raise ModalityError(f"task {batch.task.value} needs source text but the batch has none")
            x, mask = self.embed_text(batch.src_ids, batch.src_tag_ids)
        memory = self.encoder_forward(x, mask, train, rng, trace)
        if trace is not None:
            trace["memory"] = memory.data
            trace["memory_mask"] = mask
        return memory, mask

    def forward_logits(self, batch: Batch, train: bool = False, rng=None, trace=None) -> Tensor:
        memory, mask = self.encode_source(batch, train, rng, trace)
        return self.decoder_forward(batch.dec_in, memory, mask, train, rng, trace)

    def forward_loss(
        self, batch: Batch, label_smoothing: float = 0.0, train: bool = False, rng=None, trace=None
    ) -> Tensor:
        """Mean NLL of the target tokens; identical code path for all tasks."""
        logits = self.forward_logits(batch, train, rng, trace)
        return nm.cross_entropy(logits, batch.dec_out, Vocabulary.pad_id, label_smoothing)

    def ssl_pretrain_loss(
        self, frames: np.ndarray, lengths: np.ndarray, mask_rate: float, rng: np.random.Generator
    ) -> Tensor:
        """Masked-frame reconstruction MSE through the acoustic encoder.

        Masked frames are replaced by a learned vector; the loss is the mean
        squared error over masked positions only (0 when nothing is masked).
        """
        frames = np.asarray(frames, dtype=self.dtype)
        valid = _lengths_to_mask(lengths, frames.shape[1])
        masked = (rng.random(valid.shape) < mask_rate) & valid
        n_masked = int(masked.sum())
        if n_masked == 0:
            return Tensor(np.zeros((), dtype=self.dtype))
        m = masked[:, :, None].astype(self.dtype)
        x = nm.add(Tensor(frames * (1.0 - m)), nm.mul(self.params["ssl.mask"], Tensor(m)))
        ctx = self._acoustic_forward(x, valid, train=False, rng=None)
        pred = nm.add(nm.matmul(ctx, self.params["ssl.head.w"]), self.params["ssl.head.b"])
        err = nm.sub(pred, Tensor(frames))
        sq = nm.mul(nm.mul(err, err), Tensor(m))
        return nm.scale(nm.reduce_sum(sq), 1.0 / (n_masked * frames.shape[2]))
