"""Configurable micro-transformer: encoder, decoders with cross-attention,
and the two assemblies under comparison.

BaselineModel = encoder + one translation decoder. MtlModel = the same
encoder shared by a translation decoder and a separate causal-LM decoder.
Blocks are pre-norm residual; positions are sinusoidal; the embedding table
is shared between input lookups and (by default) every output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from minimt import autodiff as ad
from minimt.autodiff import ShapeError, Tensor
from minimt.data import MonoBatch, ParallelBatch


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_ff: int = 256
    max_len: int = 64
    dropout_rate: float = 0.0
    seed: int = 0
    tie_projections: bool = True

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_heads, self.d_ff, self.max_len) < 1:
            raise ValueError("vocab_size, d_model, n_heads, d_ff and max_len must all be >= 1")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def parameter_count(config: ModelConfig, multitask: bool) -> int:
    """Closed-form size of the parameter registry.

    attention = 4 weight matrices + 4 biases, layer norm = gain + bias,
    feed-forward = two affine maps; an encoder layer holds one attention and
    2 norms, a decoder layer two attentions and 3 norms; each stack adds a
    final norm; untied decoders add a d_model x vocab projection each.
    """
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    attn = 4 * (d * d + d)
    ln = 2 * d
    ff = d * dff + dff + dff * d + d
    enc_layer = attn + 2 * ln + ff
    dec_layer = 2 * attn + 3 * ln + ff
    encoder = config.n_enc_layers * enc_layer + ln
    decoder = config.n_dec_layers * dec_layer + ln
    if not config.tie_projections:
        decoder += d * v
    n_decoders = 2 if multitask else 1
    return v * d + encoder + n_decoders * decoder


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class _Init:
    """Deterministic Xavier-uniform initializer; all random draws flow
    through one generator so identical seeds give bit-identical models."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def matrix(self, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(self.rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)

    @staticmethod
    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    @staticmethod
    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)


NEG_MASK = -1e9  # additive attention mask; large finite value keeps backward NaN-free


def padding_attention_mask(mask: np.ndarray) -> np.ndarray:
    """(B, T) 1/0 mask -> (B, 1, 1, T) additive mask over attention keys."""
    return ((1.0 - mask) * NEG_MASK)[:, None, None, :]


def causal_attention_mask(t: int) -> np.ndarray:
    return (np.triu(np.ones((t, t)), k=1) * NEG_MASK)[None, None, :, :]


class LayerNorm:
    def __init__(self, d):
        self.gain = _Init.ones(d)
        self.bias = _Init.zeros(d)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class MultiHeadAttention:
    def __init__(self, config, init):
        d = config.d_model
        self.n_heads = config.n_heads
        self.d_head = d // config.n_heads
        self.wq, self.wk, self.wv, self.wo = (init.matrix(d, d) for _ in range(4))
        self.bq, self.bk, self.bv, self.bo = (init.zeros(d) for _ in range(4))

    def __call__(self, queries, keys_values, additive_mask):
        b, s, d = queries.shape
        t = keys_values.shape[1]

        def heads(x, w, bias, length):
            proj = ad.matmul(x, w) + bias
            return proj.reshape(b, length, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

        q = heads(queries, self.wq, self.bq, s)
        k = heads(keys_values, self.wk, self.bk, t)
        v = heads(keys_values, self.wv, self.bv, t)
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.d_head))
        if additive_mask is not None:
            scores = scores + Tensor(additive_mask)
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return ad.matmul(ctx, self.wo) + self.bo

    def named_params(self, prefix):
        for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            yield f"{prefix}.{name}", getattr(self, name)


class FeedForward:
    def __init__(self, config, init):
        self.w1 = init.matrix(config.d_model, config.d_ff)
        self.b1 = init.zeros(config.d_ff)
        self.w2 = init.matrix(config.d_ff, config.d_model)
        self.b2 = init.zeros(config.d_model)

    def __call__(self, x):
        return ad.matmul((ad.matmul(x, self.w1) + self.b1).relu(), self.w2) + self.b2

    def named_params(self, prefix):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


class EncoderLayer:
    def __init__(self, config, init):
        self.ln1 = LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config, init)
        self.ln2 = LayerNorm(config.d_model)
        self.ff = FeedForward(config, init)

    def __call__(self, x, pad_mask, drop):
        h = self.ln1(x)
        x = x + drop(self.attn(h, h, pad_mask))
        x = x + drop(self.ff(self.ln2(x)))
        return x

    def named_params(self, prefix):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ff.named_params(f"{prefix}.ff")


class DecoderLayer:
    def __init__(self, config, init):
        self.ln1 = LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(config, init)
        self.ln2 = LayerNorm(config.d_model)
        self.cross_attn = MultiHeadAttention(config, init)
        self.ln3 = LayerNorm(config.d_model)
        self.ff = FeedForward(config, init)

    def __call__(self, x, enc_states, causal_mask, enc_pad_mask, drop):
        h = self.ln1(x)
        x = x + drop(self.self_attn(h, h, causal_mask))
        x = x + drop(self.cross_attn(self.ln2(x), enc_states, enc_pad_mask))
        x = x + drop(self.ff(self.ln3(x)))
        return x

    def named_params(self, prefix):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.self_attn.named_params(f"{prefix}.self_attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.cross_attn.named_params(f"{prefix}.cross_attn")
        yield from self.ln3.named_params(f"{prefix}.ln3")
        yield from self.ff.named_params(f"{prefix}.ff")


class Encoder:
    def __init__(self, config, init):
        self.layers = [EncoderLayer(config, init) for _ in range(config.n_enc_layers)]
        self.ln_out = LayerNorm(config.d_model)

    def __call__(self, x, pad_mask, drop):
        for layer in self.layers:
            x = layer(x, pad_mask, drop)
        return self.ln_out(x)

    def named_params(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")
        yield from self.ln_out.named_params(f"{prefix}.ln_out")


class Decoder:
    def __init__(self, config, init):
        self.layers = [DecoderLayer(config, init) for _ in range(config.n_dec_layers)]
        self.ln_out = LayerNorm(config.d_model)
        self.proj = None if config.tie_projections else init.matrix(config.d_model, config.vocab_size)

    def __call__(self, x, enc_states, causal_mask, enc_pad_mask, embedding, drop):
        for layer in self.layers:
            x = layer(x, enc_states, causal_mask, enc_pad_mask, drop)
        x = self.ln_out(x)
        proj = self.proj if self.proj is not None else embedding.transpose(1, 0)
        return ad.matmul(x, proj)

    def named_params(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")
        yield from self.ln_out.named_params(f"{prefix}.ln_out")
        if self.proj is not None:
            yield f"{prefix}.proj", self.proj


class _TransformerBase:
    """Embedding, positions, training mode and the encoder-side forward."""

    def __init__(self, config: ModelConfig):
        self.config = config
        init = _Init(config.seed)
        self.embedding = init.matrix(config.vocab_size, config.d_model)
        self.encoder = Encoder(config, init)
        self._init = init  # subclasses keep drawing from the same stream
        self.positions = sinusoidal_positions(config.max_len, config.d_model)
        self.training = True
        self._dropout_rng = np.random.default_rng([config.seed, 0xD0])

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def _drop(self, x):
        if self.training and self.config.dropout_rate > 0.0:
            return ad.dropout(x, self.config.dropout_rate, self._dropout_rng)
        return x

    def _embed(self, ids: np.ndarray) -> Tensor:
        b, s = ids.shape
        if s > self.config.max_len:
            raise ShapeError(f"sequence length {s} exceeds max_len {self.config.max_len}")
        x = ad.embedding(self.embedding, ids) * math.sqrt(self.config.d_model)
        return self._drop(x + Tensor(self.positions[:s]))

    def encode_source(self, src_ids: np.ndarray, src_mask: np.ndarray) -> Tensor:
        """Run the encoder; PAD keys are masked out of every attention row."""
        return self.encoder(self._embed(src_ids), padding_attention_mask(src_mask), self._drop)

    def _decode(self, decoder, tgt_ids, enc_states, enc_mask):
        x = self._embed(tgt_ids)
        causal = causal_attention_mask(tgt_ids.shape[1])
        return decoder(x, enc_states, causal, padding_attention_mask(enc_mask),
                       self.embedding, self._drop)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_dict(self):
        return dict(self.named_parameters())


class BaselineModel(_TransformerBase):
    """Encoder plus a single translation decoder (translation-only regime)."""

    multitask = False

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.decoder = Decoder(config, self._init)

    def named_parameters(self):
        yield "embedding", self.embedding
        yield from self.encoder.named_params("encoder")
        yield from self.decoder.named_params("decoder")

    @property
    def translation_decoder(self):
        return self.decoder

    def translation_logits(self, batch: ParallelBatch) -> Tensor:
        enc = self.encode_source(batch.src, batch.src_mask)
        return self._decode(self.decoder, batch.tgt_in, enc, batch.src_mask)


class MtlModel(_TransformerBase):
    """One shared encoder feeding a translation decoder and a CLM decoder."""

    multitask = True

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.decoder_t = Decoder(config, self._init)
        self.decoder_clm = Decoder(config, self._init)

    def named_parameters(self):
        yield "embedding", self.embedding
        yield from self.encoder.named_params("encoder")
        yield from self.decoder_t.named_params("decoder_t")
        yield from self.decoder_clm.named_params("decoder_clm")

    @property
    def translation_decoder(self):
        return self.decoder_t

    def translation_logits(self, batch: ParallelBatch) -> Tensor:
        enc = self.encode_source(batch.src, batch.src_mask)
        return self._decode(self.decoder_t, batch.tgt_in, enc, batch.src_mask)

    def clm_logits(self, batch: MonoBatch) -> Tensor:
        # The encoder sees only [LANG] + [EOS]: the decoder must model the
        # sentence causally instead of copying it through cross-attention.
        b = len(batch)
        stub = np.stack([batch.dec_in[:, 0],
                         np.full(b, batch.eos_id, dtype=np.int64)], axis=1)
        enc_mask = np.ones((b, 2))
        enc = self.encoder(self._embed(stub), padding_attention_mask(enc_mask), self._drop)
        return self._decode(self.decoder_clm, batch.dec_in, enc, enc_mask)


def init_params(config: ModelConfig, multitask: bool = False):
    """Build a freshly initialized model; deterministic in config.seed."""
    return MtlModel(config) if multitask else BaselineModel(config)


def translation_forward(model, batch: ParallelBatch) -> Tensor:
    return model.translation_logits(batch)


def clm_forward(model: MtlModel, batch: MonoBatch) -> Tensor:
    if not getattr(model, "multitask", False):
        raise ValueError("CLM forward needs an MtlModel; the baseline has no CLM decoder")
    return model.clm_logits(batch)


def encoder_forward(model, src_ids: np.ndarray, src_mask: np.ndarray) -> Tensor:
    return model.encode_source(src_ids, src_mask)


def decoder_forward(model, decoder, tgt_ids, enc_states, enc_mask) -> Tensor:
    return model._decode(decoder, tgt_ids, enc_states, enc_mask)


@dataclass
class FreezeSpec:
    """Exact parameter names excluded from optimization."""

    frozen: set = field(default_factory=set)

    @classmethod
    def none(cls):
        return cls(set())

    @classmethod
    def first_half_encoder(cls, model) -> "FreezeSpec":
        """Freeze encoder layers 0 .. n/2-1 and their sublayers (the default
        protocol, scaled to the configured depth)."""
        n_frozen_layers = model.config.n_enc_layers // 2
        prefixes = tuple(f"encoder.layers.{i}." for i in range(n_frozen_layers))
        names = {name for name, _ in model.named_parameters() if name.startswith(prefixes)}
        return cls(names)


def apply_freeze(model, spec: FreezeSpec) -> list:
    """Return (name, tensor) pairs that remain trainable under ``spec``."""
    params = model.param_dict()
    unknown = spec.frozen - params.keys()
    if unknown:
        raise ValueError(f"freeze spec names unknown parameters: {sorted(unknown)[:5]}")
    return [(n, t) for n, t in params.items() if n not in spec.frozen]
