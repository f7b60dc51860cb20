"""Model assembly: the end-to-end audio->semantics model (Conformer encoder +
Transformer decoder), the cascade NLU text->semantics model, parameter
bookkeeping and freezing, and binary checkpoints.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nnet, tokenizer as tok
from . import tensorcore as tc
from .nnet import RunCtx, EVAL_CTX
from .tensorcore import Tensor

CKPT_MAGIC = b"SLCK"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 3
    heads: int = 4
    conv_kernel: int = 9
    subsample_factor: int = 4
    feat_dim: int = 16
    vocab_size: int = 58            # output pieces, specials excluded
    input_vocab_size: int = 64      # NLU text input pieces, specials excluded
    max_target_len: int = 192
    max_source_len: int = 256
    dropout: float = 0.1
    rel_pos_clip: int = 64
    adapter_enabled: bool = False
    adapter_bottleneck: int = 16

    def validate(self) -> None:
        problems = []
        if self.d_model < 1:
            problems.append("d_model must be >= 1")
        if self.heads < 1 or self.d_model % self.heads != 0:
            problems.append(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.conv_kernel % 2 != 1:
            problems.append(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.subsample_factor not in (1, 2, 4):
            problems.append(f"subsample_factor must be 1, 2 or 4, got {self.subsample_factor}")
        if self.adapter_enabled and self.adapter_bottleneck > self.d_model // 4:
            problems.append(
                f"adapter_bottleneck ({self.adapter_bottleneck}) exceeds d_model/4 "
                f"({self.d_model // 4})"
            )
        if min(self.n_enc_layers, self.n_dec_layers, self.vocab_size,
               self.max_target_len, self.feat_dim) < 1:
            problems.append("layer counts, vocab_size, max_target_len, feat_dim must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class EncoderStates:
    hidden: Tensor            # (B, T', D)
    valid_len: np.ndarray     # (B,)

    @property
    def mask(self) -> np.ndarray:
        t = self.hidden.shape[1]
        return np.arange(t)[None, :] < self.valid_len[:, None]


class ConformerEncoder:
    def __init__(self, subsample: nnet.Subsample, layers: list[nnet.ConformerLayer]):
        self.subsample = subsample
        self.layers = layers

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype=np.float32) -> "ConformerEncoder":
        sub = nnet.Subsample.init(rng, cfg.feat_dim, cfg.d_model, cfg.subsample_factor, dtype)
        bneck = cfg.adapter_bottleneck if cfg.adapter_enabled else None
        layers = [
            nnet.ConformerLayer.init(rng, cfg.d_model, cfg.heads, cfg.conv_kernel,
                                     cfg.rel_pos_clip, cfg.dropout, bneck, dtype)
            for _ in range(cfg.n_enc_layers)
        ]
        return cls(sub, layers)

    def __call__(self, feats: np.ndarray, valid: np.ndarray, ctx: RunCtx = EVAL_CTX) -> EncoderStates:
        b, t, _ = feats.shape
        # padded frames are forced to zero so they can never leak into valid outputs
        frame_mask = (np.arange(t)[None, :] < valid[:, None]).astype(feats.dtype)
        x = Tensor(feats * frame_mask[:, :, None])
        h = self.subsample(x)
        out_valid = np.array([self.subsample.out_len(v) for v in valid], dtype=np.int64)
        pad_mask = np.arange(h.shape[1])[None, :] < out_valid[:, None]
        for layer in self.layers:
            h = layer(h, pad_mask, ctx)
        return EncoderStates(h, out_valid)

    def named_params(self, prefix: str = "encoder"):
        yield from self.subsample.named_params(prefix + ".subsample")
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")


class TextEncoder:
    """Transformer encoder over token ids (cascade NLU front half)."""

    def __init__(self, embed: Tensor, pos: Tensor, layers: list[nnet.TransformerEncoderLayer],
                 ln_final: nnet.LayerNorm):
        self.embed = embed
        self.pos = pos
        self.layers = layers
        self.ln_final = ln_final

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype=np.float32) -> "TextEncoder":
        v = cfg.input_vocab_size + len(tok.SPECIALS)
        embed = Tensor(rng.uniform(-0.05, 0.05, size=(v, cfg.d_model)).astype(dtype),
                       requires_grad=True)
        pos = Tensor(rng.uniform(-0.05, 0.05, size=(cfg.max_source_len, cfg.d_model)).astype(dtype),
                     requires_grad=True)
        layers = [nnet.TransformerEncoderLayer.init(rng, cfg.d_model, cfg.heads, cfg.dropout, dtype)
                  for _ in range(cfg.n_enc_layers)]
        return cls(embed, pos, layers, nnet.LayerNorm.init(cfg.d_model, dtype))

    def __call__(self, ids: np.ndarray, valid: np.ndarray, ctx: RunCtx = EVAL_CTX) -> EncoderStates:
        b, t = ids.shape
        if t > self.pos.shape[0]:
            raise ConfigError(f"source length {t} exceeds max_source_len {self.pos.shape[0]}")
        pos_ids = np.broadcast_to(np.arange(t), (b, t))
        h = tc.add(tc.embedding(self.embed, ids), tc.embedding(self.pos, pos_ids))
        pad_mask = np.arange(t)[None, :] < valid[:, None]
        for layer in self.layers:
            h = layer(h, pad_mask, ctx)
        return EncoderStates(self.ln_final(h), valid.astype(np.int64))

    def named_params(self, prefix: str = "encoder"):
        yield prefix + ".embed", self.embed
        yield prefix + ".pos", self.pos
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")
        yield from self.ln_final.named_params(prefix + ".ln_final")


class TransformerDecoder:
    def __init__(self, embed: Tensor, pos: Tensor, layers: list[nnet.TransformerDecoderLayer],
                 ln_final: nnet.LayerNorm, out_proj: nnet.Linear):
        self.embed = embed
        self.pos = pos
        self.layers = layers
        self.ln_final = ln_final
        self.out_proj = out_proj

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype=np.float32) -> "TransformerDecoder":
        v = cfg.vocab_size + len(tok.SPECIALS)
        embed = Tensor(rng.uniform(-0.05, 0.05, size=(v, cfg.d_model)).astype(dtype),
                       requires_grad=True)
        pos = Tensor(rng.uniform(-0.05, 0.05, size=(cfg.max_target_len, cfg.d_model)).astype(dtype),
                     requires_grad=True)
        layers = [nnet.TransformerDecoderLayer.init(rng, cfg.d_model, cfg.heads, cfg.dropout, dtype)
                  for _ in range(cfg.n_dec_layers)]
        return cls(embed, pos, layers, nnet.LayerNorm.init(cfg.d_model, dtype),
                   nnet.Linear.init(rng, cfg.d_model, v, dtype))

    def __call__(self, prefix_ids: np.ndarray, enc: EncoderStates, ctx: RunCtx = EVAL_CTX) -> Tensor:
        b, l = prefix_ids.shape
        if l > self.pos.shape[0]:
            raise ConfigError(f"prefix length {l} exceeds max_target_len {self.pos.shape[0]}")
        pos_ids = np.broadcast_to(np.arange(l), (b, l))
        y = tc.add(tc.embedding(self.embed, prefix_ids), tc.embedding(self.pos, pos_ids))
        enc_mask = enc.mask
        for layer in self.layers:
            y = layer(y, enc.hidden, enc_mask, ctx)
        return self.out_proj(self.ln_final(y))

    def named_params(self, prefix: str = "decoder"):
        yield prefix + ".embed", self.embed
        yield prefix + ".pos", self.pos
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")
        yield from self.ln_final.named_params(prefix + ".ln_final")
        yield from self.out_proj.named_params(prefix + ".out_proj")


class ModelBundle:
    """A model plus its config, tokenizers and per-parameter trainable flags."""

    def __init__(self, kind: str, cfg: ModelConfig, encoder, decoder: TransformerDecoder,
                 tokenizers: dict[str, tok.Vocab] | None = None):
        if kind not in ("e2e", "nlu"):
            raise ConfigError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.encoder = encoder
        self.decoder = decoder
        self.tokenizers = tokenizers or {}
        self.trainable: dict[str, bool] = {name: True for name in self.params()}

    def params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.named_params("encoder"))
        out.update(self.decoder.named_params("decoder"))
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def trainable_param_count(self) -> int:
        return sum(p.data.size for n, p in self.params().items() if self.trainable[n])

    def encode(self, inputs: np.ndarray, valid: np.ndarray, ctx: RunCtx = EVAL_CTX) -> EncoderStates:
        if self.kind == "e2e":
            if inputs.ndim != 3 or inputs.shape[-1] != self.cfg.feat_dim:
                raise ConfigError(
                    f"expected features (B, T, {self.cfg.feat_dim}), got {inputs.shape}"
                )
            return self.encoder(inputs, valid, ctx)
        return self.encoder(inputs, valid, ctx)

    def decode_logits(self, prefix_ids: np.ndarray, enc: EncoderStates,
                      ctx: RunCtx = EVAL_CTX) -> Tensor:
        prefix_ids = np.asarray(prefix_ids)
        if prefix_ids[..., 0].min() != tok.BOS_ID or prefix_ids[..., 0].max() != tok.BOS_ID:
            raise ConfigError("decoder prefix must start with BOS")
        return self.decoder(prefix_ids, enc, ctx)

    def set_trainable(self, name: str, flag: bool) -> None:
        p = self.params()[name]
        self.trainable[name] = flag
        p.requires_grad = flag


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                tokenizers: dict[str, tok.Vocab] | None = None) -> ModelBundle:
    cfg.validate()
    rng = np.random.default_rng(seed)
    enc = ConformerEncoder.init(rng, cfg, dtype)
    dec = TransformerDecoder.init(rng, cfg, dtype)
    return ModelBundle("e2e", cfg, enc, dec, tokenizers)


def build_nlu_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                    tokenizers: dict[str, tok.Vocab] | None = None) -> ModelBundle:
    cfg.validate()
    rng = np.random.default_rng(seed)
    enc = TextEncoder.init(rng, cfg, dtype)
    dec = TransformerDecoder.init(rng, cfg, dtype)
    return ModelBundle("nlu", cfg, enc, dec, tokenizers)


def freeze_encoder(m: ModelBundle, adapters_trainable: bool = False) -> ModelBundle:
    """Flag all encoder parameters non-trainable; optionally keep adapters live."""
    if adapters_trainable and not m.cfg.adapter_enabled:
        raise ConfigError("adapters_trainable requested but config has adapters disabled")
    for name in m.params():
        if not name.startswith("encoder."):
            continue
        keep = adapters_trainable and ".adapter" in name
        m.set_trainable(name, keep)
    return m


def encoder_checksum(m: ModelBundle) -> int:
    import zlib
    crc = 0
    for name in sorted(m.params()):
        if name.startswith("encoder.") and ".adapter" not in name:
            crc = zlib.crc32(m.params()[name].data.tobytes(), crc)
    return crc


def load_encoder_weights(dst: ModelBundle, src: ModelBundle) -> None:
    """Copy non-adapter encoder parameters by name; shapes must match."""
    sp = src.params()
    for name, p in dst.params().items():
        if not name.startswith("encoder.") or ".adapter" in name:
            continue
        if name not in sp:
            raise CheckpointError(f"encoder parameter {name} missing in source model")
        if sp[name].data.shape != p.data.shape:
            raise CheckpointError(
                f"encoder parameter {name}: shape {sp[name].data.shape} vs {p.data.shape}"
            )
        p.data = sp[name].data.copy()


_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FROM_CODE = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(m: ModelBundle, path: str) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta = {
        "kind": m.kind,
        "config": asdict(m.cfg),
        "tokenizers": {k: tok.vocab_to_text(v) for k, v in m.tokenizers.items()},
    }
    mb = json.dumps(meta).encode("utf-8")
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    params = m.params()
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        p = params[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BBB", _DTYPE_CODES[p.data.dtype], 1 if m.trainable[name] else 0,
                              p.data.ndim))
        for dim in p.data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(p.data).astype(p.data.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> ModelBundle:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(mlen).decode("utf-8"))
    cfg = ModelConfig(**meta["config"])
    tokenizers = {k: tok.vocab_from_text(t) for k, t in meta["tokenizers"].items()}
    builder = build_model if meta["kind"] == "e2e" else build_nlu_model
    m = builder(cfg, seed=0, tokenizers=tokenizers)
    params = m.params()
    (n,) = struct.unpack("<I", buf.read(4))
    seen = set()
    for _ in range(n):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        dtype_code, trainable, ndim = struct.unpack("<BBB", buf.read(3))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        dtype = _DTYPE_FROM_CODE[dtype_code]
        count = int(np.prod(shape)) if shape else 1
        payload = buf.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        if name not in params:
            raise CheckpointError(f"{path}: unknown parameter {name}")
        arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        if params[name].data.shape != arr.shape:
            raise CheckpointError(
                f"{path}: {name} shape {arr.shape} does not match model {params[name].data.shape}"
            )
        params[name].data = arr
        m.set_trainable(name, bool(trainable))
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    return m
