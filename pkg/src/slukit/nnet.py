"""Neural layers: Conformer encoder layer (macaron FFN halves, relative-bias
multi-head self-attention, convolution module), Transformer decoder/encoder
layers, bottleneck adapters, and the strided subsampling front-end.

All layers are pure functions of (weights, input) and work on batched inputs
shaped (B, T, D). Pre-norm residual blocks throughout. Masks are plain numpy
bool arrays (True = valid position) and never require gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

NEG_INF = -np.inf


@dataclass
class RunCtx:
    """Per-forward execution context: dropout is active only in training."""
    training: bool = False
    rng: np.random.Generator | None = None

    def drop(self, x: Tensor, p: float) -> Tensor:
        if self.training and p > 0.0 and self.rng is not None:
            return tc.dropout(x, p, self.rng)
        return x


EVAL_CTX = RunCtx()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


class Linear:
    def __init__(self, w: Tensor, b: Tensor | None = None):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, dtype=np.float32) -> "Linear":
        w = Tensor(xavier_uniform(rng, d_in, d_out, dtype), requires_grad=True)
        b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.w)
        if self.b is not None:
            y = tc.add(y, self.b)
        return y

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b


class LayerNorm:
    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    @classmethod
    def init(cls, d: int, dtype=np.float32) -> "LayerNorm":
        return cls(
            Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_params(self, prefix: str):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta


class FeedForward:
    """Two-matrix MLP with 4x expansion; activation 'swish' or 'relu'."""

    def __init__(self, lin1: Linear, lin2: Linear, activation: str = "swish", dropout: float = 0.0):
        self.lin1 = lin1
        self.lin2 = lin2
        self.activation = activation
        self.dropout = dropout

    @classmethod
    def init(cls, rng, d: int, activation: str = "swish", dropout: float = 0.0, expansion: int = 4,
             dtype=np.float32) -> "FeedForward":
        return cls(Linear.init(rng, d, expansion * d, dtype),
                   Linear.init(rng, expansion * d, d, dtype), activation, dropout)

    def __call__(self, x: Tensor, ctx: RunCtx = EVAL_CTX) -> Tensor:
        h = self.lin1(x)
        h = tc.swish(h) if self.activation == "swish" else tc.relu(h)
        return ctx.drop(self.lin2(h), self.dropout)

    def named_params(self, prefix: str):
        yield from self.lin1.named_params(prefix + ".lin1")
        yield from self.lin2.named_params(prefix + ".lin2")


class Adapter:
    """Bottleneck MLP with residual connection; identity at initialization
    because the up-projection (and its bias) start at zero."""

    def __init__(self, down: Linear, up: Linear):
        self.down = down
        self.up = up

    @classmethod
    def init(cls, rng, d: int, bottleneck: int, dtype=np.float32) -> "Adapter":
        if bottleneck > d // 4:
            raise ValueError(f"adapter bottleneck {bottleneck} exceeds d/4 = {d // 4}")
        down = Linear.init(rng, d, bottleneck, dtype)
        up = Linear(Tensor(np.zeros((bottleneck, d), dtype=dtype), requires_grad=True),
                    Tensor(np.zeros(d, dtype=dtype), requires_grad=True))
        return cls(down, up)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.add(x, self.up(tc.relu(self.down(x))))

    def named_params(self, prefix: str):
        yield from self.down.named_params(prefix + ".down")
        yield from self.up.named_params(prefix + ".up")

    def param_count(self) -> int:
        return sum(p.data.size for _, p in self.named_params("a"))


def _additive_key_mask(key_mask: np.ndarray, dtype) -> np.ndarray:
    """(B, Tk) bool -> (B, 1, 1, Tk) additive mask of 0 / -inf."""
    m = np.zeros(key_mask.shape, dtype=dtype)
    m[~key_mask] = NEG_INF
    return m[:, None, None, :]


def _causal_mask(tq: int, tk: int, dtype) -> np.ndarray:
    m = np.zeros((tq, tk), dtype=dtype)
    m[np.arange(tk)[None, :] > np.arange(tq)[:, None]] = NEG_INF
    return m[None, None, :, :]


class MultiHeadAttention:
    """Scaled dot-product attention with optional causal masking, key padding
    masking, and a learned per-head relative-position bias clipped at ±clip."""

    def __init__(self, heads: int, wq: Linear, wk: Linear, wv: Linear, wo: Linear,
                 rel_bias: Tensor | None = None, rel_clip: int = 64, dropout: float = 0.0):
        self.heads = heads
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.rel_bias = rel_bias  # (2*clip+1, heads) table or None
        self.rel_clip = rel_clip
        self.dropout = dropout

    @classmethod
    def init(cls, rng, d: int, heads: int, relative: bool = False, rel_clip: int = 64,
             dropout: float = 0.0, dtype=np.float32) -> "MultiHeadAttention":
        if d % heads != 0:
            raise ValueError(f"heads {heads} must divide d_model {d}")
        mk = lambda: Linear.init(rng, d, d, dtype)
        rel = None
        if relative:
            rel = Tensor(np.zeros((2 * rel_clip + 1, heads), dtype=dtype), requires_grad=True)
        return cls(heads, mk(), mk(), mk(), mk(), rel, rel_clip, dropout)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, causal: bool = False,
                 key_mask: np.ndarray | None = None, ctx: RunCtx = EVAL_CTX) -> Tensor:
        b, tq, d = q_in.shape
        tk = k_in.shape[1]
        h = self.heads
        dh = d // h

        def split(x: Tensor, t: int) -> Tensor:
            return tc.transpose(tc.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

        q = split(self.wq(q_in), tq)
        k = split(self.wk(k_in), tk)
        v = split(self.wv(v_in), tk)

        logits = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if self.rel_bias is not None:
            offs = np.clip(np.arange(tk)[None, :] - np.arange(tq)[:, None],
                           -self.rel_clip, self.rel_clip) + self.rel_clip
            bias = tc.embedding(self.rel_bias, offs)          # (tq, tk, h)
            bias = tc.reshape(tc.transpose(bias, (2, 0, 1)), (1, h, tq, tk))
            logits = tc.add(logits, bias)
        dtype = logits.data.dtype
        if causal:
            logits = tc.add(logits, Tensor(_causal_mask(tq, tk, dtype)))
        if key_mask is not None:
            if key_mask.shape != (b, tk):
                raise tc.DimensionError(f"key_mask shape {key_mask.shape} != {(b, tk)}")
            logits = tc.add(logits, Tensor(_additive_key_mask(key_mask, dtype)))

        attn = ctx.drop(tc.softmax(logits, axis=-1), self.dropout)
        out = tc.matmul(attn, v)                              # (b, h, tq, dh)
        out = tc.reshape(tc.transpose(out, (0, 2, 1, 3)), (b, tq, d))
        return self.wo(out)

    def named_params(self, prefix: str):
        yield from self.wq.named_params(prefix + ".wq")
        yield from self.wk.named_params(prefix + ".wk")
        yield from self.wv.named_params(prefix + ".wv")
        yield from self.wo.named_params(prefix + ".wo")
        if self.rel_bias is not None:
            yield prefix + ".rel_bias", self.rel_bias


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mha: MultiHeadAttention,
                         causal: bool = False, key_mask: np.ndarray | None = None) -> Tensor:
    return mha(q, k, v, causal=causal, key_mask=key_mask)


class ConvModule:
    """Conformer convolution module: LN -> pointwise GLU -> masked depthwise
    conv -> LN -> swish -> pointwise out."""

    def __init__(self, ln: LayerNorm, pw_in: Linear, kernel: Tensor, conv_bias: Tensor,
                 ln_mid: LayerNorm, pw_out: Linear, dropout: float = 0.0):
        self.ln = ln
        self.pw_in = pw_in
        self.kernel = kernel
        self.conv_bias = conv_bias
        self.ln_mid = ln_mid
        self.pw_out = pw_out
        self.dropout = dropout

    @classmethod
    def init(cls, rng, d: int, kernel_size: int, dropout: float = 0.0, dtype=np.float32) -> "ConvModule":
        a = np.sqrt(1.0 / kernel_size)
        kernel = Tensor(rng.uniform(-a, a, size=(kernel_size, d)).astype(dtype), requires_grad=True)
        bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        return cls(LayerNorm.init(d, dtype), Linear.init(rng, d, 2 * d, dtype), kernel, bias,
                   LayerNorm.init(d, dtype), Linear.init(rng, d, d, dtype), dropout)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None = None, ctx: RunCtx = EVAL_CTX) -> Tensor:
        h = tc.glu(self.pw_in(self.ln(x)))
        if pad_mask is not None:
            h = tc.mul(h, Tensor(pad_mask[..., None].astype(h.data.dtype)))
        h = tc.add(tc.depthwise_conv1d(h, self.kernel), self.conv_bias)
        h = tc.swish(self.ln_mid(h))
        return ctx.drop(self.pw_out(h), self.dropout)

    def named_params(self, prefix: str):
        yield from self.ln.named_params(prefix + ".ln")
        yield from self.pw_in.named_params(prefix + ".pw_in")
        yield prefix + ".kernel", self.kernel
        yield prefix + ".conv_bias", self.conv_bias
        yield from self.ln_mid.named_params(prefix + ".ln_mid")
        yield from self.pw_out.named_params(prefix + ".pw_out")


class ConformerLayer:
    """Macaron: x + ½FFN1 -> MHSA (+adapter) -> Conv (+adapter) -> x + ½FFN2 -> final LN."""

    def __init__(self, ln_ffn1, ffn1, ln_mhsa, mhsa, conv, ln_ffn2, ffn2, ln_final,
                 adapter_mhsa: Adapter | None = None, adapter_conv: Adapter | None = None):
        self.ln_ffn1 = ln_ffn1
        self.ffn1 = ffn1
        self.ln_mhsa = ln_mhsa
        self.mhsa = mhsa
        self.conv = conv
        self.ln_ffn2 = ln_ffn2
        self.ffn2 = ffn2
        self.ln_final = ln_final
        self.adapter_mhsa = adapter_mhsa
        self.adapter_conv = adapter_conv

    @classmethod
    def init(cls, rng, d: int, heads: int, kernel_size: int, rel_clip: int = 64,
             dropout: float = 0.0, adapter_bottleneck: int | None = None,
             dtype=np.float32) -> "ConformerLayer":
        ad1 = ad2 = None
        if adapter_bottleneck:
            ad1 = Adapter.init(rng, d, adapter_bottleneck, dtype)
            ad2 = Adapter.init(rng, d, adapter_bottleneck, dtype)
        return cls(
            LayerNorm.init(d, dtype), FeedForward.init(rng, d, "swish", dropout, dtype=dtype),
            LayerNorm.init(d, dtype),
            MultiHeadAttention.init(rng, d, heads, relative=True, rel_clip=rel_clip,
                                    dropout=dropout, dtype=dtype),
            ConvModule.init(rng, d, kernel_size, dropout, dtype),
            LayerNorm.init(d, dtype), FeedForward.init(rng, d, "swish", dropout, dtype=dtype),
            LayerNorm.init(d, dtype), ad1, ad2,
        )

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None = None, ctx: RunCtx = EVAL_CTX) -> Tensor:
        if pad_mask is not None and pad_mask.shape[-1] != x.shape[1]:
            raise tc.DimensionError(f"pad_mask length {pad_mask.shape[-1]} != T {x.shape[1]}")
        x = tc.add(x, tc.mul(self.ffn1(self.ln_ffn1(x), ctx), 0.5))
        hn = self.ln_mhsa(x)
        h = self.mhsa(hn, hn, hn, key_mask=pad_mask, ctx=ctx)
        if self.adapter_mhsa is not None:
            h = self.adapter_mhsa(h)
        x = tc.add(x, h)
        h = self.conv(x, pad_mask, ctx)
        if self.adapter_conv is not None:
            h = self.adapter_conv(h)
        x = tc.add(x, h)
        x = tc.add(x, tc.mul(self.ffn2(self.ln_ffn2(x), ctx), 0.5))
        return self.ln_final(x)

    def named_params(self, prefix: str):
        yield from self.ln_ffn1.named_params(prefix + ".ln_ffn1")
        yield from self.ffn1.named_params(prefix + ".ffn1")
        yield from self.ln_mhsa.named_params(prefix + ".ln_mhsa")
        yield from self.mhsa.named_params(prefix + ".mhsa")
        yield from self.conv.named_params(prefix + ".conv")
        yield from self.ln_ffn2.named_params(prefix + ".ln_ffn2")
        yield from self.ffn2.named_params(prefix + ".ffn2")
        yield from self.ln_final.named_params(prefix + ".ln_final")
        if self.adapter_mhsa is not None:
            yield from self.adapter_mhsa.named_params(prefix + ".adapter_mhsa")
        if self.adapter_conv is not None:
            yield from self.adapter_conv.named_params(prefix + ".adapter_conv")


class TransformerDecoderLayer:
    """Pre-norm: causal self-attention -> cross-attention -> MLP, each residual."""

    def __init__(self, ln_self, self_attn, ln_cross, cross_attn, ln_ffn, ffn):
        self.ln_self = ln_self
        self.self_attn = self_attn
        self.ln_cross = ln_cross
        self.cross_attn = cross_attn
        self.ln_ffn = ln_ffn
        self.ffn = ffn

    @classmethod
    def init(cls, rng, d: int, heads: int, dropout: float = 0.0, dtype=np.float32):
        return cls(
            LayerNorm.init(d, dtype),
            MultiHeadAttention.init(rng, d, heads, dropout=dropout, dtype=dtype),
            LayerNorm.init(d, dtype),
            MultiHeadAttention.init(rng, d, heads, dropout=dropout, dtype=dtype),
            LayerNorm.init(d, dtype),
            FeedForward.init(rng, d, "relu", dropout, dtype=dtype),
        )

    def __call__(self, y: Tensor, enc: Tensor, enc_mask: np.ndarray | None = None,
                 ctx: RunCtx = EVAL_CTX) -> Tensor:
        h = self.ln_self(y)
        y = tc.add(y, self.self_attn(h, h, h, causal=True, ctx=ctx))
        h = self.ln_cross(y)
        y = tc.add(y, self.cross_attn(h, enc, enc, key_mask=enc_mask, ctx=ctx))
        y = tc.add(y, self.ffn(self.ln_ffn(y), ctx))
        return y

    def named_params(self, prefix: str):
        yield from self.ln_self.named_params(prefix + ".ln_self")
        yield from self.self_attn.named_params(prefix + ".self_attn")
        yield from self.ln_cross.named_params(prefix + ".ln_cross")
        yield from self.cross_attn.named_params(prefix + ".cross_attn")
        yield from self.ln_ffn.named_params(prefix + ".ln_ffn")
        yield from self.ffn.named_params(prefix + ".ffn")


class TransformerEncoderLayer:
    """Pre-norm text encoder layer (cascade NLU): self-attention + MLP."""

    def __init__(self, ln_attn, attn, ln_ffn, ffn):
        self.ln_attn = ln_attn
        self.attn = attn
        self.ln_ffn = ln_ffn
        self.ffn = ffn

    @classmethod
    def init(cls, rng, d: int, heads: int, dropout: float = 0.0, dtype=np.float32):
        return cls(
            LayerNorm.init(d, dtype),
            MultiHeadAttention.init(rng, d, heads, dropout=dropout, dtype=dtype),
            LayerNorm.init(d, dtype),
            FeedForward.init(rng, d, "relu", dropout, dtype=dtype),
        )

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None = None, ctx: RunCtx = EVAL_CTX) -> Tensor:
        h = self.ln_attn(x)
        x = tc.add(x, self.attn(h, h, h, key_mask=pad_mask, ctx=ctx))
        x = tc.add(x, self.ffn(self.ln_ffn(x), ctx))
        return x

    def named_params(self, prefix: str):
        yield from self.ln_attn.named_params(prefix + ".ln_attn")
        yield from self.attn.named_params(prefix + ".attn")
        yield from self.ln_ffn.named_params(prefix + ".ln_ffn")
        yield from self.ffn.named_params(prefix + ".ffn")


class Subsample:
    """Strided front-end: stack `factor` frames, project to d_model.

    Output length is ceil(T/factor); valid lengths map the same way.
    """

    def __init__(self, factor: int, proj: Linear):
        self.factor = factor
        self.proj = proj

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, factor: int, dtype=np.float32) -> "Subsample":
        if factor not in (1, 2, 4):
            raise ValueError(f"subsample factor must be 1, 2 or 4, got {factor}")
        return cls(factor, Linear.init(rng, factor * d_in, d_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] == 0:
            raise tc.DimensionError("subsample: empty input")
        return self.proj(tc.frame_stack(x, self.factor))

    def out_len(self, valid_len: int) -> int:
        return -(-int(valid_len) // self.factor)

    def named_params(self, prefix: str):
        yield from self.proj.named_params(prefix + ".proj")
