"""Full sequence encoders: frontends, block schedule, parameter accounting.

Three residual layer kinds share the same pre-norm skeleton:

* ``transformer``:  [self-attention, feed-forward]
* ``stateformer``:  [bidirectional multi-head SSM, self-attention, feed-forward]
* ``mh_ssm``:       [bidirectional multi-head SSM, feed-forward]

The two subsampling frontends emit ``model_dim`` features at a quarter of the
input frame rate; the ``linear`` frontend keeps the frame rate for token
tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import BidirMhSsmBlock, MhSsmBlockConfig
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module, sinusoidal_encoding
from .seq import SeqBatch
from .tensor import Tensor

FRONTENDS = ("tr", "ms", "linear")
BLOCK_KINDS = ("mh_ssm", "transformer", "stateformer")

_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class EncoderConfig:
    frontend: str = "tr"
    input_dim: int = 80
    model_dim: int = 512
    num_layers: int = 2
    block_kind: str = "mh_ssm"
    attn_heads: int = 8
    ffn_dim: int = 2048
    heads: int = 4
    stack: int = 2
    state_dim: int = 64
    gating: str = "ihg"
    dropout: float = 0.10
    positional: bool | None = None
    fe_heads: int = 4
    fe_stack: int = 2
    fe_state_dim: int = 16
    fe_gating: str = "ihg"
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def use_positional(self) -> bool:
        # Attention-only encoders need an explicit position signal; SSM paths
        # carry position through the recurrence.
        if self.positional is None:
            return self.block_kind == "transformer"
        return self.positional

    def block_config(self, dim: int | None = None) -> MhSsmBlockConfig:
        return MhSsmBlockConfig(
            model_dim=dim or self.model_dim, heads=self.heads, stack=self.stack,
            state_dim=self.state_dim, gating=self.gating, dropout=self.dropout,
        )

    def fe_block_config(self, dim: int) -> MhSsmBlockConfig:
        return MhSsmBlockConfig(
            model_dim=dim, heads=self.fe_heads, stack=self.fe_stack,
            state_dim=self.fe_state_dim, gating=self.fe_gating, dropout=self.dropout,
        )

    def validate(self):
        if self.frontend not in FRONTENDS:
            raise ConfigError(f"frontend must be one of {FRONTENDS}, got {self.frontend!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.input_dim < 1 or self.num_layers < 0:
            raise ConfigError("input_dim must be >= 1 and num_layers >= 0")
        if self.frontend in ("tr", "ms"):
            if self.model_dim % 4 != 0:
                raise ConfigError("subsampling frontends need model_dim divisible by 4")
            self.fe_block_config(self.model_dim // 4).validate()
            self.fe_block_config(self.model_dim // 2).validate()
        if self.block_kind in ("transformer", "stateformer"):
            if self.model_dim % self.attn_heads != 0:
                raise ConfigError(
                    f"model_dim {self.model_dim} not divisible by attn_heads {self.attn_heads}"
                )
            if self.ffn_dim < 1:
                raise ConfigError("ffn_dim must be >= 1")
        if self.block_kind in ("mh_ssm", "stateformer"):
            self.block_config().validate()


# ---------------------------------------------------------------------------
# frontends


def time_reduction(x: SeqBatch, factor: int = 2) -> SeqBatch:
    """Splice groups of ``factor`` adjacent frames into one wider frame.

    Odd tails are covered by zero padding; valid lengths become
    ceil(length / factor).
    """
    if factor < 1:
        raise ConfigError(f"reduction factor must be >= 1, got {factor}")
    bsz, horizon, dim = x.data.shape
    rem = (-horizon) % factor
    data = x.data
    if rem:
        data = T.concat([data, T.zeros((bsz, rem, dim), dtype=data.dtype)], axis=1)
    new_len = (horizon + rem) // factor
    data = T.reshape(data, (bsz, new_len, factor * dim))
    lengths = -(-x.lengths // factor)
    return SeqBatch(data, lengths)


class TimeReductionFrontend(Module):
    """Linear projection to model_dim/4 followed by two frame splices."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.input_dim = cfg.input_dim
        self.proj = Linear(cfg.input_dim, cfg.model_dim // 4, rng, dtype=cfg.np_dtype)

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        if x.dim != self.input_dim:
            raise ConfigError(f"frontend expects {self.input_dim}-dim input, got {x.dim}")
        h = x.with_data(self.proj(x.data)).rezero()
        return time_reduction(time_reduction(h))


class MultiScaleFrontend(Module):
    """Residual multi-head SSM blocks interleaved with frame splices.

    ``skip_blocks`` is a test hook that removes the residual blocks, which
    reduces this frontend to the plain time-reduction one.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.input_dim = cfg.input_dim
        quarter, half = cfg.model_dim // 4, cfg.model_dim // 2
        self.proj = Linear(cfg.input_dim, quarter, rng, dtype=cfg.np_dtype)
        self.blocks_lo = [
            BidirMhSsmBlock(cfg.fe_block_config(quarter), rng, cfg.np_dtype) for _ in range(2)
        ]
        self.blocks_hi = [
            BidirMhSsmBlock(cfg.fe_block_config(half), rng, cfg.np_dtype) for _ in range(2)
        ]
        self.skip_blocks = False

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        if x.dim != self.input_dim:
            raise ConfigError(f"frontend expects {self.input_dim}-dim input, got {x.dim}")
        h = x.with_data(self.proj(x.data)).rezero()
        if not self.skip_blocks:
            for block in self.blocks_lo:
                h = block(h, train_rng)
        h = time_reduction(h)
        if not self.skip_blocks:
            for block in self.blocks_hi:
                h = block(h, train_rng)
        return time_reduction(h)


class LinearFrontend(Module):
    """Projection to model_dim with no subsampling (token tasks)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.input_dim = cfg.input_dim
        self.proj = Linear(cfg.input_dim, cfg.model_dim, rng, dtype=cfg.np_dtype)

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        if x.dim != self.input_dim:
            raise ConfigError(f"frontend expects {self.input_dim}-dim input, got {x.dim}")
        return x.with_data(self.proj(x.data)).rezero()


# ---------------------------------------------------------------------------
# residual blocks


class SelfAttentionBlock(Module):
    """Pre-norm residual multi-head scaled dot-product attention.

    Keys at padded positions are masked out; scores scale by
    1/sqrt(head_dim). Fully padded sequences are rejected.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 dropout: float = 0.0, dtype=np.float64):
        if dim % heads != 0:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = LayerNorm(dim, dtype=dtype)
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)
        self.dropout = dropout

    def _heads_view(self, x: Tensor, bsz: int, horizon: int) -> Tensor:
        dh = x.shape[-1] // self.heads
        return T.transpose(T.reshape(x, (bsz, horizon, self.heads, dh)), (0, 2, 1, 3))

    def attend(self, x: SeqBatch, collect: dict | None = None) -> Tensor:
        """Attention branch on the normalized input (no residual)."""
        if (x.lengths == 0).any():
            raise ValueError("attention received a fully padded sequence")
        bsz, horizon, dim = x.data.shape
        dh = dim // self.heads
        h = self.norm(x.data)
        q = self._heads_view(self.wq(h), bsz, horizon)
        k = self._heads_view(self.wk(h), bsz, horizon)
        v = self._heads_view(self.wv(h), bsz, horizon)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if (x.lengths == horizon).all():
            attn = T.softmax(scores)
        else:
            key_mask = (np.arange(horizon)[None, :] < x.lengths[:, None])[:, None, None, :]
            attn = T.softmax(scores, mask=key_mask)
        if collect is not None:
            collect["weights"] = attn.data
            collect["values"] = v.data
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, horizon, dim))
        return self.wo(ctx)

    def attention_weights(self, x: SeqBatch) -> np.ndarray:
        """(batch, heads, query, key) attention weights, for verification."""
        info: dict = {}
        self.attend(x, collect=info)
        return info["weights"]

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        branch = T.dropout(self.attend(x), self.dropout, train_rng)
        return x.with_data(T.add(x.data, branch)).rezero()


class FeedForwardBlock(Module):
    """Pre-norm residual two-layer net with the exact-gaussian gelu."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 dropout: float = 0.0, dtype=np.float64):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.lin1 = Linear(dim, hidden, rng, dtype=dtype)
        self.lin2 = Linear(hidden, dim, rng, dtype=dtype)
        self.dropout = dropout

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        branch = self.lin2(T.gelu(self.lin1(self.norm(x.data))))
        branch = T.dropout(branch, self.dropout, train_rng)
        return x.with_data(T.add(x.data, branch)).rezero()


class TransformerLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.attn = SelfAttentionBlock(cfg.model_dim, cfg.attn_heads, rng,
                                       cfg.dropout, cfg.np_dtype)
        self.ffn = FeedForwardBlock(cfg.model_dim, cfg.ffn_dim, rng,
                                    cfg.dropout, cfg.np_dtype)

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        return self.ffn(self.attn(x, train_rng), train_rng)


class StateformerLayer(Module):
    """Transformer layer with a bidirectional SSM residual block in front.

    ``skip_ssm`` is a test hook; with the SSM branch removed the layer is
    exactly its inner transformer layer.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.ssm_block = BidirMhSsmBlock(cfg.block_config(), rng, cfg.np_dtype)
        self.inner = TransformerLayer(cfg, rng)
        self.skip_ssm = False

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        if not self.skip_ssm:
            x = self.ssm_block(x, train_rng)
        return self.inner(x, train_rng)


class MhSsmLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.ssm_block = BidirMhSsmBlock(cfg.block_config(), rng, cfg.np_dtype)
        self.ffn = FeedForwardBlock(cfg.model_dim, cfg.ffn_dim, rng,
                                    cfg.dropout, cfg.np_dtype)

    def __call__(self, x: SeqBatch, train_rng=None) -> SeqBatch:
        return self.ffn(self.ssm_block(x, train_rng), train_rng)


_LAYERS = {
    "transformer": TransformerLayer,
    "stateformer": StateformerLayer,
    "mh_ssm": MhSsmLayer,
}

_FRONTENDS = {
    "tr": TimeReductionFrontend,
    "ms": MultiScaleFrontend,
    "linear": LinearFrontend,
}


class Encoder(Module):
    """Frontend, block schedule and closing layer norm."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(seed))
        self.frontend = _FRONTENDS[cfg.frontend](cfg, rng)
        self.layers = [_LAYERS[cfg.block_kind](cfg, rng) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(cfg.model_dim, dtype=cfg.np_dtype)

    def __call__(self, x: SeqBatch, train_rng: np.random.Generator | None = None) -> SeqBatch:
        h = self.frontend(x, train_rng)
        if self.cfg.use_positional:
            table = sinusoidal_encoding(h.length, h.dim, h.data.dtype)
            h = h.with_data(T.add(h.data, Tensor._wrap(table[None]))).rezero()
        for layer in self.layers:
            h = layer(h, train_rng)
        return h.with_data(self.final_norm(h.data)).rezero()


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> Encoder:
    return Encoder(cfg, seed)


def run_encoder(enc: Encoder, x: SeqBatch) -> SeqBatch:
    return enc(x)


# ---------------------------------------------------------------------------
# analytic parameter accounting


def _linear_count(i: int, o: int) -> int:
    return i * o + o


def _norm_count(d: int) -> int:
    return 2 * d


def _ssm_count(channels: int, state_dim: int) -> int:
    # six (channels, state) arrays plus per-channel skip and step size
    return 6 * channels * state_dim + 2 * channels


def _stage_count(block: MhSsmBlockConfig) -> int:
    d, h = block.model_dim, block.heads
    total = _linear_count(d, d)
    total += h * _ssm_count(block.head_dim, block.state_dim)
    if block.gating == "glu":
        total += h * _linear_count(block.head_dim, 2 * block.head_dim)
    gated = d // 2 if block.gating == "ihg" else d
    total += _linear_count(gated, d)
    return total


def bidir_block_count(block: MhSsmBlockConfig) -> int:
    d = block.model_dim
    return _norm_count(d) + 2 * block.stack * _stage_count(block) + _linear_count(2 * d, d)


def _attention_count(d: int) -> int:
    return _norm_count(d) + 4 * _linear_count(d, d)


def _ffn_count(d: int, hidden: int) -> int:
    return _norm_count(d) + _linear_count(d, hidden) + _linear_count(hidden, d)


def _layer_count(cfg: EncoderConfig) -> int:
    d = cfg.model_dim
    total = _ffn_count(d, cfg.ffn_dim)
    if cfg.block_kind in ("transformer", "stateformer"):
        total += _attention_count(d)
    if cfg.block_kind in ("mh_ssm", "stateformer"):
        total += bidir_block_count(cfg.block_config())
    return total


def _frontend_count(cfg: EncoderConfig) -> int:
    d = cfg.model_dim
    if cfg.frontend == "linear":
        return _linear_count(cfg.input_dim, d)
    total = _linear_count(cfg.input_dim, d // 4)
    if cfg.frontend == "ms":
        total += 2 * bidir_block_count(cfg.fe_block_config(d // 4))
        total += 2 * bidir_block_count(cfg.fe_block_config(d // 2))
    return total


def param_count(cfg: EncoderConfig) -> dict[str, int]:
    """Exact analytic parameter counts, matching a built encoder one-for-one."""
    cfg.validate()
    frontend = _frontend_count(cfg)
    layers = cfg.num_layers * _layer_count(cfg)
    final = _norm_count(cfg.model_dim)
    return {
        "frontend": frontend,
        "layers": layers,
        "final_norm": final,
        "total": frontend + layers + final,
    }
