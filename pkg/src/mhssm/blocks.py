"""Multi-head state space layers with inter-head gating.

A stage projects the input, splits it into heads, runs an independent
causal state space system per head, gates, concatenates and projects back.
Stages are stacked inside each direction; the bidirectional residual block
concatenates the forward pass with a time-reversed pass of independently
parameterized stages and mixes them back to the model width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module
from .seq import SeqBatch, reverse_time
from .ssm import discretize, fuse_diagonal, init_ssm_rng, ssm_conv
from .tensor import Tensor

GATINGS = ("ihg", "glu", "gelu")


@dataclass
class MhSsmBlockConfig:
    """Shape and behavior of one multi-head residual block."""

    model_dim: int
    heads: int
    stack: int = 2
    state_dim: int = 64
    gating: str = "ihg"
    dropout: float = 0.10
    init_scheme: str = "s4d_lin"

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def validate(self):
        if self.gating not in GATINGS:
            raise ConfigError(f"gating must be one of {GATINGS}, got {self.gating!r}")
        if self.heads < 1 or self.model_dim < 1:
            raise ConfigError("heads and model_dim must be positive")
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by heads {self.heads}"
            )
        if self.gating == "ihg" and self.heads % 2 != 0:
            raise ConfigError("inter-head gating requires an even head count")
        if self.stack < 1:
            raise ConfigError(f"stack must be >= 1, got {self.stack}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def head_split(x: Tensor, proj: Linear, heads: int) -> list[Tensor]:
    """Project with a single learned map, then partition into contiguous heads."""
    dim = x.shape[-1]
    if dim % heads != 0:
        raise ConfigError(f"width {dim} is not divisible by {heads} heads")
    width = dim // heads
    projected = proj(x)
    return [T.narrow(projected, -1, h * width, width) for h in range(heads)]


def inter_head_gate(ys: list[Tensor]) -> list[Tensor]:
    """Half the heads gate the other half: a_h = y_h * sigmoid(y_{h + H/2})."""
    heads = len(ys)
    if heads % 2 != 0:
        raise ConfigError(f"inter-head gating requires an even head count, got {heads}")
    half = heads // 2
    return [T.mul(ys[h], T.sigmoid(ys[h + half])) for h in range(half)]


class MhSsmStage(Module):
    """One split/process/gate/merge pass at a fixed width.

    ``identity_ssm`` is a test hook that replaces every head's system with
    the identity map.
    """

    def __init__(self, cfg: MhSsmBlockConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        d, h = cfg.model_dim, cfg.heads
        self.heads = h
        self.gating = cfg.gating
        self.in_proj = Linear(d, d, rng, dtype=dtype)
        self.ssms = [
            init_ssm_rng(cfg.state_dim, cfg.head_dim, rng, cfg.init_scheme, dtype)
            for _ in range(h)
        ]
        if cfg.gating == "glu":
            self.glu_proj = [Linear(cfg.head_dim, 2 * cfg.head_dim, rng, dtype=dtype) for _ in range(h)]
        else:
            self.glu_proj = []
        gated_width = d // 2 if cfg.gating == "ihg" else d
        self.out_proj = Linear(gated_width, d, rng, dtype=dtype)
        self.identity_ssm = False

    def gated_width(self) -> int:
        return self.out_proj.w.shape[0]

    def _run_heads(self, x: Tensor, lengths) -> list[Tensor]:
        # The heads' channels are mutually independent, so one fused
        # convolution equals running each head's system on its own slice.
        projected = self.in_proj(x)
        if self.identity_ssm:
            full = projected
        else:
            fused = discretize(fuse_diagonal(self.ssms))
            full = ssm_conv(fused, SeqBatch(projected, lengths)).data
        width = projected.shape[-1] // self.heads
        return [T.narrow(full, -1, h * width, width) for h in range(self.heads)]

    def _gate(self, ys: list[Tensor]) -> list[Tensor]:
        if self.gating == "ihg":
            return inter_head_gate(ys)
        if self.gating == "gelu":
            return [T.gelu(y) for y in ys]
        gated = []
        for y, proj in zip(ys, self.glu_proj):
            vg = proj(y)
            width = y.shape[-1]
            value = T.narrow(vg, -1, 0, width)
            gate = T.narrow(vg, -1, width, width)
            gated.append(T.mul(value, T.sigmoid(gate)))
        return gated

    def __call__(self, x: Tensor, lengths) -> Tensor:
        ys = self._run_heads(x, lengths)
        gated = self._gate(ys)
        return self.out_proj(T.concat(gated, axis=-1))


class DirectionalMhSsm(Module):
    """Sequential stack of stages, all running in the same time direction."""

    def __init__(self, cfg: MhSsmBlockConfig, rng: np.random.Generator, dtype=np.float64):
        self.stages = [MhSsmStage(cfg, rng, dtype) for _ in range(cfg.stack)]

    def __call__(self, x: Tensor, lengths) -> Tensor:
        for stage in self.stages:
            x = stage(x, lengths)
        return x

    def set_identity_ssm(self, flag: bool):
        for stage in self.stages:
            stage.identity_ssm = flag


class BidirMhSsmBlock(Module):
    """Pre-norm residual block combining forward and reversed stacks.

    out = x + dropout(linear(gelu(cat[fwd(h), rev(bwd(rev(h)))]))) with
    h = layer_norm(x). The two directions have independent parameters.
    """

    def __init__(self, cfg: MhSsmBlockConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        d = cfg.model_dim
        self.norm = LayerNorm(d, dtype=dtype)
        self.fwd = DirectionalMhSsm(cfg, rng, dtype)
        self.bwd = DirectionalMhSsm(cfg, rng, dtype)
        self.out_proj = Linear(2 * d, d, rng, dtype=dtype)
        self.dropout = cfg.dropout

    def concat_halves(self, x: SeqBatch) -> Tensor:
        """Pre-activation concatenation of the two directions (post-norm)."""
        h = self.norm(x.data)
        forward = self.fwd(h, x.lengths)
        rev = reverse_time(x.with_data(h))
        backward = reverse_time(x.with_data(self.bwd(rev.data, x.lengths))).data
        return T.concat([forward, backward], axis=-1)

    def __call__(self, x: SeqBatch, train_rng: np.random.Generator | None = None) -> SeqBatch:
        branch = self.out_proj(T.gelu(self.concat_halves(x)))
        branch = T.dropout(branch, self.dropout, train_rng)
        return x.with_data(T.add(x.data, branch)).rezero()

    def tie_directions(self):
        """Test hook: copy forward-direction parameters onto the backward one."""
        self.bwd.set_params({
            name: Tensor(value.data.copy(), requires_grad=True)
            for name, value in self.fwd.named_params().items()
        })

    def set_identity_ssm(self, flag: bool):
        self.fwd.set_identity_ssm(flag)
        self.bwd.set_identity_ssm(flag)
