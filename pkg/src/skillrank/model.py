"""Spatial-attention skill scoring network.

Per timestep the network fuses the appearance and motion feature maps,
squeezes them to a global descriptor, updates an attention state from that
descriptor and the task state, pools the feature map with the resulting
attention weights, and feeds the pooled vector to the task GRU.  The final
task state is mapped to a scalar score.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .layers import (
    Conv2dParams,
    GruParams,
    InitSpec,
    Layout,
    LinearParams,
    ParamSpec,
    conv2d_forward,
    conv2d_layout,
    gru_layout,
    gru_step,
    init_params,
    linear_forward,
    linear_layout,
)


class Variant(str, enum.Enum):
    FULL = "full"
    NO_ATTENTION = "no-attention"
    NO_RNN_ATT = "no-rnn-att"
    XBAR_ONLY = "xbar-only"
    HTASK_ONLY = "htask-only"

    @property
    def has_attention(self) -> bool:
        return self is not Variant.NO_ATTENTION


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the network.

    ``stream_channels`` lists the channel count of each input stream.  Two
    streams are fused by the two-layer conv; a single stream is taken to be
    already fused and must have ``fused_channels`` channels.
    """

    stream_channels: tuple[int, ...] = (16, 16)
    fused_channels: int = 32
    fusion_hidden: int = 32
    fusion_kernel: int = 2
    fusion_padding: int = 0
    hidden: int = 32
    attend: int = 16
    segments: int = 8
    variant: Variant = Variant.FULL
    fc_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stream_channels", tuple(int(c) for c in self.stream_channels))
        object.__setattr__(self, "variant", Variant(self.variant))
        sizes = (self.fused_channels, self.fusion_hidden, self.fusion_kernel, self.hidden,
                 self.attend, self.segments, *self.stream_channels)
        if not self.stream_channels or min(sizes) < 1 or self.fusion_padding < 0:
            raise ValueError(f"model dimensions must be positive: {self}")
        if len(self.stream_channels) > 2:
            raise ValueError("at most two input streams are supported")
        if not self.two_stream and self.stream_channels[0] != self.fused_channels:
            raise ValueError("a single-stream clip must already carry fused_channels channels")

    @property
    def two_stream(self) -> bool:
        return len(self.stream_channels) == 2

    @property
    def in_channels(self) -> int:
        return sum(self.stream_channels)

    @classmethod
    def paper_scale(cls, **kw) -> "ModelConfig":
        base = dict(stream_channels=(2048, 2048), fused_channels=256, fusion_hidden=512,
                    hidden=128, attend=32, segments=25)
        return cls(**{**base, **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(stream_channels=(3, 3), fused_channels=8, fusion_hidden=8,
                    hidden=16, attend=8, segments=4)
        return cls(**{**base, **kw})

    def grid(self, h: int, w: int) -> tuple[int, int]:
        """Attention grid size for input maps of size ``h x w``."""
        if not self.two_stream:
            return h, w
        k, pad = self.fusion_kernel, self.fusion_padding
        return h + 2 * pad - k + 1, w + 2 * pad - k + 1


def model_layout(config: ModelConfig) -> Layout:
    c, d, a = config.fused_channels, config.hidden, config.attend
    v = config.variant
    layout: Layout = {}
    if config.two_stream:
        layout |= conv2d_layout("fuse.conv1", config.in_channels, config.fusion_hidden,
                                config.fusion_kernel)
        layout |= conv2d_layout("fuse.conv2", config.fusion_hidden, c, 1)
    if v in (Variant.FULL, Variant.XBAR_ONLY, Variant.HTASK_ONLY):
        att_in = {Variant.FULL: c + d, Variant.XBAR_ONLY: c, Variant.HTASK_ONLY: d}[v]
        layout |= gru_layout("att_rnn", att_in, d)
    elif v is Variant.NO_RNN_ATT:
        layout |= linear_layout("att_fc", c + d, d)
    if v.has_attention:
        layout |= {
            "attend.W_xa": ParamSpec((a, c), c, a),
            "attend.b_xa": ParamSpec((a,), c, a, True),
            "attend.W_ha": ParamSpec((a, d), d, a),
            "attend.b_ha": ParamSpec((a,), d, a, True),
            "attend.omega": ParamSpec((1, a), a, 1),
        }
    layout |= gru_layout("task_rnn", c, d)
    layout |= linear_layout("fc", d, 1, bias=config.fc_bias)
    return layout


@dataclass
class AssessmentModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "AssessmentModel":
        return cls(config, init_params(InitSpec(seed=seed), model_layout(config)))

    def check(self) -> None:
        """Raise ``ShapeError`` naming the first tensor that disagrees with the config."""
        layout = model_layout(self.config)
        for name, spec in layout.items():
            if name not in self.params:
                raise ShapeError(f"missing parameter tensor {name}")
            if self.params[name].shape != spec.shape:
                raise ShapeError(f"parameter tensor {name} has shape {self.params[name].shape}, "
                                 f"config expects {spec.shape}")
        extra = sorted(set(self.params) - set(layout))
        if extra:
            raise ShapeError(f"unexpected parameter tensor {extra[0]}")

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "AssessmentModel":
        return AssessmentModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def with_variant(self, variant: Variant | str, seed: int = 0) -> "AssessmentModel":
        """Same parameters under another variant; tensors it lacks are freshly initialized."""
        config = replace(self.config, variant=Variant(variant))
        fresh = init_params(InitSpec(seed=seed), model_layout(config))
        params = {}
        for name, value in fresh.items():
            own = self.params.get(name)
            params[name] = own.copy() if own is not None and own.shape == value.shape else value
        return AssessmentModel(config, params)

    def bind(self, tape: Optional[Tape] = None) -> "Network":
        return Network(self.config, self.params, tape)


class Network:
    """Model parameters as tensors, either tape leaves or constants."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 tape: Optional[Tape] = None):
        self.config = config
        self.tape = tape
        if tape is None:
            self.p = {k: Tensor(v, name=k) for k, v in params.items()}
        else:
            self.p = {k: tape.leaf(v, name=k) for k, v in params.items()}

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, Tensor]) -> "Network":
        net = cls(config, {})
        net.p = dict(tensors)
        net.tape = next((t.tape for t in tensors.values() if t.tape is not None), None)
        return net

    def gru(self, prefix: str) -> GruParams:
        return GruParams.select(self.p, prefix)


@dataclass
class ForwardTrace:
    """Per-timestep intermediates of one forward pass (batch axis kept)."""

    xbar: list[np.ndarray] = field(default_factory=list)
    context: list[np.ndarray] = field(default_factory=list)
    h_att: list[np.ndarray] = field(default_factory=list)
    alpha: list[np.ndarray] = field(default_factory=list)
    pooled: list[np.ndarray] = field(default_factory=list)
    h_task: list[np.ndarray] = field(default_factory=list)
    score: Optional[np.ndarray] = None
    grid: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.h_task)

    def video(self, b: int) -> "ForwardTrace":
        """The trace of one batch entry."""
        pick = lambda xs: [x[b] for x in xs]  # noqa: E731
        return ForwardTrace(pick(self.xbar), pick(self.context), pick(self.h_att),
                            pick(self.alpha), pick(self.pooled), pick(self.h_task),
                            None if self.score is None else self.score[b], self.grid)


# -- per-timestep pieces -----------------------------------------------------

def fuse_features(net: Network, f_s: Tensor, f_t: Optional[Tensor] = None) -> Tensor:
    """Two-layer conv fusion of the two streams; identity for a fused clip."""
    if f_t is None:
        if net.config.two_stream:
            raise ShapeError("a two-stream model needs both appearance and motion features")
        return f_s
    if f_s.shape[:-3] != f_t.shape[:-3] or f_s.shape[-2:] != f_t.shape[-2:]:
        raise ShapeError(f"streams disagree in shape: {f_s.shape} vs {f_t.shape}")
    return _fuse_stacked(net, ad.concat(-3, f_s, f_t))


def _fuse_stacked(net: Network, x: Tensor) -> Tensor:
    if not net.config.two_stream:
        return x
    pad = net.config.fusion_padding
    hidden = ad.relu(conv2d_forward(Conv2dParams.select(net.p, "fuse.conv1", 1, pad), x))
    return conv2d_forward(Conv2dParams.select(net.p, "fuse.conv2"), hidden)


def squeeze(x: Tensor) -> Tensor:
    """Global descriptor: average pool plus max pool over locations."""
    return ad.spatial_avg_pool(x) + ad.spatial_max_pool(x)


def build_context(xbar: Tensor, h_task_prev: Tensor) -> Tensor:
    return ad.concat(-1, xbar, h_task_prev)


def update_attention_state(net: Network, c: Tensor, h_att_prev: Tensor) -> Tensor:
    return gru_step(net.gru("att_rnn"), c, h_att_prev)


def attend(net: Network, x: Tensor, h_att: Tensor) -> tuple[Tensor, Tensor]:
    """Attention weights over the H*W locations of ``x`` and the pooled vector."""
    p = net.p
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    n = len(lead)
    locs = ad.transpose(ad.reshape(x, lead + (c, h * w)), tuple(range(n)) + (n + 1, n))
    proj_x = ad.linear(locs, p["attend.W_xa"], p["attend.b_xa"])
    proj_h = ad.repeat_axis(ad.linear(h_att, p["attend.W_ha"], p["attend.b_ha"]), -2, h * w)
    logits = ad.linear(ad.tanh(proj_x + proj_h), p["attend.omega"])
    alpha = ad.softmax(ad.reshape(logits, lead + (h * w,)))
    return alpha, ad.weighted_spatial_sum(x, alpha)


def step_task(net: Network, v: Tensor, h_task_prev: Tensor) -> Tensor:
    return gru_step(net.gru("task_rnn"), v, h_task_prev)


# -- whole-sequence forward --------------------------------------------------

def forward(net: Network, frames: np.ndarray, trace: bool = False
            ) -> tuple[Tensor, Optional[ForwardTrace]]:
    """Score a batch of sampled sequences ``frames[B, N, C_in, H, W]``.

    Returns scores of shape ``[B]`` and, if requested, the trace.
    """
    cfg = net.config
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 5 or frames.shape[1] < 1:
        raise ShapeError(f"expected frames [B, N, C, H, W] with N >= 1, got {frames.shape}")
    if frames.shape[2] != cfg.in_channels:
        raise ShapeError(f"clip has {frames.shape[2]} channels, model expects {cfg.in_channels}")
    b, n_steps = frames.shape[:2]
    d = cfg.hidden
    variant = cfg.variant
    h_task = Tensor(np.zeros((b, d)))
    h_att = Tensor(np.zeros((b, d)))
    tr = ForwardTrace(grid=cfg.grid(*frames.shape[-2:])) if trace else None
    for t in range(n_steps):
        x = _fuse_stacked(net, Tensor(frames[:, t]))
        if variant is Variant.NO_ATTENTION:
            v = ad.spatial_avg_pool(x)
            xbar = ctx = alpha = None
        else:
            xbar = squeeze(x)
            ctx = build_context(xbar, h_task)
            if variant is Variant.NO_RNN_ATT:
                h_att = ad.tanh(linear_forward(LinearParams.select(net.p, "att_fc"), ctx))
            else:
                att_in = {Variant.FULL: ctx, Variant.XBAR_ONLY: xbar,
                          Variant.HTASK_ONLY: h_task}[variant]
                h_att = update_attention_state(net, att_in, h_att)
            alpha, v = attend(net, x, h_att)
        h_task = step_task(net, v, h_task)
        if tr is not None:
            if xbar is not None:
                tr.xbar.append(xbar.data)
                tr.context.append(ctx.data)
                tr.h_att.append(h_att.data)
                tr.alpha.append(alpha.data)
            tr.pooled.append(v.data)
            tr.h_task.append(h_task.data)
    score = ad.reshape(linear_forward(LinearParams.select(net.p, "fc"), h_task), (b,))
    if tr is not None:
        tr.score = score.data
    return score, tr


def score_frames(model: AssessmentModel, frames: np.ndarray, trace: bool = False
                 ) -> tuple[np.ndarray, Optional[ForwardTrace]]:
    """Inference without recording: scores for ``frames[B, N, C, H, W]``."""
    scores, tr = forward(model.bind(), frames, trace)
    return scores.data, tr


def score_video(clip, model: AssessmentModel, indices=None) -> tuple[float, ForwardTrace]:
    """Score one clip with test-mode segment sampling (or explicit frame indices)."""
    from .data import sample_segments

    if clip.timesteps < 1:
        raise ValueError(f"clip {clip.video_id} is empty")
    if indices is None:
        indices = sample_segments(clip.timesteps, model.config.segments, "test")
    frames = clip.frames(indices)[None]
    scores, tr = score_frames(model, frames, trace=True)
    return float(scores[0]), tr.video(0)


def score_video_variant(clip, model: AssessmentModel, variant: Variant | str,
                        seed: int = 0) -> float:
    variant = Variant(variant)
    if variant is not model.config.variant:
        model = model.with_variant(variant, seed)
    return score_video(clip, model)[0]
