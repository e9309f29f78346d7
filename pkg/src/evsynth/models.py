"""Generator, patch discriminator, ConvLSTM cell and recurrent refiner.

Parameters live in plain ordered dicts of :class:`~evsynth.tensor.Tensor`
keyed by dotted names, so checkpoints and optimizers can walk them directly.
Networks work internally in [-1, 1]; frames enter and leave in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import (ShapeError, Tensor, add, concat, concat_channels, conv2d,
                     conv_transpose2d, leaky_relu, mul, relu, sigmoid_op, slice_channels,
                     tanh_op)

INIT_STD = 0.02
Params = dict


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    input_channels: int = 4
    output_channels: int = 3
    max_channels: int = 512

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("U-Net depth must be >= 2")

    def channels(self, level: int) -> int:
        """Feature width at encoder level 1..depth."""
        return min(self.base_channels * 2 ** (level - 1), self.max_channels)

    def check_input(self, h: int, w: int) -> None:
        m = 2 ** self.depth
        if h % m or w % m:
            raise ShapeError(f"input {h}x{w} is not divisible by 2^{self.depth}")


@dataclass
class RefinerConfig(UNetConfig):
    input_channels: int = 3
    convlstm_channels: int = 64
    convlstm_layers: int = 2
    convlstm_kernel: int = 3

    def __post_init__(self):
        super().__post_init__()
        if self.convlstm_kernel % 2 != 1:
            raise ValueError("ConvLSTM kernel must be odd for same-padding")


@dataclass
class DiscriminatorConfig:
    input_channels: int = 7  # (c + 1) condition + c candidate
    base_channels: int = 16


def _shapes_unet(cfg: UNetConfig, bottleneck_in: Optional[int] = None) -> list:
    shapes = []
    prev = cfg.input_channels
    for i in range(1, cfg.depth + 1):
        ch = cfg.channels(i)
        shapes += [(f"enc{i}.w", (ch, prev, 4, 4)), (f"enc{i}.b", (ch,))]
        prev = ch
    inp = bottleneck_in if bottleneck_in is not None else cfg.channels(cfg.depth)
    for i in range(cfg.depth, 0, -1):
        out = cfg.channels(i - 1) if i > 1 else cfg.base_channels
        shapes += [(f"dec{i}.w", (inp, out, 4, 4)), (f"dec{i}.b", (out,))]
        inp = 2 * out if i > 1 else out + cfg.input_channels
    shapes += [("out.w", (cfg.output_channels, inp, 3, 3)), ("out.b", (cfg.output_channels,))]
    return shapes


def _shapes_convlstm(prefix: str, cin: int, ch: int, k: int) -> list:
    shapes = []
    for gate in "ifoc":
        shapes.append((f"{prefix}.W_{gate}", (ch, cin, k, k)))
    for gate in "ifoc":
        shapes.append((f"{prefix}.U_{gate}", (ch, ch, k, k)))
    for gate in "ifoc":
        shapes.append((f"{prefix}.b_{gate}", (ch,)))
    return shapes


def _shapes_discriminator(cfg: DiscriminatorConfig) -> list:
    b = cfg.base_channels
    chans = [cfg.input_channels, b, 2 * b, 4 * b]
    shapes = []
    for i in range(3):
        shapes += [(f"d{i + 1}.w", (chans[i + 1], chans[i], 4, 4)), (f"d{i + 1}.b", (chans[i + 1],))]
    shapes += [("d4.w", (1, chans[3], 3, 3)), ("d4.b", (1,))]
    return shapes


def param_shapes(config) -> list:
    if isinstance(config, RefinerConfig):
        shapes = _shapes_unet(config, bottleneck_in=config.convlstm_channels)
        cin = config.channels(config.depth)
        for layer in range(1, config.convlstm_layers + 1):
            shapes += _shapes_convlstm(f"lstm{layer}", cin, config.convlstm_channels,
                                       config.convlstm_kernel)
            cin = config.convlstm_channels
        return shapes
    if isinstance(config, UNetConfig):
        return _shapes_unet(config)
    if isinstance(config, DiscriminatorConfig):
        return _shapes_discriminator(config)
    raise TypeError(f"unknown config type {type(config).__name__}")


def init_params(config, seed: int, dtype=np.float32) -> Params:
    """Kernels ~ N(0, 0.02^2), biases zero; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def cast_params(params: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
            for k, v in params.items()}


def to_internal(frame: Tensor) -> Tensor:
    return add(mul(frame, 2.0), -1.0)


def to_storage(x: Tensor) -> Tensor:
    return add(mul(x, 0.5), 0.5)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape, dtype=t.dtype))


# -- U-Net ------------------------------------------------------------------

def unet_encode(params: Params, cfg: UNetConfig, x: Tensor):
    cfg.check_input(x.shape[2], x.shape[3])
    if x.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected {cfg.input_channels} input channels, got {x.shape[1]}")
    skips = []
    h = x
    for i in range(1, cfg.depth + 1):
        h = leaky_relu(conv2d(h, params[f"enc{i}.w"], params[f"enc{i}.b"], 2, 1), 0.2)
        skips.append(h)
    return skips


def unet_decode(params: Params, cfg: UNetConfig, bottleneck: Tensor, skips: Sequence[Tensor],
                x: Tensor, drop_skips: Sequence[int] = ()) -> Tensor:
    """Decoder; ``skips[i-1]`` is encoder level i, level 0 is the network input.

    Levels listed in ``drop_skips`` are fed zeros instead (ablation).
    """
    h = bottleneck
    for i in range(cfg.depth, 0, -1):
        h = relu(conv_transpose2d(h, params[f"dec{i}.w"], params[f"dec{i}.b"], 2, 1))
        skip = skips[i - 2] if i > 1 else x
        if (i - 1) in drop_skips:
            skip = _zeros_like(skip)
        h = concat_channels(h, skip)
    return tanh_op(conv2d(h, params["out.w"], params["out.b"], 1, 1))


class Generator:
    """U-Net mapping a key-frame plus an event plane to the next frame."""

    def __init__(self, config: Optional[UNetConfig] = None, params: Optional[Params] = None,
                 seed: int = 0):
        self.config = config or UNetConfig()
        self.params = params if params is not None else init_params(self.config, seed)

    def __call__(self, keyframe, event_plane, drop_skips: Sequence[int] = ()) -> Tensor:
        return generator_forward(self.params, self.config, keyframe, event_plane, drop_skips)


def generator_forward(params: Params, cfg: UNetConfig, keyframe, event_plane,
                      drop_skips: Sequence[int] = ()) -> Tensor:
    keyframe, event_plane = _as_tensor(keyframe), _as_tensor(event_plane)
    if keyframe.ndim != 4 or event_plane.ndim != 4 or event_plane.shape[1] != 1:
        raise ShapeError("expected keyframe (B,c,H,W) and event plane (B,1,H,W)")
    if keyframe.shape[0] != event_plane.shape[0] or keyframe.shape[2:] != event_plane.shape[2:]:
        raise ShapeError(f"keyframe {keyframe.shape} and events {event_plane.shape} disagree")
    if keyframe.shape[1] + 1 != cfg.input_channels:
        raise ShapeError(f"generator expects {cfg.input_channels - 1}-channel frames")
    x = concat_channels(to_internal(keyframe), event_plane)
    skips = unet_encode(params, cfg, x)
    return to_storage(unet_decode(params, cfg, skips[-1], skips, x, drop_skips))


# -- discriminator ----------------------------------------------------------

class Discriminator:
    def __init__(self, config: Optional[DiscriminatorConfig] = None,
                 params: Optional[Params] = None, seed: int = 1):
        self.config = config or DiscriminatorConfig()
        self.params = params if params is not None else init_params(self.config, seed)

    def __call__(self, condition, candidate) -> Tensor:
        return discriminator_forward(self.params, condition, candidate)


def discriminator_condition(keyframe, event_plane) -> Tensor:
    """The (keyframe (+) event plane) input that both G and D are conditioned on."""
    return concat_channels(to_internal(_as_tensor(keyframe)), _as_tensor(event_plane))


def discriminator_forward(params: Params, condition, candidate) -> Tensor:
    """Patch probabilities for ``candidate`` being a real frame given ``condition``."""
    condition, candidate = _as_tensor(condition), _as_tensor(candidate)
    if condition.shape[0] != candidate.shape[0] or condition.shape[2:] != candidate.shape[2:]:
        raise ShapeError(f"condition {condition.shape} and candidate {candidate.shape} disagree")
    h = concat_channels(condition, to_internal(candidate))
    if h.shape[1] != params["d1.w"].shape[1]:
        raise ShapeError(f"discriminator expects {params['d1.w'].shape[1]} input channels")
    for i in (1, 2, 3):
        h = leaky_relu(conv2d(h, params[f"d{i}.w"], params[f"d{i}.b"], 2, 1), 0.2)
    return sigmoid_op(conv2d(h, params["d4.w"], params["d4.b"], 1, 0))


# -- ConvLSTM ---------------------------------------------------------------

@dataclass
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, h: int, w: int, dtype=np.float32):
        z = np.zeros((batch, channels, h, w), dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()))


def convlstm_gates(x: Tensor, state: ConvLSTMState, params: Params, prefix: str = ""):
    """Input, forget, output gates and candidate memory for one step."""
    p = f"{prefix}." if prefix else ""
    w = concat([params[f"{p}W_{g}"] for g in "ifoc"], axis=0)
    u = concat([params[f"{p}U_{g}"] for g in "ifoc"], axis=0)
    b = concat([params[f"{p}b_{g}"] for g in "ifoc"], axis=0)
    k = w.shape[2]
    ch = params[f"{p}U_i"].shape[0]
    if state.hidden.shape[1] != ch or state.hidden.shape != state.cell.shape:
        raise ShapeError(f"state {state.hidden.shape} does not match {ch} hidden channels")
    if x.shape[0] != state.hidden.shape[0] or x.shape[2:] != state.hidden.shape[2:]:
        raise ShapeError(f"input {x.shape} does not match state {state.hidden.shape}")
    z = add(conv2d(x, w, b, 1, k // 2), conv2d(state.hidden, u, None, 1, k // 2))
    i_s = sigmoid_op(slice_channels(z, 0, ch))
    f_s = sigmoid_op(slice_channels(z, ch, 2 * ch))
    o_s = sigmoid_op(slice_channels(z, 2 * ch, 3 * ch))
    g_s = tanh_op(slice_channels(z, 3 * ch, 4 * ch))
    return i_s, f_s, o_s, g_s


def convlstm_step(x: Tensor, state: ConvLSTMState, params: Params,
                  prefix: str = "") -> ConvLSTMState:
    i_s, f_s, o_s, g_s = convlstm_gates(x, state, params, prefix)
    cell = add(mul(f_s, state.cell), mul(i_s, g_s))
    hidden = mul(o_s, tanh_op(cell))
    return ConvLSTMState(hidden, cell)


def convlstm_param_set(cin: int, channels: int, seed: int, kernel: int = 3,
                       dtype=np.float32) -> Params:
    """Stand-alone parameters for a single cell (names without prefix)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _shapes_convlstm("x", cin, channels, kernel):
        leaf = name.split(".", 1)[1]
        data = (np.zeros(shape, dtype=dtype) if leaf.startswith("b")
                else rng.normal(0.0, INIT_STD, size=shape).astype(dtype))
        params[leaf] = Tensor(data, requires_grad=True, name=leaf)
    return params


# -- recurrent refiner ------------------------------------------------------

class Refiner:
    """U-Net with a stacked ConvLSTM block at the bottleneck."""

    def __init__(self, config: Optional[RefinerConfig] = None, params: Optional[Params] = None,
                 seed: int = 2):
        self.config = config or RefinerConfig()
        self.params = params if params is not None else init_params(self.config, seed)

    def initial_state(self, frame: Tensor) -> list:
        cfg = self.config
        b, _, h, w = frame.shape
        s = 2 ** cfg.depth
        return [ConvLSTMState.zeros(b, cfg.convlstm_channels, h // s, w // s, frame.dtype)
                for _ in range(cfg.convlstm_layers)]

    def step(self, frame, states: list):
        """Refine one frame; returns the output and the advanced states."""
        frame = _as_tensor(frame)
        cfg = self.config
        if frame.ndim != 4 or frame.shape[1] != cfg.input_channels:
            raise ShapeError(f"refiner expects (B,{cfg.input_channels},H,W), got {frame.shape}")
        x = to_internal(frame)
        skips = unet_encode(self.params, cfg, x)
        h = skips[-1]
        new_states = []
        for layer, st in enumerate(states, 1):
            st = convlstm_step(h, st, self.params, f"lstm{layer}")
            new_states.append(st)
            h = st.hidden
        out = unet_decode(self.params, cfg, h, skips, x)
        return to_storage(out), new_states

    def __call__(self, frames: Sequence) -> list:
        return refiner_forward_sequence(self, frames)


def refiner_forward_sequence(refiner: Refiner, frames: Sequence) -> list:
    """Refine an ordered sequence, carrying ConvLSTM state from zero."""
    if len(frames) == 0:
        raise ValueError("refiner needs a non-empty sequence")
    frames = [_as_tensor(f) for f in frames]
    for f in frames[1:]:
        if f.shape != frames[0].shape:
            raise ShapeError("all frames in a sequence must share one shape")
    states = refiner.initial_state(frames[0])
    outs = []
    for f in frames:
        out, states = refiner.step(f, states)
        outs.append(out)
    return outs
