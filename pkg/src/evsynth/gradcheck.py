"""Finite-difference checks of every differentiable op and of the assembled networks.

Each case reduces its output to a scalar through a fixed random projection
and compares the taped gradient of every input against central differences.
Entries whose +-h probe crosses a relu kink are skipped and counted.
Checks run in float64 so that the comparison measures the backward pass and
not float32 round-off in the finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from .models import (ConvLSTMState, Discriminator, DiscriminatorConfig, Generator, UNetConfig,
                     convlstm_param_set, convlstm_step)
from .tensor import (Tape, Tensor, add, backward, bce_loss, concat, conv2d, conv_transpose2d,
                     finite_diff_grad, leaky_relu, mse_loss, mul, relu, sigmoid_op, ssim, sum_all,
                     tanh_op)

STEP = 1e-3
TOLERANCE = 1e-3
FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE and self.checked > 0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(floor, np.abs(numeric))


def check_case(name: str, fn: Callable[[Dict[str, Tensor]], Tensor],
               inputs: Dict[str, Tensor], h: float = STEP) -> GradCheckResult:
    """Compare taped and numerical gradients of scalar ``fn`` for every input."""
    t0 = time.perf_counter()
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = fn(inputs)
    backward(out)
    worst, checked, skipped = 0.0, 0, 0
    for key, t in inputs.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def f(v, key=key):
            return fn({**inputs, key: v})

        kinks = np.zeros(t.shape, dtype=bool)
        numeric = finite_diff_grad(f, t, h, kinks)
        err = relative_error(analytic, numeric)[~kinks]
        if err.size:
            worst = max(worst, float(err.max()))
        checked += int(err.size)
        skipped += int(kinks.sum())
    return GradCheckResult(name, worst, checked, skipped, time.perf_counter() - t0)


def _projected(out: Tensor, seed: int) -> Tensor:
    # same weights for every evaluation of a given output shape
    proj = np.random.default_rng([seed, *out.shape]).normal(size=out.shape)
    return sum_all(mul(out, Tensor(proj)))


def _rand(rng, *shape, low=None, high=None) -> Tensor:
    if low is None:
        return Tensor(rng.normal(size=shape))
    return Tensor(rng.uniform(low, high, size=shape))


def _tiny_generator(seed: int):
    cfg = UNetConfig(depth=2, base_channels=2, input_channels=2, output_channels=1)
    g = Generator(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    # wider weights than the training init so the nonlinearities are exercised
    for p in g.params.values():
        p.data = rng.normal(0.0, 0.3, size=p.shape)
    return g


def default_cases(seed: int = 0) -> list:
    """(name, fn, inputs) triples covering the op grid; shapes stay within 2x4x12x12."""
    rng = np.random.default_rng(seed)
    w = seed + 1
    cases = []

    def unary(name, op, shape=(2, 3, 5, 5)):
        x = _rand(rng, *shape)
        cases.append((name, lambda d, op=op: _projected(op(d["x"]), w), {"x": x}))

    cases.append(("conv2d k3 s1 p1", lambda d: _projected(conv2d(d["x"], d["k"], d["b"], 1, 1), w),
                  {"x": _rand(rng, 2, 3, 6, 6), "k": _rand(rng, 4, 3, 3, 3), "b": _rand(rng, 4)}))
    cases.append(("conv2d k4 s2 p1", lambda d: _projected(conv2d(d["x"], d["k"], d["b"], 2, 1), w),
                  {"x": _rand(rng, 2, 4, 8, 8), "k": _rand(rng, 3, 4, 4, 4), "b": _rand(rng, 3)}))
    cases.append(("conv_transpose2d k4 s2 p1",
                  lambda d: _projected(conv_transpose2d(d["x"], d["k"], d["b"], 2, 1), w),
                  {"x": _rand(rng, 2, 3, 4, 4), "k": _rand(rng, 3, 2, 4, 4), "b": _rand(rng, 2)}))
    unary("relu", relu)
    unary("leaky_relu", lambda x: leaky_relu(x, 0.2))
    unary("tanh", tanh_op)
    unary("sigmoid", sigmoid_op)
    cases.append(("add", lambda d: _projected(add(d["a"], d["b"]), w),
                  {"a": _rand(rng, 2, 3, 4, 4), "b": _rand(rng, 2, 3, 4, 4)}))
    cases.append(("mul", lambda d: _projected(mul(d["a"], d["b"]), w),
                  {"a": _rand(rng, 2, 3, 4, 4), "b": _rand(rng, 2, 3, 4, 4)}))
    cases.append(("concat", lambda d: _projected(concat([d["a"], d["b"]], 1), w),
                  {"a": _rand(rng, 2, 1, 4, 4), "b": _rand(rng, 2, 3, 4, 4)}))
    cases.append(("mse", lambda d: mse_loss(d["p"], d["t"]),
                  {"p": _rand(rng, 2, 3, 4, 4), "t": _rand(rng, 2, 3, 4, 4)}))
    labels = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(np.float64)
    cases.append(("bce", lambda d: bce_loss(d["p"], labels),
                  {"p": _rand(rng, 2, 1, 4, 4, low=0.05, high=0.95)}))
    cases.append(("ssim", lambda d: ssim(d["x"], d["y"]),
                  {"x": _rand(rng, 1, 2, 12, 12, low=0.0, high=1.0),
                   "y": _rand(rng, 1, 2, 12, 12, low=0.0, high=1.0)}))

    g = _tiny_generator(seed)
    key = _rand(rng, 2, 1, 8, 8, low=0.0, high=1.0)
    ev = _rand(rng, 2, 1, 8, 8, low=-1.0, high=1.0)

    def gen_fn(d):
        params = {k: d.get(k, v) for k, v in g.params.items()}
        return _projected(Generator(g.config, params)(d.get("key", key), d.get("ev", ev)), w)

    cases.append(("generator (inputs)", gen_fn, {"key": key, "ev": ev}))
    cases.append(("generator (parameters)", gen_fn, dict(g.params)))

    dcfg = DiscriminatorConfig(input_channels=3, base_channels=2)
    disc = Discriminator(dcfg, seed=seed)
    for p in disc.params.values():
        p.data = rng.normal(0.0, 0.3, size=p.shape)
    cond = _rand(rng, 1, 2, 24, 24)
    cases.append(("discriminator", lambda d: _projected(
        Discriminator(dcfg, {k: d.get(k, v) for k, v in disc.params.items()})(d["cond"], d["cand"]),
        w), {"cond": cond, "cand": _rand(rng, 1, 1, 24, 24, low=0.0, high=1.0)}))

    lstm = convlstm_param_set(2, 3, seed, dtype=np.float64)
    for p in lstm.values():
        p.data = rng.normal(0.0, 0.5, size=p.shape)

    def lstm_fn(d):
        params = {k: d.get(k, v) for k, v in lstm.items()}
        st = convlstm_step(d["x"], ConvLSTMState(d["h"], d["c"]), params)
        return add(_projected(st.hidden, w), _projected(st.cell, w))

    cases.append(("convlstm step", lstm_fn,
                  {"x": _rand(rng, 2, 2, 5, 5), "h": _rand(rng, 2, 3, 5, 5),
                   "c": _rand(rng, 2, 3, 5, 5), **lstm}))
    return cases


def run_gradcheck(seed: int = 0, h: float = STEP) -> list:
    return [check_case(name, fn, inputs, h) for name, fn, inputs in default_cases(seed)]


def format_table(results: list) -> str:
    lines = [f"{'case':<28} {'max rel err':>12} {'checked':>8} {'kinks':>6} {'time':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<28} {r.max_rel_error:12.3e} {r.checked:8d} {r.skipped:6d} "
                     f"{r.seconds:6.2f}s  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
