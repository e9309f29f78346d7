"""Two-phase training (adversarial G/D, then recurrent R with G frozen) and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .event_io import PathLike, TruncationError, atomic_open
from .models import (Discriminator, Generator, Params, Refiner, discriminator_condition)
from .tensor import (Tape, Tensor, add, backward, bce_loss, mse_loss, mul, no_grad, ssim)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"EVCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    def __init__(self, message: str, names: Sequence[str] = ()):
        super().__init__(message)
        self.names = list(names)


class TrainingError(RuntimeError):
    """Raised on invalid data or a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_g: int = 8
    batch_r: int = 4
    d_update_period: int = 8
    lambda_adv: float = 1.0
    lambda_mse: float = 1000.0
    w_mse: float = 0.5
    w_ssim: float = 0.5
    sequence_length: int = 6
    steps: int = 2000
    steps_r: int = 1000
    seed: int = 42
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.beta1, self.beta2, self.adam_eps) <= 0:
            raise ValueError("optimizer rates must be positive")
        if self.d_update_period < 1:
            raise ValueError("d_update_period must be >= 1")
        if not math.isclose(self.w_mse + self.w_ssim, 1.0, abs_tol=1e-9):
            raise ValueError("w_mse + w_ssim must equal 1")
        if min(self.batch_g, self.batch_r, self.sequence_length) < 1:
            raise ValueError("batch sizes and sequence length must be positive")


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Params, grads: dict, state: AdamState, lr: float, beta1: float,
              beta2: float, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))


def _grads(params: Params) -> dict:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def _zero(*param_sets: Params) -> None:
    for ps in param_sets:
        for p in ps.values():
            p.grad = None


def _check_finite(value: float, what: str, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} loss at step {step}")
    return value


@lru_cache(maxsize=8)
def _epoch_perm(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Indices for 0-based ``step``; a seeded permutation per epoch."""
    idx = []
    pos = step * batch
    while len(idx) < batch:
        epoch, off = divmod(pos, n)
        take = min(batch - len(idx), n - off)
        idx.extend(_epoch_perm(n, seed, epoch)[off:off + take])
        pos += take
    return np.asarray(idx)


def params_checksum(params: Params) -> str:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# -- phase 1 ----------------------------------------------------------------

@dataclass
class PairData:
    """Phase-1 samples: key-frame, event plane and target, all (N, ., H, W)."""

    keyframes: np.ndarray
    events: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        n = len(self.keyframes)
        if n == 0:
            raise TrainingError("empty dataset")
        if len(self.events) != n or len(self.targets) != n:
            raise TrainingError("keyframes, events and targets differ in length")
        if self.keyframes.shape != self.targets.shape:
            raise TrainingError("keyframes and targets differ in shape")
        if self.events.shape[1] != 1 or self.events.shape[2:] != self.keyframes.shape[2:]:
            raise TrainingError(f"event planes {self.events.shape} do not match frames")

    def __len__(self):
        return len(self.keyframes)


@dataclass
class GenTrainResult:
    generator: Generator
    discriminator: Discriminator
    history: list
    d_history: list
    g_opt: AdamState
    d_opt: AdamState
    step: int
    d_steps: int


def train_generator_adversarial(data: PairData, config: TrainConfig,
                                generator: Optional[Generator] = None,
                                discriminator: Optional[Discriminator] = None,
                                g_opt: Optional[AdamState] = None,
                                d_opt: Optional[AdamState] = None,
                                start_step: int = 0, steps: Optional[int] = None,
                                callback: Optional[Callable] = None) -> GenTrainResult:
    """Adversarial training of G with a D step after every ``d_update_period`` G steps.

    Resuming from ``start_step`` with restored parameters and optimizer state
    continues the exact trajectory of an uninterrupted run.
    """
    c = data.keyframes.shape[1]
    G = generator or Generator(_default_gen_config(c), seed=config.seed)
    D = discriminator or Discriminator(_default_disc_config(c), seed=config.seed + 1)
    G.config.check_input(*data.keyframes.shape[2:])
    g_opt = g_opt or AdamState()
    d_opt = d_opt or AdamState()
    total = config.steps if steps is None else steps
    history, d_history = [], []
    d_steps = start_step // config.d_update_period
    hp = (config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    for step in range(start_step, start_step + total):
        idx = batch_indices(len(data), config.batch_g, step, config.seed)
        key = Tensor(data.keyframes[idx])
        ev = Tensor(data.events[idx])
        target = Tensor(data.targets[idx])
        cond = discriminator_condition(key, ev)
        _zero(G.params, D.params)
        with Tape():
            fake = G(key, ev)
            p_fake = D(cond, fake)
            loss = add(mul(bce_loss(p_fake, np.ones(p_fake.shape, p_fake.dtype)), config.lambda_adv),
                       mul(mse_loss(fake, target), config.lambda_mse))
        _check_finite(loss.item(), "generator", step)
        backward(loss)
        adam_step(G.params, _grads(G.params), g_opt, *hp)
        history.append(loss.item())
        if (step + 1) % config.d_update_period == 0:
            _zero(G.params, D.params)
            fake_d = fake.detach()
            with Tape():
                p_real = D(cond, target)
                p_fake = D(cond, fake_d)
                d_loss = mul(add(bce_loss(p_real, np.ones(p_real.shape, p_real.dtype)),
                                 bce_loss(p_fake, np.zeros(p_fake.shape, p_fake.dtype))), 0.5)
            _check_finite(d_loss.item(), "discriminator", step)
            backward(d_loss)
            adam_step(D.params, _grads(D.params), d_opt, *hp)
            d_history.append(d_loss.item())
            d_steps += 1
        _zero(G.params, D.params)
        if callback is not None:
            callback(step, history[-1])
    return GenTrainResult(G, D, history, d_history, g_opt, d_opt, start_step + total, d_steps)


def _default_gen_config(c: int):
    from .models import UNetConfig
    return UNetConfig(input_channels=c + 1, output_channels=c)


def _default_disc_config(c: int):
    from .models import DiscriminatorConfig
    return DiscriminatorConfig(input_channels=2 * c + 1)


# -- phase 2 ----------------------------------------------------------------

@dataclass
class SequenceData:
    """Phase-2 samples: key-frames (N,c,H,W), event planes (N,L,1,H,W), targets (N,L,c,H,W)."""

    keyframes: np.ndarray
    events: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.keyframes) == 0:
            raise TrainingError("empty dataset")
        if not (len(self.keyframes) == len(self.events) == len(self.targets)):
            raise TrainingError("keyframes, events and targets differ in length")
        if self.events.shape[1] != self.targets.shape[1]:
            raise TrainingError("event and target sequences differ in length")

    @property
    def sequence_length(self) -> int:
        return self.targets.shape[1]

    def __len__(self):
        return len(self.keyframes)


def generate_raw(generator: Generator, keyframes: np.ndarray, events: np.ndarray,
                 batch: int = 16) -> np.ndarray:
    """Roll G forward on its own outputs from each key-frame; (N, L, c, H, W)."""
    n, length = events.shape[:2]
    out = np.empty((n, length) + keyframes.shape[1:], dtype=keyframes.dtype)
    with no_grad():
        for lo in range(0, n, batch):
            cur = Tensor(keyframes[lo:lo + batch])
            for s in range(length):
                cur = generator(cur, Tensor(events[lo:lo + batch, s]))
                out[lo:lo + batch, s] = cur.data
    return out


def recurrent_loss(refined: Sequence[Tensor], targets: Sequence[Tensor],
                   w_mse: float, w_ssim: float) -> Tensor:
    """Mean over steps of ``w_mse * mse + w_ssim * (1 - ssim)``."""
    total = None
    for out, tgt in zip(refined, targets):
        term = add(mul(mse_loss(out, tgt), w_mse), mul(add(mul(ssim(out, tgt), -1.0), 1.0), w_ssim))
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / len(refined))


@dataclass
class RecTrainResult:
    refiner: Refiner
    history: list
    opt: AdamState
    step: int


def _refine_in_loop(generator: Generator, refiner: Refiner, keyframes: np.ndarray,
                    events: np.ndarray) -> list:
    """Test-time recursion: G consumes R's previous (detached) output."""
    cur = Tensor(keyframes)
    states = refiner.initial_state(cur)
    outs = []
    for s in range(events.shape[1]):
        with no_grad():
            raw = generator(cur, Tensor(events[:, s]))
        out, states = refiner.step(raw, states)
        outs.append(out)
        cur = out.detach()
    return outs


def train_recurrent(data: SequenceData, generator: Generator, config: TrainConfig,
                    refiner: Optional[Refiner] = None, opt: Optional[AdamState] = None,
                    start_step: int = 0, steps: Optional[int] = None,
                    callback: Optional[Callable] = None,
                    recycle_refined: bool = True) -> RecTrainResult:
    """Train R on sequences produced by the frozen G; G's parameters are not touched.

    With ``recycle_refined`` the sequences are rolled out exactly as at test
    time, G taking R's previous output as its intensity input (no gradient
    flows through G). Otherwise R refines G's own recursive outputs.
    """
    if data.sequence_length != config.sequence_length:
        raise TrainingError(f"sequences have length {data.sequence_length}, "
                            f"expected {config.sequence_length}")
    from .models import RefinerConfig
    c = data.keyframes.shape[1]
    R = refiner or Refiner(RefinerConfig(input_channels=c, output_channels=c),
                           seed=config.seed + 2)
    R.config.check_input(*data.keyframes.shape[2:])
    opt = opt or AdamState()
    total = config.steps_r if steps is None else steps
    # without recycling G's sequences do not depend on R and are produced once
    raw = None if recycle_refined else generate_raw(generator, data.keyframes, data.events)
    history = []
    hp = (config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    for step in range(start_step, start_step + total):
        idx = batch_indices(len(data), config.batch_r, step, config.seed + 1)
        targets = [Tensor(data.targets[idx, s]) for s in range(config.sequence_length)]
        _zero(R.params)
        with Tape():
            if recycle_refined:
                refined = _refine_in_loop(generator, R, data.keyframes[idx], data.events[idx])
            else:
                refined = R([Tensor(raw[idx, s]) for s in range(config.sequence_length)])
            loss = recurrent_loss(refined, targets, config.w_mse, config.w_ssim)
        _check_finite(loss.item(), "recurrent", step)
        backward(loss)
        adam_step(R.params, _grads(R.params), opt, *hp)
        _zero(R.params)
        history.append(loss.item())
        if callback is not None:
            callback(step, history[-1])
    return RecTrainResult(R, history, opt, start_step + total)


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step: int = 0
    version: int = CKPT_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.version == other.version and self.step == other.step
                and self.config == other.config and self.tensors.keys() == other.tensors.keys()
                and all(a.dtype == other.tensors[k].dtype and a.shape == other.tensors[k].shape
                        and a.tobytes() == other.tensors[k].tobytes()
                        for k, a in self.tensors.items()))

    def group(self, prefix: str) -> dict:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has(self, prefix: str) -> bool:
        p = prefix.rstrip("/") + "/"
        return any(k.startswith(p) for k in self.tensors)

    def put_params(self, prefix: str, params: Params) -> None:
        for k, t in params.items():
            self.tensors[f"{prefix}/{k}"] = np.asarray(t.data, dtype=np.float32).copy()

    def put_adam(self, prefix: str, state: AdamState) -> None:
        for k in state.m:
            self.tensors[f"{prefix}/m/{k}"] = state.m[k].astype(np.float32)
            self.tensors[f"{prefix}/v/{k}"] = state.v[k].astype(np.float32)
        self.tensors[f"{prefix}/t"] = np.asarray(state.t, dtype=np.float32)

    def get_adam(self, prefix: str) -> AdamState:
        g = self.group(prefix)
        st = AdamState(t=int(g.pop("t", np.float32(0))))
        for k, v in g.items():
            kind, name = k.split("/", 1)
            (st.m if kind == "m" else st.v)[name] = v.copy()
        return st


def load_params_into(params: Params, stored: dict, what: str = "model") -> None:
    """Copy stored arrays into ``params``; names and shapes must match exactly."""
    unknown = sorted(set(stored) - set(params))
    missing = sorted(set(params) - set(stored))
    if unknown or missing:
        names = unknown + missing
        raise CheckpointMismatch(
            f"{what}: unknown tensors {unknown}, missing tensors {missing}", names)
    for k, arr in stored.items():
        if arr.shape != params[k].shape:
            raise CheckpointMismatch(
                f"{what}: tensor {k} has shape {arr.shape}, expected {params[k].shape}", [k])
        params[k].data = arr.astype(params[k].dtype).copy()


def _encode_config(cfg: dict) -> np.ndarray:
    text = "".join(f"{k}={v}\n" for k, v in sorted(cfg.items()))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_config(arr: np.ndarray) -> dict:
    text = arr.astype(np.uint8).tobytes().decode("utf-8")
    out = {}
    for line in text.splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> None:
    records = dict(ckpt.tensors)
    records["meta/step"] = np.asarray(ckpt.step, dtype=np.float32)
    records["meta/config"] = _encode_config(ckpt.config)
    with atomic_open(path) as fh:
        fh.write(CKPT_MAGIC + struct.pack("<H", ckpt.version))
        for name in sorted(records):
            arr = np.asarray(records[name], dtype="<f4")
            raw = name.encode("utf-8")
            if len(raw) >= 2**16 or arr.ndim > 255:
                raise CheckpointError(f"cannot encode tensor {name!r}")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    if len(data) < 6:
        raise TruncationError("truncated checkpoint header", len(data))
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 6
    tensors = {}

    def need(n):
        if pos + n > len(data):
            raise TruncationError(f"truncated checkpoint at byte {len(data)}", len(data))

    while pos < len(data):
        need(2)
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen + 1)
        try:
            name = data[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor name at byte {pos} is not UTF-8") from None
        pos += nlen
        rank = data[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(4 * count)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.astype(np.float32)
    step = tensors.pop("meta/step", np.float32(0))
    cfg = tensors.pop("meta/config", np.zeros(0, np.float32))
    return Checkpoint(tensors, _decode_config(cfg), int(step), version)


def config_to_flat(prefix: str, obj) -> dict:
    return {f"{prefix}.{f.name}": repr(getattr(obj, f.name)) if isinstance(getattr(obj, f.name), float)
            else str(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def config_from_flat(cls, prefix: str, flat: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key in flat:
            typ = type(f.default) if f.default is not dataclasses.MISSING else str
            kwargs[f.name] = _coerce(flat[key], typ)
    return cls(**kwargs)


def _coerce(value: str, typ):
    if typ is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if typ is int:
        return int(float(value)) if "e" in value.lower() else int(value)
    if typ is float:
        return float(value)
    return value
