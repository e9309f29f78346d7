"""Toy dataset generation, dataset loading, sequence synthesis and configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .event_core import (DEFAULT_CONTRAST_CLIP, DEFAULT_EPS, DEFAULT_LEVELS, EVENT_DTYPE,
                         EventFrame, event_frame_to_model_input, quantize_log_diff,
                         simulate_event_frame)
from .event_io import (PathLike, SequenceManifest, decode_image, encode_image, load_frames,
                       load_sequence, read_manifest, simulated_event_frames, write_events,
                       write_image, write_manifest)
from .models import DiscriminatorConfig, RefinerConfig, UNetConfig
from .tensor import Tensor, no_grad
from .training import PairData, SequenceData, TrainConfig, config_from_flat, config_to_flat

DEFAULT_PERIOD_NS = 10_000_000
DEFAULT_SEED = 42


# -- configuration ----------------------------------------------------------

@dataclass
class EventSimConfig:
    eps: float = DEFAULT_EPS
    contrast_clip: float = DEFAULT_CONTRAST_CLIP
    levels: int = DEFAULT_LEVELS

    def __post_init__(self):
        if not self.eps > 0 or not self.contrast_clip > 0:
            raise ValueError("eps and contrast_clip must be positive")
        if self.levels < 3 or self.levels % 2 == 0:
            raise ValueError("levels must be odd and >= 3")


@dataclass
class ToySceneConfig:
    size: int = 64
    frames: int = 7
    sequences: int = 200
    shapes: int = 4
    min_radius: float = 5.0
    max_radius: float = 11.0
    max_speed: float = 3.0
    channels: int = 3
    period_ns: int = DEFAULT_PERIOD_NS
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a toy sequence needs at least 2 frames")
        if self.size <= 0 or self.sequences < 0 or self.shapes < 0:
            raise ValueError("size, sequences and shapes must be non-negative")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


@dataclass
class PipelineConfig:
    gen: UNetConfig = field(default_factory=UNetConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    ref: RefinerConfig = field(default_factory=RefinerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    events: EventSimConfig = field(default_factory=EventSimConfig)
    toy: ToySceneConfig = field(default_factory=ToySceneConfig)

    SECTIONS = ("gen", "disc", "ref", "train", "events", "toy")

    def to_flat(self) -> dict:
        flat = {}
        for s in self.SECTIONS:
            flat.update(config_to_flat(s, getattr(self, s)))
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "PipelineConfig":
        known = {f"{s}.{f.name}" for s, typ in cls._section_types().items()
                 for f in dataclasses.fields(typ)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**{s: config_from_flat(typ, s, flat) for s, typ in cls._section_types().items()})

    @staticmethod
    def _section_types():
        return {"gen": UNetConfig, "disc": DiscriminatorConfig, "ref": RefinerConfig,
                "train": TrainConfig, "events": EventSimConfig, "toy": ToySceneConfig}

    def for_channels(self, c: int) -> "PipelineConfig":
        """Adjust the model channel counts to c-channel frames."""
        cfg = dataclasses.replace(self)
        cfg.gen = dataclasses.replace(self.gen, input_channels=c + 1, output_channels=c)
        cfg.disc = dataclasses.replace(self.disc, input_channels=2 * c + 1)
        cfg.ref = dataclasses.replace(self.ref, input_channels=c, output_channels=c)
        return cfg


def parse_config_text(text: str) -> dict:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected key=value")
        flat[key.strip()] = value.strip()
    return flat


def load_config(path: Optional[PathLike] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    flat = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    flat.update(overrides or {})
    return PipelineConfig.from_flat(flat)


def resolve_seed(flag: Optional[int], default: int = DEFAULT_SEED) -> int:
    """Seed precedence: command-line flag, then EVSYNTH_SEED, then the default."""
    if flag is not None:
        return flag
    env = os.environ.get("EVSYNTH_SEED")
    if env not in (None, ""):
        return int(env)
    return default


# -- toy scenes -------------------------------------------------------------

def _smooth_background(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    bg = np.empty((channels, size, size))
    for c in range(channels):
        acc = np.full((size, size), rng.uniform(0.35, 0.6))
        for _ in range(3):
            fx, fy = rng.uniform(0.3, 1.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.03, 0.08) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        bg[c] = acc
    return bg


def render_toy_sequence(rng: np.random.Generator, cfg: ToySceneConfig) -> list:
    """Frames of coloured discs/rectangles translating over a smooth background."""
    ss = 4  # supersampling factor for anti-aliased edges
    n = cfg.size * ss
    coords = (np.arange(n) + 0.5) / ss
    bg = _smooth_background(rng, cfg.size, cfg.channels)
    shapes = []
    for _ in range(cfg.shapes):
        shapes.append(dict(
            kind=rng.integers(0, 2),
            r=rng.uniform(cfg.min_radius, cfg.max_radius),
            aspect=rng.uniform(0.6, 1.4),
            pos=rng.uniform(0, cfg.size, size=2),
            vel=rng.uniform(-cfg.max_speed, cfg.max_speed, size=2),
            color=rng.uniform(0.08, 0.95, size=cfg.channels)))
    frames = []
    for k in range(cfg.frames):
        img = np.repeat(np.repeat(bg, ss, axis=1), ss, axis=2)
        for s in shapes:
            cy, cx = s["pos"] + k * s["vel"]
            ry, rx = s["r"] * s["aspect"], s["r"] / s["aspect"]
            dy = (coords[:, None] - cy) / ry
            dx = (coords[None, :] - cx) / rx
            mask = (dy * dy + dx * dx <= 1.0) if s["kind"] == 0 else \
                ((np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0))
            img[:, mask] = s["color"][:, None]
        frame = img.reshape(cfg.channels, cfg.size, ss, cfg.size, ss).mean(axis=(2, 4))
        # round-trip through the 8-bit codec so events match the stored frames
        frames.append(decode_image(encode_image(np.clip(frame, 0, 1).astype(np.float32))))
    return frames


def events_from_frames(frames: Sequence[np.ndarray], period_ns: int, rng: np.random.Generator,
                       sim: EventSimConfig = EventSimConfig(), t0: int = 0) -> np.ndarray:
    """Sample an event stream whose per-interval accumulation equals the quantized
    log difference of each frame pair.

    Each pixel with level q emits |q| events of sign(q) at timestamps drawn
    uniformly inside the open interval between the two frames.
    """
    if period_ns < 2:
        raise ValueError("period_ns must be >= 2")
    chunks = []
    for i, (a, b) in enumerate(zip(frames[:-1], frames[1:])):
        q = quantize_log_diff(simulate_event_frame(a, b, sim.eps), sim.contrast_clip,
                              sim.levels).values
        ys, xs = np.nonzero(q)
        counts = np.abs(q[ys, xs]).astype(np.int64)
        total = int(counts.sum())
        ev = np.empty(total, dtype=EVENT_DTYPE)
        ev["x"] = np.repeat(xs, counts)
        ev["y"] = np.repeat(ys, counts)
        ev["p"] = np.repeat(np.sign(q[ys, xs]), counts)
        start = t0 + i * period_ns
        ev["t"] = start + rng.integers(1, period_ns, size=total, dtype=np.int64)
        order = np.lexsort((ev["x"], ev["y"], ev["t"]))
        chunks.append(ev[order])
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=EVENT_DTYPE)


def toygen(out_dir: PathLike, cfg: ToySceneConfig = ToySceneConfig(),
           sim: EventSimConfig = EventSimConfig()) -> list:
    """Write ``cfg.sequences`` toy sequences; returns the manifest paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    for s in range(cfg.sequences):
        rng = np.random.default_rng([cfg.seed, s])
        frames = render_toy_sequence(rng, cfg)
        events = events_from_frames(frames, cfg.period_ns, rng, sim)
        seq_dir = out_dir / f"seq_{s:05d}"
        names = [f"frame_{k:03d}.{'ppm' if cfg.channels == 3 else 'pgm'}"
                 for k in range(cfg.frames)]
        for name, f in zip(names, frames):
            write_image(f, seq_dir / name)
        write_events(seq_dir / "events.evt1", [events], cfg.size, cfg.size)
        manifest = SequenceManifest(names, "events.evt1", cfg.period_ns, seq_dir)
        write_manifest(manifest, seq_dir / "manifest.txt")
        manifests.append(seq_dir / "manifest.txt")
    return manifests


# -- datasets ---------------------------------------------------------------

def find_manifests(data_dir: PathLike) -> list:
    paths = sorted(Path(data_dir).glob("*/manifest.txt"))
    if not paths:
        raise FileNotFoundError(f"no */manifest.txt under {data_dir}")
    return paths


@dataclass
class LoadedSequence:
    frames: list
    event_frames: list


def load_dataset(data_dir: PathLike, modality: str = "simulated",
                 sim: EventSimConfig = EventSimConfig()) -> list:
    """Load every sequence with event frames from the chosen modality.

    ``simulated`` quantizes log differences of the stored frames;
    ``events`` accumulates the recorded EVT1 stream.
    """
    out = []
    for path in find_manifests(data_dir):
        if modality == "events":
            frames, evs = load_sequence(path, sat=(sim.levels - 1) // 2)
        elif modality == "simulated":
            frames = load_frames(read_manifest(path))
            evs = simulated_event_frames(frames, sim.eps, sim.contrast_clip, sim.levels)
        else:
            raise ValueError(f"unknown modality {modality!r}")
        out.append(LoadedSequence(frames, evs))
    return out


def _planes(evs: Sequence[EventFrame]) -> np.ndarray:
    return np.stack([event_frame_to_model_input(e)[None] for e in evs])


def pair_data(seqs: Sequence[LoadedSequence]) -> PairData:
    keys, evs, tgts = [], [], []
    for s in seqs:
        planes = _planes(s.event_frames)
        keys.extend(s.frames[:-1])
        evs.extend(planes)
        tgts.extend(s.frames[1:])
    return PairData(np.stack(keys), np.stack(evs), np.stack(tgts))


def sequence_data(seqs: Sequence[LoadedSequence], length: int) -> SequenceData:
    keys, evs, tgts = [], [], []
    for s in seqs:
        if len(s.frames) < length + 1:
            raise ValueError(f"sequence has {len(s.frames)} frames, need {length + 1}")
        keys.append(s.frames[0])
        evs.append(_planes(s.event_frames[:length]))
        tgts.append(np.stack(s.frames[1:length + 1]))
    return SequenceData(np.stack(keys), np.stack(evs), np.stack(tgts))


# -- synthesis --------------------------------------------------------------

def synth_sequence(keyframe, event_planes, generator: Callable, refiner=None,
                   recycle_refined: bool = True) -> list:
    """Synthesize one frame per event plane, starting from ``keyframe``.

    Each step feeds the previous synthesized frame back into the generator;
    with a refiner, its output is the one fed back unless ``recycle_refined``
    is false. Accepts a single ``(c, H, W)`` key-frame with ``(n, H, W)``
    planes (or EventFrames), or batched ``(B, c, H, W)`` / ``(B, n, 1, H, W)``.
    """
    single = False
    if isinstance(event_planes, (list, tuple)) and event_planes and \
            isinstance(event_planes[0], EventFrame):
        event_planes = np.stack([event_frame_to_model_input(e) for e in event_planes])
    key = np.asarray(keyframe.data if isinstance(keyframe, Tensor) else keyframe)
    planes = np.asarray(event_planes)
    if key.ndim == 3:
        single = True
        key = key[None]
        planes = planes.reshape(planes.shape[0], 1, *planes.shape[-2:])[None]
    n = planes.shape[1]
    if n == 0:
        raise ValueError("need at least one event frame")
    if planes.shape[-2:] != key.shape[-2:]:
        raise ValueError(f"event planes {planes.shape[-2:]} do not match frame {key.shape[-2:]}")
    outs = []
    with no_grad():
        cur = Tensor(key)
        states = refiner.initial_state(cur) if refiner is not None else None
        for i in range(n):
            raw = generator(cur, Tensor(planes[:, i]))
            if refiner is not None:
                refined, states = refiner.step(raw, states)
                outs.append(refined.data)
                cur = refined if recycle_refined else raw
            else:
                outs.append(raw.data)
                cur = raw
    return [o[0] for o in outs] if single else outs


# -- orchestration ----------------------------------------------------------

def _channels_of(seqs) -> int:
    return seqs[0].frames[0].shape[0]


def new_gen_checkpoint(cfg: PipelineConfig, result) -> "Checkpoint":
    from .training import Checkpoint
    ck = Checkpoint(config={**cfg.to_flat(), "meta.phase": "gen"}, step=result.step)
    ck.put_params("G", result.generator.params)
    ck.put_params("D", result.discriminator.params)
    ck.put_adam("opt/G", result.g_opt)
    ck.put_adam("opt/D", result.d_opt)
    return ck


def config_from_checkpoint(ck) -> PipelineConfig:
    return PipelineConfig.from_flat({k: v for k, v in ck.config.items()
                                     if not k.startswith("meta.")})


def models_from_checkpoint(ck, need_refiner: bool = False):
    """Rebuild (config, G, D, R) from a checkpoint; R is None when absent."""
    from .models import Discriminator, Generator, Refiner
    from .training import load_params_into
    cfg = config_from_checkpoint(ck)
    G = Generator(cfg.gen, seed=0)
    load_params_into(G.params, ck.group("G"), "generator")
    D = None
    if ck.has("D"):
        D = Discriminator(cfg.disc, seed=0)
        load_params_into(D.params, ck.group("D"), "discriminator")
    R = None
    if ck.has("R"):
        R = Refiner(cfg.ref, seed=0)
        load_params_into(R.params, ck.group("R"), "refiner")
    elif need_refiner:
        raise ValueError("checkpoint holds no refiner parameters")
    return cfg, G, D, R


def run_train_gen(data_dir: PathLike, cfg: PipelineConfig, out: PathLike,
                  steps: Optional[int] = None, resume: Optional[PathLike] = None,
                  modality: str = "simulated", callback=None):
    """Phase 1 on a toy dataset directory; writes a checkpoint with G, D and optimizer state."""
    from .models import Discriminator, Generator
    from .training import load_checkpoint, save_checkpoint, train_generator_adversarial
    seqs = load_dataset(data_dir, modality, cfg.events)
    cfg = cfg.for_channels(_channels_of(seqs))
    data = pair_data(seqs)
    kwargs = {}
    if resume:
        ck = load_checkpoint(resume)
        rcfg, G, D, _ = models_from_checkpoint(ck)
        cfg = dataclasses.replace(rcfg, train=cfg.train)
        kwargs = dict(generator=G, discriminator=D, g_opt=ck.get_adam("opt/G"),
                      d_opt=ck.get_adam("opt/D"), start_step=ck.step)
    else:
        kwargs = dict(generator=Generator(cfg.gen, seed=cfg.train.seed),
                      discriminator=Discriminator(cfg.disc, seed=cfg.train.seed + 1))
    result = train_generator_adversarial(data, cfg.train, steps=steps, callback=callback,
                                         **kwargs)
    ck = new_gen_checkpoint(cfg, result)
    save_checkpoint(out, ck)
    return result, ck


def run_train_rec(data_dir: PathLike, gen_ckpt: PathLike, out: PathLike,
                  cfg: Optional[PipelineConfig] = None, steps: Optional[int] = None,
                  resume: bool = False, modality: str = "simulated",
                  recycle_refined: bool = True, callback=None):
    """Phase 2: train R against the frozen G stored in ``gen_ckpt``.

    With ``resume`` the refiner and its optimizer state are restored from
    ``gen_ckpt`` as well.
    """
    from .models import Refiner
    from .training import (load_checkpoint, params_checksum, save_checkpoint,
                           train_recurrent, TrainingError)
    ck = load_checkpoint(gen_ckpt)
    ccfg, G, D, R = models_from_checkpoint(ck)
    if cfg is not None:
        ccfg = dataclasses.replace(ccfg, train=cfg.train, ref=dataclasses.replace(
            cfg.ref, input_channels=ccfg.ref.input_channels,
            output_channels=ccfg.ref.output_channels))
    seqs = load_dataset(data_dir, modality, ccfg.events)
    data = sequence_data(seqs, ccfg.train.sequence_length)
    before = params_checksum(G.params)
    if resume:
        if R is None:
            raise ValueError("cannot resume: checkpoint holds no refiner")
        opt, start = ck.get_adam("opt/R"), ck.step
    else:
        R, opt, start = Refiner(ccfg.ref, seed=ccfg.train.seed + 2), None, 0
    result = train_recurrent(data, G, ccfg.train, R, opt, start_step=start, steps=steps,
                             callback=callback, recycle_refined=recycle_refined)
    if params_checksum(G.params) != before:
        raise TrainingError("generator parameters changed during recurrent training")
    from .training import Checkpoint
    new = Checkpoint(config={**ccfg.to_flat(), "meta.phase": "rec"}, step=result.step)
    new.tensors.update({k: v for k, v in ck.tensors.items()
                        if k.startswith(("G/", "D/", "opt/G/", "opt/D/"))})
    new.put_params("R", result.refiner.params)
    new.put_adam("opt/R", result.opt)
    save_checkpoint(out, new)
    return result, new
