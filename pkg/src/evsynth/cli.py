"""``evsynth`` command line: toy data, event conversion, training, synthesis, evaluation."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import event_io, pipeline
from .event_core import EventError, accumulate_windows
from .event_io import FormatError, atomic_open
from .metrics import curves_csv, evaluate_sequence
from .tensor import ShapeError
from .training import CheckpointError, TrainingError, load_checkpoint

log = logging.getLogger("evsynth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _image_files(directory: Path, prefix: str = "") -> list:
    files = sorted(p for p in Path(directory).iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES and p.name.startswith(prefix))
    if not files:
        raise FileNotFoundError(f"no images in {directory}")
    return files


def _config(args, seed_keys=("train.seed",)) -> pipeline.PipelineConfig:
    """Configuration file plus --set overrides; the resolved seed goes to ``seed_keys``."""
    try:
        overrides = {}
        for kv in args.set or []:
            key, sep, value = kv.partition("=")
            if not sep:
                raise ValueError(f"--set expects KEY=VALUE, got {kv!r}")
            overrides[key.strip()] = value.strip()
        cfg = pipeline.load_config(args.config, overrides)
        flat = cfg.to_flat()
        seed = pipeline.resolve_seed(args.seed, default=int(flat[seed_keys[0]]))
    except (ValueError, OSError) as e:
        raise UsageError(f"bad configuration: {e}") from None
    for k in seed_keys:
        flat[k] = str(seed)
    return pipeline.PipelineConfig.from_flat(flat)


def _progress(every: int):
    def cb(step, loss, *rest):
        if (step + 1) % every == 0:
            log.info("step %d loss %.5f", step + 1, loss)
    return cb


# -- subcommands --------------------------------------------------------------

def cmd_toygen(args) -> int:
    cfg = _config(args, ("toy.seed",))
    toy = cfg.toy
    for name in ("sequences", "frames", "size", "channels"):
        v = getattr(args, name)
        if v is not None:
            toy = dataclasses.replace(toy, **{name: v})
    paths = pipeline.toygen(args.out, toy, cfg.events)
    print(f"wrote {len(paths)} sequences to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args, ("toy.seed",))
    frames = [event_io.read_image(p) for p in _image_files(Path(args.frames))]
    rng = np.random.default_rng(cfg.toy.seed)
    events = pipeline.events_from_frames(frames, args.period_ns, rng, cfg.events, args.t0_ns)
    h, w = frames[0].shape[1:]
    n = event_io.write_events(args.out, [events], w, h)
    print(f"wrote {len(events)} events ({n} bytes) to {args.out}")
    return EXIT_OK


def cmd_accumulate(args) -> int:
    with open(args.events, "rb") as fh:
        w, h, reader = event_io.decode_events(fh)
        count = args.count
        if count is None:
            last = reader.last_timestamp()
            count = 0 if last is None else max(1, -(-(last - args.t0_ns) // args.period_ns))
        frames = accumulate_windows(reader.chunks(), args.t0_ns, args.period_ns, count, w, h,
                                    sat=args.sat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ef in enumerate(frames, 1):
        event_io.write_event_frame_pgm(ef, out / f"events_{i:03d}.pgm")
    print(f"wrote {len(frames)} event frames to {out}")
    return EXIT_OK


def cmd_train_gen(args) -> int:
    cfg = _config(args)
    result, _ = pipeline.run_train_gen(args.data, cfg, args.out, steps=args.steps,
                                       resume=args.resume, modality=args.modality,
                                       callback=_progress(args.log_every))
    print(f"generator trained to step {result.step}; checkpoint {args.out}")
    return EXIT_OK


def cmd_train_rec(args) -> int:
    cfg = _config(args)
    result, _ = pipeline.run_train_rec(
        args.data, args.ckpt, args.out, cfg=cfg, steps=args.steps, resume=args.resume,
        modality=args.modality, recycle_refined=not args.no_recycle_refined,
        callback=_progress(args.log_every))
    print(f"refiner trained to step {result.step}; checkpoint {args.out}")
    return EXIT_OK


def _event_planes(args, w, h, sat, count) -> list:
    with open(args.events, "rb") as fh:
        ew, eh, reader = event_io.decode_events(fh)
        if (ew, eh) != (w, h):
            raise event_io.ResolutionMismatch(
                f"events are {ew}x{eh} but the key-frame is {w}x{h}")
        return accumulate_windows(reader.chunks(), args.t0_ns, args.period_ns, count, w, h, sat)


def cmd_synth(args) -> int:
    ck = load_checkpoint(args.ckpt)
    cfg, G, _, R = pipeline.models_from_checkpoint(ck)
    if args.no_refiner:
        R = None
    keys = [event_io.read_image(p) for p in args.keyframe]
    c, h, w = keys[0].shape
    sat = (cfg.events.levels - 1) // 2
    # key-frame k restarts the recursion for windows [k*steps, (k+1)*steps)
    evs = _event_planes(args, w, h, sat, args.steps * len(keys))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    idx = 1
    for k, key in enumerate(keys):
        if key.shape != keys[0].shape:
            raise event_io.ResolutionMismatch("key-frames differ in shape")
        chunk = evs[k * args.steps:(k + 1) * args.steps]
        for frame in pipeline.synth_sequence(key, chunk, G, R, not args.no_recycle_refined):
            if not np.all(np.isfinite(frame)):
                raise TrainingError(f"non-finite output at frame {idx}")
            event_io.write_image(frame, out / f"frame_{idx:03d}.{'ppm' if c == 3 else 'pgm'}")
            idx += 1
    print(f"wrote {idx - 1} frames to {out}")
    return EXIT_OK


def _reference_frames(gt: Path, n: int) -> list:
    if gt.is_file():
        frames = event_io.load_frames(event_io.read_manifest(gt))[1:]
    else:
        frames = [event_io.read_image(p) for p in _image_files(gt)]
    if len(frames) < n:
        raise ValueError(f"reference has {len(frames)} frames, prediction {n}")
    return frames[:n]


def cmd_eval(args) -> int:
    preds = [event_io.read_image(p) for p in _image_files(Path(args.pred), "frame_")]
    gts = _reference_frames(Path(args.gt), len(preds))
    report, curves = evaluate_sequence(preds, gts)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_open(out / "metrics.txt", "w") as fh:
        fh.write(report.dumps())
    with atomic_open(out / "curves.csv", "w") as fh:
        fh.write(curves_csv(curves))
    sys.stdout.write(report.dumps())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_gradcheck
    results = run_gradcheck(seed=args.seed if args.seed is not None else 0)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evsynth", description=__doc__)
    p.add_argument("--seed", type=int, default=None,
                   help="master seed (overrides EVSYNTH_SEED; default 42)")
    p.add_argument("--config", type=Path, default=None, help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key, e.g. train.steps=100")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("toygen", help="render a synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--sequences", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--channels", type=int, choices=(1, 3))
    s.set_defaults(func=cmd_toygen)

    s = sub.add_parser("simulate", help="emit an EVT1 stream from a frame directory")
    s.add_argument("--frames", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--period-ns", type=int, default=pipeline.DEFAULT_PERIOD_NS)
    s.add_argument("--t0-ns", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("accumulate", help="integrate an EVT1 stream into event frames")
    s.add_argument("--events", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--period-ns", type=int, default=pipeline.DEFAULT_PERIOD_NS)
    s.add_argument("--t0-ns", type=int, default=0)
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--sat", type=int, default=127)
    s.set_defaults(func=cmd_accumulate)

    for name, func, help_ in (("train-gen", cmd_train_gen, "adversarial generator training"),
                              ("train-rec", cmd_train_rec, "recurrent refiner training")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--steps", type=int, default=None)
        s.add_argument("--modality", choices=("simulated", "events"), default="simulated")
        s.add_argument("--log-every", type=int, default=100)
        if name == "train-gen":
            s.add_argument("--resume", type=Path, default=None)
        else:
            s.add_argument("--ckpt", type=Path, required=True,
                           help="checkpoint holding the trained generator")
            s.add_argument("--resume", action="store_true",
                           help="continue the refiner stored in --ckpt")
            s.add_argument("--no-recycle-refined", action="store_true")
        s.set_defaults(func=func)

    s = sub.add_parser("synth", help="synthesize frames from key-frames and events")
    s.add_argument("--keyframe", type=Path, action="append", required=True,
                   help="repeat for longer videos; each one starts a new run of --steps frames")
    s.add_argument("--events", type=Path, required=True)
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--steps", type=int, default=6, help="frames synthesized per key-frame")
    s.add_argument("--period-ns", type=int, default=pipeline.DEFAULT_PERIOD_NS)
    s.add_argument("--t0-ns", type=int, default=0)
    s.add_argument("--no-refiner", action="store_true")
    s.add_argument("--no-recycle-refined", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="score synthesized frames against references")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True, help="frame directory or manifest")
    s.add_argument("--out-dir", type=Path, default=Path("."))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the gradients")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if getattr(args, "steps", None) is not None and args.steps < 1:
            raise UsageError("--steps must be positive")
        return args.func(args)
    except UsageError as e:
        print(f"evsynth: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as e:
        print(f"evsynth: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, EventError, CheckpointError, ShapeError, OSError, ValueError) as e:
        print(f"evsynth: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
