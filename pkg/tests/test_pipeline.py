import numpy as np
import pytest

from evsynth.event_core import accumulate_windows, quantize_log_diff, simulate_event_frame
from evsynth.event_io import decode_events, load_sequence, read_manifest
from evsynth.models import Refiner, RefinerConfig
from evsynth.pipeline import (EventSimConfig, PipelineConfig, ToySceneConfig, events_from_frames,
                              load_config, load_dataset, models_from_checkpoint, pair_data,
                              parse_config_text, render_toy_sequence, resolve_seed,
                              run_train_gen, run_train_rec, sequence_data, synth_sequence, toygen)
from evsynth.tensor import Tensor
from evsynth.training import load_checkpoint, params_checksum


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# -- toy data ------------------------------------------------------------------------

def test_toygen_is_deterministic(tmp_path):
    cfg = ToySceneConfig(size=16, sequences=2, seed=5)
    toygen(tmp_path / "a", cfg)
    toygen(tmp_path / "b", cfg)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert len(a) == 2 * (7 + 2)
    toygen(tmp_path / "c", ToySceneConfig(size=16, sequences=2, seed=6))
    assert tree_bytes(tmp_path / "c") != a


def test_toy_frames_are_in_range_and_move():
    frames = render_toy_sequence(np.random.default_rng(0), ToySceneConfig(size=32))
    assert len(frames) == 7
    assert all(f.shape == (3, 32, 32) and f.min() >= 0 and f.max() <= 1 for f in frames)
    assert not np.array_equal(frames[0], frames[-1])


def test_static_scene_has_no_events(tmp_path):
    cfg = ToySceneConfig(size=16, sequences=1, max_speed=0.0)
    (m,) = toygen(tmp_path, cfg)
    _, _, reader = decode_events((m.parent / "events.evt1").open("rb"))
    assert list(reader) == []


@pytest.mark.parametrize("channels", [1, 3])
def test_recorded_events_accumulate_to_quantized_log_diff(tmp_path, channels):
    cfg = ToySceneConfig(size=24, sequences=1, channels=channels, seed=3)
    (m,) = toygen(tmp_path, cfg)
    frames, evs = load_sequence(m)
    sim = EventSimConfig()
    assert len(evs) == 6
    for i, e in enumerate(evs):
        q = quantize_log_diff(simulate_event_frame(frames[i], frames[i + 1], sim.eps),
                              sim.contrast_clip, sim.levels)
        np.testing.assert_array_equal(e.values, q.values)


def test_event_timestamps_stay_inside_their_interval():
    rng = np.random.default_rng(1)
    frames = render_toy_sequence(rng, ToySceneConfig(size=16, max_speed=3))
    ev = events_from_frames(frames, 1000, rng)
    assert np.all(np.diff(ev["t"].astype(np.int64)) >= 0)
    assert np.all(ev["t"] % 1000 != 0)
    windows = accumulate_windows([ev], 0, 1000, 6, 16, 16)
    assert sum(int(np.abs(w.values).sum()) for w in windows) == len(ev)


def test_dataset_modalities_agree_on_toy_data(tmp_path):
    toygen(tmp_path, ToySceneConfig(size=16, sequences=2))
    a = load_dataset(tmp_path, "simulated")
    b = load_dataset(tmp_path, "events")
    assert len(a) == len(b) == 2
    for sa, sb in zip(a, b):
        assert [e.values.tolist() for e in sa.event_frames] == \
            [e.values.tolist() for e in sb.event_frames]
    with pytest.raises(ValueError):
        load_dataset(tmp_path, "bogus")
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_pair_and_sequence_tensors(tmp_path):
    toygen(tmp_path, ToySceneConfig(size=16, sequences=3))
    seqs = load_dataset(tmp_path)
    pd = pair_data(seqs)
    assert pd.keyframes.shape == (18, 3, 16, 16) and pd.events.shape == (18, 1, 16, 16)
    sd = sequence_data(seqs, 6)
    assert sd.targets.shape == (3, 6, 3, 16, 16)
    with pytest.raises(ValueError):
        sequence_data(seqs, 7)


# -- synthesis -------------------------------------------------------------------------

def _planes(n=6, size=8, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, size, size)).astype(np.float32)


def test_synth_identity_generator_repeats_keyframe():
    key = np.random.default_rng(0).random((3, 8, 8), dtype=np.float32)
    out = synth_sequence(key, _planes(), lambda cur, ev: cur)
    assert len(out) == 6
    for f in out:
        np.testing.assert_array_equal(f, key)


def test_synth_feeds_previous_output_back():
    seen = []

    def gen(cur, ev):
        seen.append(cur.data.copy())
        return Tensor(cur.data + 1.0)

    key = np.zeros((1, 4, 4), np.float32)
    out = synth_sequence(key, _planes(size=4), gen)
    for i in range(1, 6):
        np.testing.assert_array_equal(seen[i], out[i - 1][None])
    assert out[-1][0, 0, 0] == 6.0


def test_synth_refiner_carries_history():
    cfg = RefinerConfig(depth=2, base_channels=4, input_channels=3, output_channels=3,
                        convlstm_channels=4)
    r = Refiner(cfg, seed=0)
    rng = np.random.default_rng(1)
    for p in r.params.values():
        p.data = rng.normal(0, 0.3, size=p.shape).astype(np.float32)

    # a generator that ignores the frame and paints the event plane
    def gen(cur, ev):
        return Tensor(np.repeat((ev.data + 1) / 2, 3, axis=1))

    key = np.zeros((3, 8, 8), np.float32)
    planes = _planes()
    changed = planes.copy()
    changed[0] = 0
    plain = synth_sequence(key, planes, gen), synth_sequence(key, changed, gen)
    np.testing.assert_array_equal(plain[0][1], plain[1][1])
    refined = (synth_sequence(key, planes, gen, refiner=r, recycle_refined=False),
               synth_sequence(key, changed, gen, refiner=r, recycle_refined=False))
    assert not np.array_equal(refined[0][1], refined[1][1])


def test_synth_errors():
    key = np.zeros((3, 8, 8), np.float32)
    with pytest.raises(ValueError):
        synth_sequence(key, np.zeros((0, 8, 8)), lambda c, e: c)
    with pytest.raises(ValueError):
        synth_sequence(key, np.zeros((2, 4, 4)), lambda c, e: c)


# -- configuration ---------------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# run\ntrain.steps = 5\ngen.depth=2\n")
    cfg = load_config(p, {"train.steps": "7", "toy.size": "32"})
    assert cfg.train.steps == 7 and cfg.gen.depth == 2 and cfg.toy.size == 32
    again = PipelineConfig.from_flat(cfg.to_flat())
    assert again == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        load_config(None, {"train.bogus": "1"})
    with pytest.raises(ValueError):
        parse_config_text("no equals sign")
    with pytest.raises(ValueError):
        load_config(None, {"train.w_mse": "0.9"})


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("EVSYNTH_SEED", raising=False)
    assert resolve_seed(None) == 42
    monkeypatch.setenv("EVSYNTH_SEED", "9")
    assert resolve_seed(None) == 9
    assert resolve_seed(3) == 3


# -- orchestration -------------------------------------------------------------------------

def tiny_config(steps=3):
    return load_config(None, {
        "gen.depth": "2", "gen.base_channels": "4", "disc.base_channels": "4",
        "ref.depth": "2", "ref.base_channels": "4", "ref.convlstm_channels": "4",
        "train.batch_g": "4", "train.batch_r": "2", "train.steps": str(steps),
        "train.steps_r": str(steps)})


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    toygen(d, ToySceneConfig(size=32, sequences=3, seed=1))
    return d


def test_train_gen_then_rec(toy_dir, tmp_path):
    cfg = tiny_config()
    res, ck = run_train_gen(toy_dir, cfg, tmp_path / "g.evck")
    assert res.step == 3 and len(res.history) == 3
    loaded = load_checkpoint(tmp_path / "g.evck")
    assert loaded.step == 3 and loaded.config["meta.phase"] == "gen"
    _, G, D, R = models_from_checkpoint(loaded)
    assert R is None and params_checksum(G.params) == params_checksum(res.generator.params)

    rres, rck = run_train_rec(toy_dir, tmp_path / "g.evck", tmp_path / "r.evck", cfg)
    assert rres.step == 3
    _, G2, _, R2 = models_from_checkpoint(load_checkpoint(tmp_path / "r.evck"),
                                          need_refiner=True)
    assert params_checksum(G2.params) == params_checksum(G.params)
    assert params_checksum(R2.params) == params_checksum(rres.refiner.params)


def test_train_gen_resume_matches_straight_run(toy_dir, tmp_path):
    cfg = tiny_config(steps=4)
    straight, _ = run_train_gen(toy_dir, cfg, tmp_path / "full.evck")
    run_train_gen(toy_dir, cfg, tmp_path / "half.evck", steps=2)
    resumed, _ = run_train_gen(toy_dir, cfg, tmp_path / "rest.evck", steps=2,
                               resume=tmp_path / "half.evck")
    assert resumed.step == 4
    assert params_checksum(resumed.generator.params) == \
        params_checksum(straight.generator.params)


def test_train_rec_needs_refiner_to_resume(toy_dir, tmp_path):
    cfg = tiny_config()
    run_train_gen(toy_dir, cfg, tmp_path / "g.evck", steps=1)
    with pytest.raises(ValueError):
        run_train_rec(toy_dir, tmp_path / "g.evck", tmp_path / "r.evck", cfg, resume=True)
