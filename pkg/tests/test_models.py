import numpy as np
import pytest

from evsynth.models import (ConvLSTMState, Discriminator, DiscriminatorConfig, Generator,
                            Refiner, RefinerConfig, UNetConfig, convlstm_gates,
                            convlstm_param_set, convlstm_step, discriminator_condition,
                            init_params, refiner_forward_sequence)
from evsynth.tensor import ShapeError, Tape, Tensor, backward, mean_all, ssim


def small_refiner(seed=0, std=None):
    cfg = RefinerConfig(depth=2, base_channels=4, input_channels=3, output_channels=3,
                        convlstm_channels=6)
    r = Refiner(cfg, seed=seed)
    if std is not None:
        rng = np.random.default_rng(seed)
        for p in r.params.values():
            p.data = rng.normal(0, std, size=p.shape).astype(np.float32)
    return r


def randomize(params, seed, std=0.3):
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = rng.normal(0, std, size=p.shape).astype(p.dtype)


# -- generator ---------------------------------------------------------------------

@pytest.mark.parametrize("depth,c,size", [(2, 1, 8), (3, 3, 16), (4, 3, 32), (4, 1, 64)])
def test_generator_shape_and_range(depth, c, size):
    g = Generator(UNetConfig(depth=depth, base_channels=4, input_channels=c + 1,
                             output_channels=c), seed=1)
    randomize(g.params, 2, std=0.5)
    rng = np.random.default_rng(0)
    key = rng.random((2, c, size, size), dtype=np.float32)
    ev = rng.uniform(-1, 1, (2, 1, size, size)).astype(np.float32)
    out = g(key, ev)
    assert out.shape == key.shape
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_zero_final_layer_gives_half():
    g = Generator(UNetConfig(), seed=0)
    g.params["out.w"].data[:] = 0
    rng = np.random.default_rng(1)
    out = g(rng.random((2, 3, 32, 32), dtype=np.float32),
            rng.uniform(-1, 1, (2, 1, 32, 32)).astype(np.float32))
    np.testing.assert_array_equal(out.data, 0.5)


def test_generator_errors():
    g = Generator(UNetConfig(), seed=0)
    with pytest.raises(ShapeError):
        g(np.zeros((1, 3, 24, 24), np.float32), np.zeros((1, 1, 24, 24), np.float32))
    with pytest.raises(ShapeError):
        g(np.zeros((1, 1, 32, 32), np.float32), np.zeros((1, 1, 32, 32), np.float32))
    with pytest.raises(ShapeError):
        g(np.zeros((1, 3, 32, 32), np.float32), np.zeros((1, 1, 16, 16), np.float32))
    with pytest.raises(ValueError):
        UNetConfig(depth=1)


@pytest.mark.parametrize("level", [0, 1, 2, 3])
def test_skip_connections_are_live(level):
    g = Generator(UNetConfig(), seed=3)
    randomize(g.params, 4, std=0.2)
    rng = np.random.default_rng(5)
    key = rng.random((1, 3, 32, 32), dtype=np.float32)
    ev = rng.uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32)
    full = g(key, ev).data
    ablated = g(key, ev, drop_skips=[level]).data
    assert not np.array_equal(full, ablated)


# -- discriminator -------------------------------------------------------------------

def test_discriminator_patch_grid_and_range():
    d = Discriminator(DiscriminatorConfig(), seed=0)
    # moderate weights: float32 sigmoid rounds to exactly 0 or 1 beyond |logit| ~ 17
    randomize(d.params, 1, std=0.05)
    rng = np.random.default_rng(2)
    cond = discriminator_condition(rng.random((2, 3, 64, 64), dtype=np.float32),
                                   rng.uniform(-1, 1, (2, 1, 64, 64)).astype(np.float32))
    out = d(cond, rng.random((2, 3, 64, 64), dtype=np.float32))
    assert out.shape == (2, 1, 6, 6)
    assert out.data.min() > 0.0 and out.data.max() < 1.0


def test_discriminator_zero_weights():
    d = Discriminator(DiscriminatorConfig(), seed=0)
    for p in d.params.values():
        p.data[:] = 0
    out = d(np.random.default_rng(0).random((1, 4, 64, 64), dtype=np.float32),
            np.ones((1, 3, 64, 64), np.float32))
    np.testing.assert_array_equal(out.data, 0.5)


def test_discriminator_shape_mismatch():
    d = Discriminator(DiscriminatorConfig(), seed=0)
    with pytest.raises(ShapeError):
        d(np.zeros((1, 4, 64, 64), np.float32), np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(ShapeError):
        d(np.zeros((1, 2, 64, 64), np.float32), np.zeros((1, 3, 64, 64), np.float32))


# -- ConvLSTM -------------------------------------------------------------------------

def test_convlstm_zero_params():
    params = convlstm_param_set(3, 4, seed=0)
    for p in params.values():
        p.data[:] = 0
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)).astype(np.float32))
    state = ConvLSTMState.zeros(2, 4, 5, 5)
    i, f, o, g = convlstm_gates(x, state, params)
    for gate in (i, f, o):
        np.testing.assert_array_equal(gate.data, 0.5)
    np.testing.assert_array_equal(g.data, 0.0)
    new = convlstm_step(x, state, params)
    np.testing.assert_array_equal(new.cell.data, 0.0)
    np.testing.assert_array_equal(new.hidden.data, 0.0)


def test_convlstm_remember_gate():
    params = convlstm_param_set(2, 3, seed=0)
    for p in params.values():
        p.data[:] = 0
    params["b_f"].data[:] = 50.0
    rng = np.random.default_rng(1)
    cell = Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
    state = ConvLSTMState(Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)).astype(np.float32)), cell)
    new = convlstm_step(Tensor(np.zeros((1, 2, 4, 4), np.float32)), state, params)
    np.testing.assert_allclose(new.cell.data, cell.data, atol=1e-6)


def test_convlstm_gate_ranges_random():
    rng = np.random.default_rng(2)
    for trial in range(200):
        params = convlstm_param_set(2, 3, seed=trial)
        randomize(params, trial, std=float(rng.uniform(0.1, 3.0)))
        x = Tensor(rng.normal(0, 3, (1, 2, 4, 4)).astype(np.float32))
        st = ConvLSTMState(Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)).astype(np.float32)),
                           Tensor(rng.normal(0, 3, (1, 3, 4, 4)).astype(np.float32)))
        i, f, o, g = convlstm_gates(x, st, params)
        for gate in (i, f, o):
            assert gate.data.min() >= 0.0 and gate.data.max() <= 1.0
        assert np.abs(g.data).max() <= 1.0
        assert np.abs(convlstm_step(x, st, params).hidden.data).max() <= 1.0


def test_convlstm_state_mismatch():
    params = convlstm_param_set(2, 3, seed=0)
    with pytest.raises(ShapeError):
        convlstm_step(Tensor(np.zeros((1, 2, 4, 4), np.float32)),
                      ConvLSTMState.zeros(1, 4, 4, 4), params)


# -- refiner --------------------------------------------------------------------------

def _frames(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.random((2, 3, size, size), dtype=np.float32)) for _ in range(n)]


def test_refiner_preserves_length_and_shape():
    r = small_refiner(std=0.3)
    outs = r(_frames(6))
    assert len(outs) == 6
    assert all(o.shape == (2, 3, 16, 16) for o in outs)


def test_refiner_single_step_is_zero_state_step():
    r = small_refiner(std=0.3)
    f = _frames(1)
    out, _ = r.step(f[0], r.initial_state(f[0]))
    np.testing.assert_array_equal(r(f)[0].data, out.data)


def test_refiner_depends_on_order():
    r = small_refiner(std=0.3)
    f = _frames(3)
    forward = refiner_forward_sequence(r, f)
    backward_order = refiner_forward_sequence(r, f[::-1])
    # both runs see f[1] at step 2, with different histories
    assert not np.array_equal(forward[1].data, backward_order[1].data)


def test_refiner_empty_sequence():
    with pytest.raises(ValueError):
        small_refiner()([])


def test_refiner_gradients_reach_every_parameter():
    r = small_refiner(std=0.2)
    frames = _frames(6, seed=3)
    targets = _frames(6, seed=4)
    with Tape():
        outs = r(frames)
        loss = None
        for o, t in zip(outs, targets):
            term = mean_all(o * o) + (1.0 - ssim(o, t.data))
            loss = term if loss is None else loss + term
    backward(loss)
    for name, p in r.params.items():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name
        assert np.any(p.grad != 0), name


# -- initialization ----------------------------------------------------------------------

def test_init_deterministic_and_zero_bias():
    a = init_params(UNetConfig(), seed=7)
    b = init_params(UNetConfig(), seed=7)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
        if k.endswith(".b"):
            assert not a[k].data.any()
    c = init_params(RefinerConfig(), seed=7)
    assert all(not v.data.any() for k, v in c.items() if k.rsplit(".", 1)[1].startswith("b"))


def test_init_sample_mean_and_std():
    p = init_params(UNetConfig(), seed=11)
    k = p["enc3.w"].data.ravel()[:10_000].astype(np.float64)
    assert abs(k.mean()) < 3 * (0.02 / 100)
    assert abs(k.std() - 0.02) < 0.001
