import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lttrack import autodiff as ad
from lttrack.deform import CouplingBlock, InvertibleMap, map_forward, map_inverse


def perturbed_map(n_frames=6, seed=0, scale=0.8, n_blocks=6):
    rng = np.random.default_rng(seed)
    m = InvertibleMap(n_frames, n_blocks=n_blocks, hidden=16, rng=rng)
    for p in m.parameters().values():
        p.value += scale * rng.standard_normal(p.value.shape)
    return m


def test_identity_at_initialisation(rng):
    m = InvertibleMap(5, rng=rng)
    u = rng.uniform(0, 1, (100, 3))
    t = rng.integers(0, 5, 100)
    np.testing.assert_array_equal(map_forward(m, u, t), u)
    np.testing.assert_array_equal(map_inverse(m, u, t), u)


def test_round_trip_random_parameters(rng):
    m = perturbed_map()
    u = rng.uniform(-0.2, 1.2, (10_000, 3))
    t = rng.integers(0, 6, 10_000)
    c = map_forward(m, u, t)
    assert np.max(np.abs(c - u)) > 1e-2  # the map is not trivial
    assert np.max(np.abs(map_inverse(m, c, t) - u)) <= 1e-9
    assert np.max(np.abs(map_forward(m, map_inverse(m, u, t), t) - u)) <= 1e-9


def test_cross_time_composition(rng):
    m = perturbed_map(seed=5)
    u = rng.uniform(0, 1, (500, 3))
    t1 = rng.integers(0, 6, 500)
    t2 = rng.integers(0, 6, 500)
    u2 = map_inverse(m, map_forward(m, u, t1), t2)
    back = map_inverse(m, map_forward(m, u2, t2), t1)
    assert np.max(np.abs(back - u)) <= 1e-8


def bisect_scalar(f, target, lo=-50.0, hi=50.0):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_block_inverse_matches_bisection(rng):
    m = perturbed_map(seed=2, n_blocks=3)
    code = ad.value_of(m.embedding(np.array([3])))
    for blk in m.blocks:
        for _ in range(20):
            c = rng.uniform(0, 1, (1, 3))
            inv = ad.value_of(blk.inverse(c, code))

            def fwd_axis(x):
                u = c.copy()
                u[0, blk.axis] = x
                return ad.value_of(blk.forward(u, code))[0, blk.axis]

            x = bisect_scalar(fwd_axis, c[0, blk.axis])
            assert abs(inv[0, blk.axis] - x) <= 1e-9
            others = [j for j in range(3) if j != blk.axis]
            np.testing.assert_array_equal(inv[0, others], c[0, others])


def test_scale_is_positive_and_bounded(rng):
    blk = CouplingBlock(1, 4, hidden=8, rng=rng)
    for p in blk.parameters().values():
        p.value += 10 * rng.standard_normal(p.value.shape)
    scale, _ = blk.scale_shift(rng.uniform(0, 1, (200, 3)), rng.standard_normal((200, 4)))
    s = ad.value_of(scale)
    assert np.all(s >= np.exp(-1) - 1e-12) and np.all(s <= np.e + 1e-12)


def test_axes_cycle(rng):
    m = InvertibleMap(3, n_blocks=6, rng=rng)
    assert [b.axis for b in m.blocks] == [0, 1, 2, 0, 1, 2]


def test_time_out_of_range(rng):
    m = InvertibleMap(3, rng=rng)
    with pytest.raises(IndexError):
        m.forward(np.zeros((1, 3)), 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_round_trip_property(seed, t):
    m = perturbed_map(seed=seed % 1000, scale=0.8)
    u = np.random.default_rng(seed).uniform(-0.5, 1.5, (64, 3))
    assert np.max(np.abs(map_inverse(m, map_forward(m, u, t), t) - u)) <= 1e-9


def test_deform_gradients_match_finite_differences(rng):
    m = perturbed_map(n_frames=3, seed=9, scale=0.3, n_blocks=2)
    u = ad.Parameter(rng.uniform(0, 1, (4, 3)), "u")
    t = np.array([0, 1, 2, 1])
    params = [u] + list(m.parameters().values())

    def build():
        c = m.forward(u, t)
        back = m.inverse(c * 1.1, (t + 1) % 3)
        return ad.sum_(ad.square(back)) + ad.sum_(c)

    for p in params:
        p.zero_grad()
    with ad.Tape() as tape:
        y = build()
    ad.backward(tape, y)
    h = 1e-6
    for p in params:
        num = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            old = p.value[idx]
            p.value[idx] = old + h
            fp = float(ad.value_of(build()))
            p.value[idx] = old - h
            fm = float(ad.value_of(build()))
            p.value[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        assert np.max(np.abs(p.grad - num)) <= 1e-4 * max(np.max(np.abs(num)), 1e-6), p.name
