"""Unit tests of safe-set generation, overlap, and the freeze-or-shift rule."""

import numpy as np
import pytest

from fosmpc.dynamics import AgentParams, AgentState
from fosmpc.safeset import (ActiveSafeSet, Ball, fos_update, freeze_indicators,
                            gamma_radius, gamma_radius_slope, generate_safe_set,
                            overlap_strict, radius_upper_bound,
                            reconstruction_ball, stopping_radius)


@pytest.fixture
def params():
    return AgentParams()


def brute_force_radius(speed, params, n=2000):
    """Independent oracle: maximum stopping radius over sampled admissible
    probe inputs aligned with the worst case (velocity direction)."""
    best = 0.0
    for mag in np.linspace(0.0, params.a_max, n):
        best = max(best, stopping_radius(speed, mag, params))
    return best


def test_rest_radius_value(params):
    # 0.5*Ts^2*a_max + (Ts*a_max)^2/(2*a_min) + r at rest
    expect = 0.5 * 0.01 * 3.5 + (0.35 ** 2) / 7.0 + 0.2
    assert gamma_radius(0.0, params) == pytest.approx(expect, abs=1e-15)
    assert gamma_radius(0.0, params) == pytest.approx(0.235, abs=1e-12)


def test_gamma_dominates_probe_radii(params):
    for speed in np.linspace(0.0, params.v_max, 25):
        assert gamma_radius(speed, params) >= brute_force_radius(speed, params) - 1e-12


def test_gamma_monotone_and_slope(params):
    speeds = np.linspace(0.0, params.v_max, 50)
    radii = gamma_radius(speeds, params)
    assert np.all(np.diff(radii) > 0)
    h = 1e-7
    for s in (0.3, 1.0, 2.5):
        fd = (gamma_radius(s + h, params) - gamma_radius(s - h, params)) / (2 * h)
        assert gamma_radius_slope(s, params) == pytest.approx(fd, rel=1e-6)


def test_radius_upper_bound(params):
    assert radius_upper_bound(params) == pytest.approx(gamma_radius(3.0, params))
    assert radius_upper_bound(params) == pytest.approx(2.1207142857142857, abs=1e-12)


def test_generate_safe_set_probe_tightens(params):
    x = AgentState(p=[1.0, 2.0], v=[1.0, 0.0])
    canonical = generate_safe_set(x, params)
    probed = generate_safe_set(x, params, u_probe=[0.0, 0.0])
    assert np.allclose(canonical.c, x.p)
    assert probed.R < canonical.R
    # zero probe at unit speed: Ts*s + s^2/(2 a_min) + r
    assert probed.R == pytest.approx(0.1 + 1.0 / 7.0 + 0.2, abs=1e-12)


def test_safe_set_covers_braking(params):
    """The generated ball must contain the body along a maximal step followed
    by braking.

    The radius covers one worst-case step plus the continuous-time braking
    distance exactly; a sampled braking rollout whose final step only needs a
    fraction of the deceleration can overshoot that distance by at most
    a_min * Ts^2 / 8 (the quantization of the last partial step), so the
    rollout check carries that slack while the analytic bound is tight."""
    from fosmpc.dynamics import ControlInput, step
    rng = np.random.default_rng(3)
    quant = params.a_min_mag * params.Ts ** 2 / 8.0
    for _ in range(50):
        v = rng.normal(size=2)
        v = v / np.linalg.norm(v) * rng.uniform(0, params.v_max)
        x = AgentState(p=rng.normal(size=2), v=v)
        ball = generate_safe_set(x, params)
        u_dir = v / np.linalg.norm(v) if np.linalg.norm(v) > 0 else np.array([1.0, 0])
        y = step(x, ControlInput(params.a_max * u_dir), params)
        d_analytic = (np.linalg.norm(y.p - x.p)
                      + np.linalg.norm(y.v) ** 2 / (2 * params.a_min_mag))
        assert d_analytic <= ball.R - params.r + 1e-9
        while np.linalg.norm(y.v) > 1e-12:
            mag = min(params.a_min_mag, np.linalg.norm(y.v) / params.Ts)
            u = -mag * y.v / np.linalg.norm(y.v)
            assert np.linalg.norm(y.p - ball.c) <= ball.R - params.r + quant + 1e-9
            y = step(y, ControlInput(u), params)
        assert np.linalg.norm(y.p - ball.c) <= ball.R - params.r + quant + 1e-9


def test_overlap_strict_tangency():
    a = Ball([0.0, 0.0], 1.0)
    b = Ball([2.0, 0.0], 1.0)
    assert not overlap_strict(a, b)          # tangent: disjoint
    assert overlap_strict(a, Ball([1.9, 0.0], 1.0))
    assert not overlap_strict(a, Ball([2.1, 0.0], 1.0))


def test_freeze_indicators_cases():
    actives = [Ball([0.0, 0.0], 1.0), Ball([10.0, 0.0], 1.0)]
    # distant candidates: both shift
    cands = [Ball([0.5, 0.0], 1.0), Ball([9.5, 0.0], 1.0)]
    assert freeze_indicators(cands, actives) == [False, False]
    # candidate-candidate overlap freezes both
    cands = [Ball([4.0, 0.0], 1.5), Ball([6.0, 0.0], 1.5)]
    assert freeze_indicators(cands, actives) == [True, True]
    # candidate overlapping the other's active set freezes only the mover
    cands = [Ball([8.5, 0.0], 1.0), Ball([12.0, 0.0], 1.0)]
    assert freeze_indicators(cands, actives) == [True, False]


def test_freeze_order_independence():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n = 5
        cands = [Ball(rng.uniform(0, 5, 2), rng.uniform(0.3, 1.2)) for _ in range(n)]
        actives = [Ball(rng.uniform(0, 5, 2), rng.uniform(0.3, 1.2)) for _ in range(n)]
        chi = freeze_indicators(cands, actives)
        perm = rng.permutation(n)
        chi_p = freeze_indicators([cands[i] for i in perm],
                                  [actives[i] for i in perm])
        assert [chi[i] for i in perm] == chi_p


def test_fos_update_keeps_disjointness():
    """Randomized check of the disjointness invariance argument: starting
    from disjoint actives, the updated sets stay disjoint."""
    rng = np.random.default_rng(11)
    trials = 0
    while trials < 200:
        n = 4
        actives = []
        for _ in range(40):
            b = Ball(rng.uniform(0, 12, 2), rng.uniform(0.3, 1.0))
            if all(not overlap_strict(b, a) for a in actives):
                actives.append(b)
            if len(actives) == n:
                break
        if len(actives) < n:
            continue
        trials += 1
        cands = [Ball(a.c + rng.normal(0, 0.6, 2), rng.uniform(0.3, 1.0))
                 for a in actives]
        chi = freeze_indicators(cands, actives)
        updated = fos_update(cands, actives, chi)
        for i in range(n):
            for j in range(i + 1, n):
                assert not overlap_strict(updated[i], updated[j])


def test_fos_update_selects():
    actives = [Ball([0.0, 0.0], 1.0)]
    cands = [Ball([1.0, 0.0], 1.0)]
    assert np.allclose(fos_update(cands, actives, [True])[0].c, [0.0, 0.0])
    assert np.allclose(fos_update(cands, actives, [False])[0].c, [1.0, 0.0])


def test_reconstruction_ball(params):
    R_max = radius_upper_bound(params)
    rec = reconstruction_ball([1.0, 1.0], R_max, params.r)
    assert rec.R == pytest.approx(2 * R_max - params.r, abs=1e-12)
    # contains any active ball whose footprint covers the position
    rng = np.random.default_rng(5)
    for _ in range(100):
        R = rng.uniform(params.r, R_max)
        offset = rng.normal(size=2)
        offset *= rng.uniform(0, R - params.r) / max(np.linalg.norm(offset), 1e-12)
        ball = Ball(np.array([1.0, 1.0]) + offset, R)
        assert np.linalg.norm(ball.c - rec.c) + ball.R <= rec.R + 1e-9


def test_active_safe_set_copy():
    s = ActiveSafeSet(active=Ball([0, 0], 1.0), frozen=True, prev=Ball([1, 0], 1.0))
    c = s.copy()
    c.active.c[0] = 5.0
    assert s.active.c[0] == 0.0
