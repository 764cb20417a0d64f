import math

import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from patchdropout.cost import (
    activation_memory, cost_report, empirical_flops, match_keep_rate, relative_compute, theoretical_flops,
)
from patchdropout.errors import InvalidRate
from patchdropout.model import ModelConfig, variant
from patchdropout.sampler import kept_count

BASE896 = variant("base", image=896)


def test_theoretical_examples():
    assert theoretical_flops(12, 196, 768) == 6_257_147_904
    assert theoretical_flops(1, 1, 1) == 6
    assert theoretical_flops(24, 196, 768) == 2 * theoretical_flops(12, 196, 768)


_L, _N, _D = sympy.symbols("L N d", positive=True, integer=True)
_EXPR = 2 * _L * _N**2 * _D + 4 * _L * _N * _D**2


@settings(max_examples=200)
@given(L=st.integers(1, 10**4), N=st.integers(1, 10**7), d=st.integers(1, 10**5))
def test_theoretical_matches_symbolic_big_integers(L, N, d):
    assert theoretical_flops(L, N, d) == int(_EXPR.subs({_L: L, _N: N, _D: d}))


def test_relative_compute():
    assert relative_compute(1.0, 196, 768) == 1.0
    assert relative_compute(0.5, 196, 768) == pytest.approx(0.4717, abs=5e-5)
    for r in (0.5, 0.25):
        assert abs(relative_compute(r, 1e7, 768) - r * r) < 1e-3
    with pytest.raises(InvalidRate):
        relative_compute(0.0, 196, 768)


@pytest.mark.parametrize(
    "name,image,rate,published_g,tol",
    [
        ("base", 896, 1.0, 449.98, 0.02),
        ("base", 896, 0.5, 180.64, 0.02),
        ("base", 896, 0.25, 79.96, 0.02),
        ("base", 896, 0.10, 30.37, 0.02),
        ("base", 896, 0.05, 15.65, 0.02),
        ("base", 224, 1.0, 17.58, 0.02),
        ("tiny", 224, 1.0, 1.26, 0.03),
        ("small", 224, 1.0, 4.61, 0.03),
        ("large", 224, 0.25, 15.39, 0.03),
    ],
)
def test_published_gflops(name, image, rate, published_g, tol):
    cfg = variant(name, image=image)
    got = empirical_flops(cfg, kept_count(rate, cfg.num_patches)) / 1e9
    assert abs(got - published_g) / published_g <= tol


def test_empirical_monotone_in_k():
    cfg = ModelConfig(depth=2, width=32, heads=2, patch=4, image_h=32, image_w=32, classes=4, channels=1)
    counts = [empirical_flops(cfg, k) for k in range(1, cfg.num_patches + 1)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


@pytest.mark.parametrize("k", [1, 17, 64])
def test_empirical_linear_in_depth(k):
    a = ModelConfig(depth=2, width=32, heads=2, patch=4, image_h=32, image_w=32, classes=4, channels=1)
    b = ModelConfig(depth=4, width=32, heads=2, patch=4, image_h=32, image_w=32, classes=4, channels=1)
    c = ModelConfig(depth=6, width=32, heads=2, patch=4, image_h=32, image_w=32, classes=4, channels=1)
    fa, fb, fc = (empirical_flops(x, k) for x in (a, b, c))
    assert fc - fb == fb - fa


@pytest.mark.parametrize("cfg", [variant("base"), variant("tiny"), BASE896, variant("small", image=448)])
@pytest.mark.parametrize("rate", [0.05, 0.25, 0.5, 0.75])
def test_empirical_savings_lag_theoretical(cfg, rate):
    rep = cost_report(cfg, rate)
    assert rep.relative_empirical >= rep.relative_theoretical
    assert 0 < rep.relative_theoretical <= 1 and 0 < rep.relative_empirical <= 1


def test_report_full_rate_is_one():
    rep = cost_report(variant("tiny"), 1.0)
    assert rep.relative_empirical == rep.relative_theoretical == 1.0
    assert (rep.N, rep.kept_patches, rep.token_count) == (196, 196, 197)


def test_memory_examples():
    assert activation_memory(BASE896, 3136, 0) == 0
    full = activation_memory(BASE896, 3136, 1)
    quarter = activation_memory(BASE896, 784, 1)
    assert 0.10 <= quarter / full <= 0.25
    half = activation_memory(BASE896, 1568, 1)
    assert half / full < 0.5


@settings(max_examples=100)
@given(
    k=st.integers(1, 300), b=st.integers(1, 8), depth=st.integers(1, 6), heads=st.integers(1, 4),
    dh=st.integers(1, 16),
)
def test_memory_monotone(k, b, depth, heads, dh):
    cfg = ModelConfig(depth=depth, width=heads * dh, heads=heads, patch=2, image_h=40, image_w=40, classes=2)
    m = activation_memory(cfg, k, b)
    assert activation_memory(cfg, k + 1, b) > m
    assert activation_memory(cfg, k, b + 1) > m
    assert activation_memory(ModelConfig(**{**cfg.to_dict(), "depth": depth + 1}), k, b) > m
    assert activation_memory(ModelConfig(**{**cfg.to_dict(), "width": heads * (dh + 1)}), k, b) > m


def test_match_keep_rate_hits_budget():
    cfg = variant("base")
    target = 0.5 * empirical_flops(cfg)
    r = match_keep_rate(cfg, target)
    k = kept_count(r, cfg.num_patches)
    assert empirical_flops(cfg, k) <= target < empirical_flops(cfg, k + 1)
    assert match_keep_rate(cfg, math.inf) == 1.0
