import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import event_driven_gemm
from conftest import make_toy
from nasadapt.latency import LayerConfig, layer_configs_for
from nasadapt.search_space import Architecture, largest, sample_uniform, smallest
from nasadapt.systolic_sim import (
    ArrayConfig,
    UnsupportedOpError,
    conv_cycles,
    gemm_cycles,
    gemm_shape,
    layer_cycles,
    network_cycles,
)


def conv(ic, oc, k=1, h=4, s=1):
    return LayerConfig("conv", ic, oc, k, s, h, h, "relu")


# -- closed-form cases


def test_single_fold():
    cfg = ArrayConfig(rows=12, cols=14)
    layer = conv(1, 14, k=3, h=7)  # K = 9 <= 12, N = 14 <= 14
    r = conv_cycles(layer, cfg)
    assert (r.row_folds, r.col_folds) == (1, 1)
    assert r.compute_cycles == 12 + 14 - 2 + 49


def test_unit_array_runs_at_full_utilization():
    cfg = ArrayConfig(rows=1, cols=1)
    layer = conv(5, 7, k=3, h=6)
    r = conv_cycles(layer, cfg)
    assert r.compute_cycles == r.macs == layer.macs
    assert r.utilization == 1.0


def test_fold_counts():
    r = gemm_cycles(T=10, K=25, N=29, cfg=ArrayConfig(rows=12, cols=14))
    assert (r.row_folds, r.col_folds) == (3, 3)
    assert r.compute_cycles == 9 * (12 + 14 - 2 + 10)


def test_gemm_shapes():
    assert gemm_shape(conv(8, 16, k=3, h=10, s=2)) == (100, 72, 16)  # conv runs at full resolution
    assert gemm_shape(LayerConfig("shortcut", 8, 16, 1, 2, 10, 10, "identity")) == (25, 8, 16)
    assert gemm_shape(LayerConfig("linear", 400, 5, 1, 1, 1, 1, "identity")) == (1, 400, 5)


def test_pool_is_not_a_conv():
    pool = LayerConfig("pool", 8, 8, 5, 1, 6, 6, "identity")
    with pytest.raises(UnsupportedOpError):
        conv_cycles(pool, ArrayConfig())
    assert layer_cycles(pool, ArrayConfig(cols=14)) == math.ceil(8 * 36 / 14)


def test_array_config_validation():
    for bad in ({"rows": 0}, {"cols": 0}, {"frequency_hz": 0.0}, {"word_bytes": 0}):
        with pytest.raises(ValueError):
            ArrayConfig(**bad)
    with pytest.raises(ValueError):
        ArrayConfig.from_dict({"rows": 4, "banks": 2})
    assert ArrayConfig.from_dict({"rows": 4, "cols": 5}) == ArrayConfig(rows=4, cols=5)


def test_latency_and_bandwidth_follow_from_cycles():
    cfg = ArrayConfig(rows=4, cols=4, frequency_hz=1e8, word_bytes=2)
    r = gemm_cycles(T=20, K=9, N=6, cfg=cfg)
    seconds = r.compute_cycles / 1e8
    assert math.isclose(r.latency_us, seconds * 1e6)
    assert math.isclose(r.dram_read_bw, r.dram_read_bytes / seconds)
    assert math.isclose(r.dram_write_bw, r.dram_write_bytes / seconds)
    # weights once, inputs once per column fold, outputs once per row fold
    assert r.dram_read_bytes == (9 * 6 + 20 * 9 * 2) * 2
    assert r.dram_write_bytes == 20 * 6 * 3 * 2


# -- event-driven oracle


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 20), st.integers(1, 15), st.integers(1, 15),
       st.integers(0, 2**31 - 1))
def test_matches_event_driven_simulation(rows, cols, T, K, N, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(-4, 5, size=(T, K))
    W = rng.integers(-4, 5, size=(K, N))
    out, cycles, _ = event_driven_gemm(X, W, rows, cols)
    assert np.array_equal(out, X @ W)
    assert gemm_cycles(T, K, N, ArrayConfig(rows=rows, cols=cols)).compute_cycles == cycles


def test_event_driven_single_fold_matches_hand_count():
    X = np.arange(6).reshape(3, 2)
    W = np.ones((2, 2), dtype=np.int64)
    out, cycles, per_fold = event_driven_gemm(X, W, 2, 2)
    assert np.array_equal(out, X @ W)
    assert cycles == per_fold == 2 + 2 - 2 + 3


# -- properties

layers = st.builds(
    lambda op, ic, oc, k, h, s: LayerConfig(op, ic, oc, k if op == "conv" else 1, s, h, h,
                                            "relu" if op == "conv" else "identity"),
    st.sampled_from(["conv", "shortcut", "linear"]),
    st.integers(1, 600),
    st.integers(1, 600),
    st.sampled_from([1, 3, 5]),
    st.integers(1, 90),
    st.sampled_from([1, 2]),
)
arrays = st.builds(ArrayConfig, rows=st.integers(1, 32), cols=st.integers(1, 32))


@settings(max_examples=300, deadline=None)
@given(layers, arrays)
def test_mac_lower_bound_and_utilization(layer, cfg):
    r = conv_cycles(layer, cfg)
    assert r.compute_cycles * cfg.rows * cfg.cols >= r.macs
    assert 0 < r.utilization <= 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 50), st.integers(1, 64), arrays)
def test_fold_monotonicity(K, N, dk, T, cfg):
    base = gemm_cycles(T, K, N, cfg).compute_cycles
    assert gemm_cycles(T, K + dk, N, cfg).compute_cycles >= base
    assert gemm_cycles(T, K, N + dk, cfg).compute_cycles >= base


def test_single_layer_network_equals_its_layers():
    b = make_toy(sites=[(8, 2)], kernels=(3,), expansions=("1",), depth=(1, 1))
    arch = Architecture(b, ((3, Fraction(1), "relu"),), 1)
    cfg = ArrayConfig()
    net = network_cycles(arch, cfg)
    conv_cfg, _, linear = layer_configs_for(arch)
    assert net.compute_cycles == conv_cycles(conv_cfg, cfg).compute_cycles + conv_cycles(linear, cfg).compute_cycles
    assert [r.name for r in net.per_layer] == [conv_cfg.key(), linear.key()]


@pytest.mark.parametrize("seed", range(20))
def test_network_is_the_sum_of_its_layers(vgg9, resnet12, seed):
    for b in (vgg9, resnet12):
        arch = sample_uniform(b, seed)
        net = network_cycles(arch)
        assert net.compute_cycles == sum(r.compute_cycles for r in net.per_layer)
        assert net.macs == sum(r.macs for r in net.per_layer)
        assert 0 < net.utilization <= 1


def test_doubling_widths_never_lowers_cycles():
    for h in (8, 16):
        narrow = make_toy(sites=[(4, 2), (6, 1)], kernels=(3,), expansions=("1",), depth=(2, 2), input_shape=(3, h, h))
        wide = make_toy(sites=[(8, 2), (12, 1)], kernels=(3,), expansions=("1",), depth=(2, 2), input_shape=(3, h, h))
        per = ((3, Fraction(1), "relu"),) * 2
        assert network_cycles(Architecture(wide, per, 2)).compute_cycles >= \
            network_cycles(Architecture(narrow, per, 2)).compute_cycles


def test_vgg9_extremes_regression(vgg9):
    big, small = network_cycles(largest(vgg9)), network_cycles(smallest(vgg9))
    assert (big.macs, small.macs) == (1_282_021_200, 340_688)
    assert (big.compute_cycles, small.compute_cycles) == (8_466_060, 15_010)
    mac_ratio = big.macs / small.macs
    cycle_ratio = big.compute_cycles / small.compute_cycles
    assert round(mac_ratio) == 3763 and round(cycle_ratio) == 564
    # the gap between the two ratios is exactly the utilization gap: the
    # smallest network fills a quarter of the rows and runs at ~14%
    assert math.isclose(mac_ratio / cycle_ratio, big.utilization / small.utilization)
    assert small.utilization < 0.15 < 0.9 < big.utilization
