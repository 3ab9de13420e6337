import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skynas.genome import GenomeBounds, LayerSpec, NetworkGenome, NetworkSpec, instantiate, random_genome, skynet_genome
from skynas.hw_model import (
    FpgaLatency,
    FpgaTarget,
    GpuTarget,
    dsp_cost_per_mac,
    estimate_bram,
    estimate_fpga,
    estimate_gpu,
    fm_tile_elems,
    load_profile,
    make_tiling_plan,
    pipeline_fps,
    resized,
)
from skynas.quant import QuantScheme

T = FpgaTarget()
Q = QuantScheme(9, 11)


def one_layer(cin, cout, hw, op="pw1"):
    l = LayerSpec("l", op, cin, cout, hw, hw, bundle=1)
    return NetworkSpec((l,), (cin,) + hw)


@pytest.mark.parametrize("w,fm,expect", [(14, 16, 1), (15, 16, 2), (8, 8, 1), (18, 16, 2), (16, 23, 2), (16, 24, 4), (32, 32, 4)])
def test_dsp_cost(w, fm, expect):
    assert dsp_cost_per_mac(QuantScheme(fm, w), T) == expect


@given(st.integers(2, 32), st.integers(2, 31), st.integers(2, 31))
def test_dsp_cost_monotone(w, fm, d):
    base = dsp_cost_per_mac(QuantScheme(fm, w), T)
    assert dsp_cost_per_mac(QuantScheme(min(32, fm + d), w), T) >= base
    assert dsp_cost_per_mac(QuantScheme(fm, min(32, w + d)), T) >= base


def test_w15_to_w14_halves_dsps_at_fixed_parallelism():
    spec = instantiate(skynet_genome("C"))
    plan = make_tiling_plan((3, 160, 320))
    a = estimate_fpga(spec, QuantScheme(16, 15), plan, T, parallelism=(16, 48))
    b = estimate_fpga(spec, QuantScheme(16, 14), plan, T, parallelism=(16, 48))
    assert (a.dsp_used, b.dsp_used) == (128, 64)


def test_frequency_doubling_halves_latency():
    spec = instantiate(skynet_genome("C"))
    plan = make_tiling_plan((3, 160, 320))
    a = estimate_fpga(spec, Q, plan, T)
    b = estimate_fpga(spec, Q, plan, FpgaTarget(frequency_mhz=2 * T.frequency_mhz))
    assert b.latency_ms == a.latency_ms / 2


def test_single_layer_closed_form():
    spec = one_layer(64, 64, (4, 4))
    M = 64 * 64 * 16
    P = 17
    est = estimate_fpga(spec, Q, make_tiling_plan((64, 4, 4), 1), T, parallelism=(1, P))
    assert est.rows[0].bottleneck == "conv1"
    assert est.latency_ms == math.ceil(M / P) / (T.frequency_mhz * 1e3)
    assert est.bottleneck == "compute"


def test_latency_is_sum_of_invocations():
    spec = instantiate(skynet_genome("C"))
    est = estimate_fpga(spec, Q, make_tiling_plan((3, 160, 320)), T)
    assert [r.name for r in est.rows] == [f"bundle{i}" for i in range(1, 7)] + ["head"]
    assert est.latency_ms == sum(r.cycles for r in est.rows) / (T.frequency_mhz * 1e3)
    for r in est.rows:
        assert r.cycles == max(r.load, r.conv3, r.conv1, r.pool, r.writeback) > 0


def test_skynet_c_default_fits_ultra96():
    est = FpgaLatency().estimate(skynet_genome("C"))
    assert est.feasible and est.dsp_used <= T.dsp_total and est.bram_bytes_used <= T.bram_bytes


def test_infeasible_memory():
    spec = one_layer(4096, 4096, (64, 64))
    est = estimate_fpga(spec, Q, make_tiling_plan((4096, 64, 64), 1), T)
    assert not est.feasible and est.bottleneck == "memory"


def test_bram_formula_and_trends():
    spec = instantiate(skynet_genome("C"))
    b12 = estimate_bram(spec, QuantScheme(12, 11))
    b16 = estimate_bram(spec, QuantScheme(16, 11))
    assert b16 >= b12
    # hand value: the largest tile is bundle 1's 48 x 160 x 320 map cut into 8 x 8 tiles of
    # 20 x 40 (the 1280-channel concat tile is only 1280 x 3 x 5); the largest weight is b5's 384 x 512
    fm = 48 * 20 * 40
    assert fm > fm_tile_elems(1280, (20, 40), (8, 8))
    w = 384 * 512
    assert estimate_bram(spec, QuantScheme(16, 11)) == 2 * math.ceil(fm * 16 / 8) + math.ceil(w * 11 / 8)


def test_resize_shrinks_pre_pool_tiles():
    spec = instantiate(skynet_genome("C"))
    half = resized(spec, 0.5)
    for a, b in zip(spec.layers, half.layers):
        if a.name.startswith("b1."):
            assert fm_tile_elems(a.cout, a.out_hw, T.fm_tile_grid) >= 4 * fm_tile_elems(b.cout, b.out_hw, T.fm_tile_grid)


def test_empty_spec_bram():
    spec = NetworkSpec((), (3, 16, 16))
    assert estimate_bram(spec, QuantScheme(8, 8)) == 2 * fm_tile_elems(3, (16, 16), (8, 8))


@given(st.integers(0, 2**32 - 1), st.sampled_from([8, 12, 16]), st.integers(1, 8))
def test_bram_monotone_in_fm_bits(seed, fm, d):
    g = random_genome(np.random.default_rng(seed), GenomeBounds(depth=(1, 6)))
    spec = instantiate(g)
    assert estimate_bram(spec, QuantScheme(fm + d, 11)) >= estimate_bram(spec, QuantScheme(fm, 11))


def _lat_bram(g, shape=(3, 64, 128)):
    spec = instantiate(g, shape)
    e = estimate_fpga(spec, Q, make_tiling_plan(shape), T)
    return e.latency_ms, e.bram_bytes_used


BOUNDS = GenomeBounds(depth=(1, 5), pools=(0, 3), input_shape=(3, 64, 128))


@given(st.integers(0, 2**32 - 1), st.data())
def test_monotone_in_width(seed, data):
    g = random_genome(np.random.default_rng(seed), BOUNDS)
    i = data.draw(st.integers(0, g.depth - 1))
    ws = list(BOUNDS.widths)
    k = ws.index(g.fv1[i])
    if k + 1 == len(ws):
        return
    fv1 = list(g.fv1)
    fv1[i] = ws[k + 1]
    wider = NetworkGenome(g.bundle_id, tuple(fv1), g.fv2)
    a, b = _lat_bram(g), _lat_bram(wider)
    assert b[0] >= a[0] and b[1] >= a[1]


@given(st.integers(0, 2**32 - 1), st.sampled_from(GenomeBounds().widths))
def test_monotone_in_added_bundle(seed, w):
    g = random_genome(np.random.default_rng(seed), BOUNDS)
    longer = NetworkGenome(g.bundle_id, g.fv1 + (w,), g.fv2 + (0,))
    a, b = _lat_bram(g), _lat_bram(longer)
    assert b[0] >= a[0] and b[1] >= a[1]


@given(st.integers(0, 2**32 - 1))
def test_monotone_in_input_area(seed):
    g = random_genome(np.random.default_rng(seed), BOUNDS)
    a, b = _lat_bram(g, (3, 64, 128)), _lat_bram(g, (3, 128, 256))
    assert b[0] >= a[0] and b[1] >= a[1]


@given(st.integers(0, 2**32 - 1))
def test_overlap_never_hurts(seed):
    g = random_genome(np.random.default_rng(seed), BOUNDS)
    spec = instantiate(g, (3, 64, 128))
    plan = make_tiling_plan((3, 64, 128))
    on = estimate_fpga(spec, Q, plan, T, overlap=True)
    off = estimate_fpga(spec, Q, plan, T, overlap=False)
    assert 0 < on.latency_ms <= off.latency_ms


@given(st.integers(0, 2**32 - 1))
def test_tiling_macs_scale_with_batch(seed):
    g = random_genome(np.random.default_rng(seed), BOUNDS)
    spec = instantiate(g, (3, 64, 128))
    one = estimate_fpga(spec, Q, make_tiling_plan((3, 64, 128), 1), T)
    four = estimate_fpga(spec, Q, make_tiling_plan((3, 64, 128), 4), T)
    assert four.macs == 4 * one.macs


def test_gpu_examples():
    spec = one_layer(1000, 1000, (10, 100))
    t = GpuTarget(peak_gflops=665, efficiency=0.3, scale_factor=1)
    assert estimate_gpu(spec, t).latency_ms == pytest.approx(2 / 199.5 * 1e3, rel=1e-12)
    assert abs(estimate_gpu(spec, t).latency_ms - 10.03) < 0.01
    t2 = GpuTarget(scale_factor=2)
    assert estimate_gpu(spec, t2).latency_ms == 2 * estimate_gpu(spec, t).latency_ms
    assert estimate_gpu(NetworkSpec((), (3, 4, 4)), t).latency_ms == 0


def test_tiling_plans():
    p = make_tiling_plan((3, 160, 320), 4)
    assert p.tile_grid == (2, 2) and p.stitched_shape == (1, 3, 320, 640)
    p1 = make_tiling_plan((3, 160, 320), 1)
    assert p1.tile_grid == (1, 1) and p1.stitched_shape == (1, 3, 160, 320)
    p9 = make_tiling_plan((3, 160, 320), 9)
    assert p9.tile_grid == (3, 3) and p9.stitched_shape[2:] == (480, 960)
    with pytest.raises(ValueError):
        make_tiling_plan((3, 160, 320), 3)


def test_demux_box():
    p = make_tiling_plan((3, 160, 320), 4)
    assert p.tile_offset(3) == (160, 320)
    k, box = p.demux_box((0.6, 0.1, 0.8, 0.3))
    assert k == 1
    np.testing.assert_allclose(box, (0.2, 0.2, 0.6, 0.6))


def test_profiles_load():
    assert load_profile("ultra96") == FpgaTarget()
    assert load_profile("tx2") == GpuTarget()
    assert T.peak_gops == 144.0
    with pytest.raises(FileNotFoundError):
        load_profile("nope")


def test_target_validation():
    with pytest.raises(ValueError):
        FpgaTarget(dsp_total=0)
    with pytest.raises(ValueError):
        GpuTarget(efficiency=1.5)


def test_pipeline_fps():
    assert pipeline_fps([10, 20, 5]) == 50.0
    assert pipeline_fps([10, 20, 5], overlapped=False) == pytest.approx(1000 / 35)
