import math

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from skynas.genome import BUNDLES, GenomeBounds, NetworkGenome
from skynas.search import (
    Particle,
    SearchError,
    SurrogateEvaluator,
    MacLatency,
    SwarmConfig,
    Velocity,
    bundle_stage1_evaluate,
    enumerate_genomes,
    evolve,
    fitness,
    genome_distance,
    get_velocity,
    initial_population,
    linear_schedule,
    pareto_front,
    repair,
    run_search,
)

SMALL = GenomeBounds(depth=(4, 4), widths=(8, 16, 32, 64), pools=(0, 4), input_shape=(3, 32, 64))
OPT = NetworkGenome(0, (16, 32, 32, 64), (1, 0, 1, 0))


def small_cfg(**kw):
    base = dict(M=1, N=8, I=5, alpha=-5e-3, tar=100.0, bounds=SMALL)
    base.update(kw)
    return SwarmConfig(**base)


# --- fitness --------------------------------------------------------------------

def test_fitness_examples():
    assert fitness(0.7, 30, 30, -0.01) == 0.7
    assert fitness(0.7, 40, 30, -0.01) == pytest.approx(0.6, abs=1e-15)
    assert fitness(0.7, 20, 30, -0.01) > 0.7
    with pytest.raises(SearchError):
        fitness(0.5, 1, 1, 0.0)


@given(st.floats(0, 1), st.floats(0, 1e4), st.floats(-10, -1e-6))
def test_fitness_collapse_at_target(acc, tar, alpha):
    assert fitness(acc, tar, tar, alpha) == acc


# --- config ---------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(SearchError):
        SwarmConfig(alpha=0.1)
    with pytest.raises(SearchError):
        SwarmConfig(N=0)
    with pytest.raises(SearchError):
        SwarmConfig(I=3, epoch_schedule=(3, 2, 4))
    with pytest.raises(SearchError):
        SwarmConfig(I=3, epoch_schedule=(1, 2))
    with pytest.raises(SearchError):
        SwarmConfig(M=len(BUNDLES) + 1)


def test_default_schedule_and_round_trip():
    assert linear_schedule(5) == (2, 4, 6, 8, 10)
    assert linear_schedule(1) == (2,)
    cfg = small_cfg(mutation=0.2)
    assert SwarmConfig.from_dict(yaml.safe_load(yaml.safe_dump(cfg.to_dict()))) == cfg


# --- population -----------------------------------------------------------------

def test_initial_population_counts():
    groups = initial_population(SwarmConfig(M=3, N=5))
    assert [len(g.particles) for g in groups] == [5, 5, 5]
    assert [g.group_id for g in groups] == [0, 1, 2]
    assert len({p.index for g in groups for p in g.particles}) == 15


def test_initial_population_deterministic():
    a = initial_population(SwarmConfig(M=2, N=4, rng_seed=9))
    b = initial_population(SwarmConfig(M=2, N=4, rng_seed=9))
    assert [p.genome for g in a for p in g.particles] == [p.genome for g in b for p in g.particles]


def test_initial_population_valid_over_seeds():
    for s in range(100):
        cfg = SwarmConfig(M=2, N=4, rng_seed=s, bounds=GenomeBounds(depth=(2, 6)))
        for g in initial_population(cfg):
            for p in g.particles:
                p.genome.validate(cfg.bounds)


def test_unsatisfiable_population():
    with pytest.raises(SearchError):
        initial_population(SwarmConfig(bounds=GenomeBounds(depth=(1, 4), pools=(4, 4))))


# --- velocity and evolution -----------------------------------------------------

def test_velocity_examples():
    a = NetworkGenome(0, (48, 96), (0, 0))
    assert get_velocity(a, a).is_zero
    v = get_velocity(a, NetworkGenome(0, (96, 96), (0, 0)), (24, 48, 96, 192))
    assert v.dfv1 == (1, 0)
    v = get_velocity(NetworkGenome(0, (8, 8, 8), (1, 0, 1)), NetworkGenome(0, (8, 8, 8), (1, 1, 0)))
    assert v.dfv2 == (0, 1, -1)
    with pytest.raises(SearchError):
        get_velocity(a, NetworkGenome(0, (48,), (0,)))


def test_evolve_fixed_point():
    p = Particle(0, OPT)
    z = Velocity((0,) * 4, (0,) * 4)
    assert evolve(p, z, z, np.random.default_rng(0), small_cfg()) == OPT


def test_evolve_full_local_step():
    cur = NetworkGenome(0, (8, 64, 32, 8), (0, 0, 1, 1))
    best = NetworkGenome(0, (64, 8, 32, 8), (1, 0, 0, 1))
    cfg = small_cfg(r_local=1.0, r_group=0.0)
    z = Velocity((0,) * 4, (0,) * 4)
    new = evolve(Particle(0, cur), get_velocity(cur, best, SMALL.widths), z, np.random.default_rng(0), cfg)
    assert new.fv1 == (16, 32, 32, 8)
    assert new.fv2 == best.fv2


def test_repair_drops_latest_toggles():
    b = GenomeBounds(depth=(4, 4), pools=(0, 2))
    idx, fv2 = repair([-1, 2, 9, 0], [1, 1, 1, 1], [3, 1], b)
    assert idx == [0, 2, len(b.widths) - 1, 0]
    assert fv2 == [1, 0, 1, 0]
    idx, fv2 = repair([0] * 4, [0, 0, 0, 0], [], GenomeBounds(depth=(4, 4), pools=(1, 2)))
    assert sum(fv2) == 1


def test_thousand_evolutions_valid():
    cfg = small_cfg(mutation=0.3, inertia=0.3, bounds=GenomeBounds(depth=(5, 5), pools=(1, 3)))
    rng = np.random.default_rng(0)
    from skynas.genome import random_genome

    for _ in range(1000):
        p = Particle(0, random_genome(rng, cfg.bounds), last_move=None)
        a, b = random_genome(rng, cfg.bounds), random_genome(rng, cfg.bounds)
        for _ in range(2):
            g = evolve(p, get_velocity(p.genome, a, cfg.bounds.widths), get_velocity(p.genome, b, cfg.bounds.widths), rng, cfg)
            g.validate(cfg.bounds)
            p.genome = g


# --- landscape helpers ----------------------------------------------------------

def test_enumerate_small_landscape():
    gs = enumerate_genomes(SMALL)
    assert len(gs) == 4**4 * 2**4 == 4096
    assert len(set(g.key() for g in gs)) == 4096


def test_surrogate_peak_and_determinism():
    ev = SurrogateEvaluator(OPT, SMALL.widths)
    assert ev(OPT, 10) == ev(OPT, 10)
    accs = {g: ev(g, 10) for g in enumerate_genomes(SMALL)}
    assert max(accs, key=accs.get) == OPT
    assert all(0 <= a <= 1 for a in accs.values())
    assert ev(OPT, 2) < ev(OPT, 10)


def test_genome_distance():
    assert genome_distance(OPT, OPT, SMALL.widths) == 0
    g = NetworkGenome(0, (8, 32, 32, 64), (1, 0, 1, 1))
    assert genome_distance(OPT, g, SMALL.widths) == 2
    assert genome_distance(OPT, NetworkGenome(0, (8,), (0,)), SMALL.widths) == math.inf


# --- run_search -----------------------------------------------------------------

EV = SurrogateEvaluator(OPT, SMALL.widths)
LAT = MacLatency((3, 32, 64))


def test_single_iteration():
    r = run_search(small_cfg(I=1), EV, LAT)
    assert len(r.iterations) == 1
    assert r.group_bests[0].fitness == max(rec.fitness for rec in r.records())


def test_group_best_monotone_and_isolation():
    cfg = small_cfg(M=2, N=4, I=6, bounds=GenomeBounds(depth=(4, 4), widths=SMALL.widths, input_shape=(3, 32, 64)))
    r = run_search(cfg, lambda g, e: EV(NetworkGenome(0, g.fv1, g.fv2), e), LAT)
    for gid in (0, 1):
        h = r.best_fitness_history(gid)
        assert all(b >= a for a, b in zip(h, h[1:]))
    members = {}
    for rec in r.records():
        members.setdefault(rec.iteration, {}).setdefault(rec.group, set()).add(rec.particle)
        assert rec.genome.bundle_id == rec.group
        rec.genome.validate(cfg.bounds)
    assert len({tuple(sorted((g, tuple(sorted(p))) for g, p in m.items())) for m in members.values()}) == 1


def test_huge_alpha_picks_fastest():
    r = run_search(small_cfg(alpha=-1e6, I=4), EV, LAT)
    fastest = min(rec.latency_ms for rec in r.records())
    assert r.group_bests[0].latency == fastest


def test_failed_evaluation_scores_minus_inf():
    def flaky(g, e):
        if g.fv1[0] == 8:
            raise RuntimeError("boom")
        return EV(g, e)

    r = run_search(small_cfg(I=3), flaky, LAT)
    failed = [rec for rec in r.records() if rec.failed]
    assert failed and all(rec.fitness == -math.inf and "boom" in rec.error for rec in failed)
    assert all(not rec.failed for rec in r.pareto)


def test_report_outputs():
    r = run_search(small_cfg(I=2), EV, LAT)
    d = yaml.safe_load(r.to_yaml())
    assert d["format"] == "skynas-search-report-v1" and len(d["iterations"]) == 2
    lines = r.to_csv().splitlines()
    assert lines[0] == "iteration,group,particle,acc,latency_ms,fitness"
    assert len(lines) == 1 + 2 * 8


def test_workers_identical_report():
    a = run_search(small_cfg(I=4), EV, LAT, workers=1)
    b = run_search(small_cfg(I=4), EV, LAT, workers=3)
    assert a.to_yaml() == b.to_yaml()


# --- Pareto and bundle stage --------------------------------------------------------

def test_pareto_examples():
    assert pareto_front([(0.9, 10), (0.8, 5), (0.7, 20)]) == [(0.8, 5), (0.9, 10)]
    assert pareto_front([(0.5, 1)]) == [(0.5, 1)]
    assert pareto_front([(0.9, 1), (0.8, 2)]) == [(0.9, 1)]
    assert pareto_front([(0.9, 1), (0.9, 1)]) == [(0.9, 1)]


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 100)), min_size=1, max_size=20))
def test_pareto_non_dominated(points):
    front = pareto_front(points)
    assert front
    for p in front:
        assert not any(q[0] >= p[0] and q[1] <= p[1] and q != p for q in points)
    for p in points:
        assert any(q[0] >= p[0] and q[1] <= p[1] for q in front)


def test_bundle_stage1():
    acc = {0: 0.9, 1: 0.8, 2: 0.7}
    lat = {0: 10.0, 1: 5.0, 2: 20.0}
    res = bundle_stage1_evaluate([0, 1, 2], lambda g, e: acc[g.bundle_id], lambda g: lat[g.bundle_id])
    assert sorted(r.bundle_id for r in res) == [0, 1]
    res = bundle_stage1_evaluate([BUNDLES[2]], lambda g, e: 0.5, lambda g: 1.0)
    assert [r.bundle_id for r in res] == [2]
    res = bundle_stage1_evaluate([0, 1], lambda g, e: acc[g.bundle_id], lambda g: 1.0)
    assert [r.bundle_id for r in res] == [0]
    with pytest.raises(SearchError):
        bundle_stage1_evaluate([], None, None)
