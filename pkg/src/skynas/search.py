"""Group-based particle swarm search over network genomes.

Each bundle type is one group of ``N`` particles; particles only ever move
toward their own best and their group's best, so groups never mix. One
iteration:

1. fast-train every particle for ``epoch_schedule[itr]`` epochs and estimate
   its latency;
2. score ``fitness = acc + alpha * (est - tar)``;
3. update local bests and group bests (ties: lower latency, then lower index);
4. except after the last iteration, move each particle.

A move visits every position independently: with probability ``r_local`` it
takes one alphabet step toward the local best, with probability ``r_group``
one step toward the group best (opposite steps cancel). Pool bits move the
same way. Repair then clamps widths to the alphabet and drops the most
recently toggled pools while over the pool limit.

Evaluations run in worker processes when ``workers > 1``; results are merged
by particle index, so the report does not depend on the worker count.
"""
import csv
import hashlib
import io
import itertools
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .genome import BUNDLES, GenomeBounds, GenomeError, NetworkGenome, instantiate, random_genome


class SearchError(ValueError):
    pass


def linear_schedule(iterations, start=2, stop=10):
    """Epochs per iteration growing linearly from ``start`` to ``stop``."""
    if iterations == 1:
        return (start,)
    return tuple(int(round(start + (stop - start) * i / (iterations - 1))) for i in range(iterations))


@dataclass(frozen=True)
class SwarmConfig:
    M: int = 1
    N: int = 8
    I: int = 10
    alpha: float = -0.01
    tar: float = 30.0
    epoch_schedule: Optional[tuple] = None
    rng_seed: int = 0
    r_local: float = 0.5
    r_group: float = 0.3
    inertia: float = 0.0
    mutation: float = 0.0
    bundle_ids: Optional[tuple] = None
    bounds: GenomeBounds = field(default_factory=GenomeBounds)

    def __post_init__(self):
        if min(self.M, self.N, self.I) < 1:
            raise SearchError(f"M, N and I must all be at least 1, got {self.M}, {self.N}, {self.I}")
        if not self.alpha < 0:
            raise SearchError(f"alpha must be negative, got {self.alpha}")
        sched = linear_schedule(self.I) if self.epoch_schedule is None else tuple(int(e) for e in self.epoch_schedule)
        if len(sched) != self.I:
            raise SearchError(f"epoch schedule has {len(sched)} entries for {self.I} iterations")
        if any(b < a for a, b in zip(sched, sched[1:])) or min(sched) < 1:
            raise SearchError(f"epoch schedule must be positive and non-decreasing, got {sched}")
        object.__setattr__(self, "epoch_schedule", sched)
        ids = tuple(sorted(BUNDLES))[: self.M] if self.bundle_ids is None else tuple(self.bundle_ids)
        if len(ids) != self.M or len(set(ids)) != self.M:
            raise SearchError(f"need {self.M} distinct bundle ids, got {ids}")
        for b in ids:
            if b not in BUNDLES:
                raise SearchError(f"unknown bundle id {b}")
        object.__setattr__(self, "bundle_ids", ids)
        for k in ("r_local", "r_group", "inertia", "mutation"):
            if not 0 <= getattr(self, k) <= 1:
                raise SearchError(f"{k} must be a probability, got {getattr(self, k)}")

    def to_dict(self):
        return {
            "M": self.M,
            "N": self.N,
            "I": self.I,
            "alpha": self.alpha,
            "tar": self.tar,
            "epoch_schedule": list(self.epoch_schedule),
            "rng_seed": self.rng_seed,
            "r_local": self.r_local,
            "r_group": self.r_group,
            "inertia": self.inertia,
            "mutation": self.mutation,
            "bundle_ids": list(self.bundle_ids),
            "bounds": self.bounds.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "bounds" in d:
            b = dict(d["bounds"])
            d["bounds"] = GenomeBounds(**{k: tuple(v) if isinstance(v, list) else v for k, v in b.items()})
        for k in ("epoch_schedule", "bundle_ids"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def fitness(acc, est, tar, alpha):
    if not alpha < 0:
        raise SearchError(f"alpha must be negative, got {alpha}")
    return acc + alpha * (est - tar)


# --- particles ----------------------------------------------------------------

@dataclass(frozen=True)
class Best:
    genome: NetworkGenome
    fitness: float
    latency: float


@dataclass
class Particle:
    index: int
    genome: NetworkGenome
    fitness: float = -math.inf
    accuracy: float = 0.0
    latency_est: float = math.inf
    local_best: Optional[Best] = None
    last_move: Optional[tuple] = None


@dataclass
class GroupState:
    group_id: int
    particles: list
    group_best: Optional[Best] = None


@dataclass(frozen=True)
class Velocity:
    dfv1: tuple
    dfv2: tuple

    def __post_init__(self):
        if len(self.dfv1) != len(self.dfv2):
            raise SearchError("velocity components must have equal length")

    @property
    def is_zero(self):
        return not any(self.dfv1) and not any(self.dfv2)


def _width_index(w, widths):
    """Index of ``w`` in the sorted alphabet; off-alphabet widths snap to the nearest entry."""
    widths = tuple(widths)
    if w in widths:
        return widths.index(w)
    return int(np.argmin([abs(a - w) for a in widths]))


def get_velocity(current: NetworkGenome, best: NetworkGenome, widths=None) -> Velocity:
    if current.depth != best.depth:
        raise SearchError(f"velocity needs equal depths, got {current.depth} and {best.depth}")
    if current.bundle_id != best.bundle_id:
        raise SearchError("velocity across bundle types is undefined; groups never mix")
    widths = sorted(set(current.fv1) | set(best.fv1)) if widths is None else tuple(widths)
    d1 = tuple(_width_index(b, widths) - _width_index(c, widths) for c, b in zip(current.fv1, best.fv1))
    d2 = tuple(b - c for c, b in zip(current.fv2, best.fv2))
    return Velocity(d1, d2)


def _sign(v):
    return (v > 0) - (v < 0)


def repair(fv1_idx, fv2, toggled_on, bounds: GenomeBounds):
    """Clamp width indices and fix the pool count; ``toggled_on`` lists positions switched on, in order."""
    n = len(bounds.widths)
    fv1_idx = [min(max(i, 0), n - 1) for i in fv1_idx]
    fv2 = list(fv2)
    limit = bounds.pool_limit(len(fv2))
    order = list(toggled_on)
    while sum(fv2) > limit:
        k = order.pop() if order else max(i for i, m in enumerate(fv2) if m)
        fv2[k] = 0
    k = len(fv2) - 1
    while sum(fv2) < bounds.pools[0]:
        if not fv2[k]:
            fv2[k] = 1
        k -= 1
    return fv1_idx, fv2


def evolve(p: Particle, v_local: Velocity, v_group: Velocity, rng, cfg: SwarmConfig) -> NetworkGenome:
    """Move a particle toward its local and group bests; always returns a valid genome."""
    g = p.genome
    depth = g.depth
    if len(v_local.dfv1) != depth or len(v_group.dfv1) != depth:
        raise SearchError("velocities must match the genome depth")
    bounds = cfg.bounds
    u = rng.random((depth, 4))
    mut = rng.random((depth, 2))
    mut_dir = rng.integers(0, 2, size=depth) * 2 - 1
    idx = [_width_index(w, bounds.widths) for w in g.fv1]
    fv2 = list(g.fv2)
    moves1, moves2 = [], []
    toggled = []
    last = p.last_move
    for k in range(depth):
        s = 0
        if u[k, 0] < cfg.r_local:
            s += _sign(v_local.dfv1[k])
        if u[k, 1] < cfg.r_group:
            s += _sign(v_group.dfv1[k])
        t = 0
        if u[k, 2] < cfg.r_local:
            t += v_local.dfv2[k]
        if u[k, 3] < cfg.r_group:
            t += v_group.dfv2[k]
        if last is not None and s == 0 and t == 0 and mut[k, 0] < cfg.inertia:
            s, t = last[0][k], last[1][k]
        if cfg.mutation and mut[k, 1] < cfg.mutation:
            if mut_dir[k] > 0:
                s = s or int(mut_dir[k])
            else:
                t = t or (1 - 2 * fv2[k])
        idx[k] += s
        new = min(max(fv2[k] + t, 0), 1)
        if new and not fv2[k]:
            toggled.append(k)
        moves1.append(s)
        moves2.append(new - fv2[k])
        fv2[k] = new
    idx, fv2 = repair(idx, fv2, toggled, bounds)
    p.last_move = (tuple(moves1), tuple(moves2))
    return NetworkGenome(g.bundle_id, tuple(bounds.widths[i] for i in idx), tuple(fv2), None, g.activation)


def initial_population(cfg: SwarmConfig):
    rng = np.random.default_rng(cfg.rng_seed)
    groups = []
    n = 0
    for gid in cfg.bundle_ids:
        parts = []
        for _ in range(cfg.N):
            try:
                g = random_genome(rng, cfg.bounds, bundle_id=gid)
            except GenomeError as e:
                raise SearchError(f"cannot sample a genome: {e}") from None
            parts.append(Particle(n, g))
            n += 1
        groups.append(GroupState(gid, parts))
    return groups


# --- evaluators ----------------------------------------------------------------

def _unit_hash(*parts):
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0 ** 64


@dataclass(frozen=True)
class SurrogateEvaluator:
    """Closed-form accuracy landscape peaking at ``optimum``.

    ``acc = (peak - w_step * width steps - p_step * pool mismatches + noise * h) * (1 - 2**-epochs)``
    where ``h`` in [0, 1) is a fixed hash of the genome. Deterministic.
    """

    optimum: NetworkGenome
    widths: tuple
    peak: float = 0.9
    w_step: float = 0.04
    p_step: float = 0.06
    noise: float = 0.01
    seed: int = 0

    def __call__(self, genome, epochs):
        if genome.depth != self.optimum.depth:
            base = 0.1
        else:
            dw = sum(abs(_width_index(a, self.widths) - _width_index(b, self.widths))
                     for a, b in zip(genome.fv1, self.optimum.fv1))
            dp = sum(a != b for a, b in zip(genome.fv2, self.optimum.fv2))
            base = self.peak - self.w_step * dw - self.p_step * dp
        base += self.noise * _unit_hash(self.seed, genome.key())
        return min(max(base, 0.0), 1.0) * (1.0 - 2.0 ** -epochs)


@dataclass(frozen=True)
class MacLatency:
    """Latency proxy: MACs at ``input_shape`` divided by ``gmacs`` GMAC/s."""

    input_shape: tuple = (3, 32, 64)
    gmacs: float = 0.05

    def __call__(self, genome):
        from .genome import macs_count

        return macs_count(instantiate(genome, self.input_shape)) / (self.gmacs * 1e6)


@dataclass
class TinyTrainerEvaluator:
    """Fast-train a genome on a synthetic split and return its held-out mean IoU."""

    train_set: object
    val_set: object
    seed: int = 0
    batch_size: int = 16
    lr: float = 0.05

    def __call__(self, genome, epochs):
        from .model import Model
        from .train import TrainConfig, evaluate, fit_anchors, train

        shape = (3,) + tuple(self.train_set.images.shape[2:])
        model = Model.initialize(instantiate(genome, shape), self.seed, fit_anchors(self.train_set.boxes))
        cfg = TrainConfig(epochs=epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed)
        model, _ = train(model, self.train_set, cfg)
        return float(evaluate(model, self.val_set)[0].mean())


def enumerate_genomes(bounds: GenomeBounds, bundle_id=None):
    """Every genome inside ``bounds`` (no bypass); meant for small landscapes."""
    bundle_id = bounds.bundle_ids[0] if bundle_id is None else bundle_id
    out = []
    for depth in range(bounds.depth[0], bounds.depth[1] + 1):
        limit = bounds.pool_limit(depth)
        masks = [m for m in itertools.product((0, 1), repeat=depth) if bounds.pools[0] <= sum(m) <= limit]
        for fv1 in itertools.product(bounds.widths, repeat=depth):
            for m in masks:
                out.append(NetworkGenome(bundle_id, fv1, m, None, bounds.activation))
    return out


def genome_distance(a: NetworkGenome, b: NetworkGenome, widths):
    """Alphabet steps plus pool-bit flips between equal-depth genomes."""
    if a.depth != b.depth:
        return math.inf
    v = get_velocity(a, b, widths)
    return sum(abs(x) for x in v.dfv1) + sum(abs(x) for x in v.dfv2)


# --- reports --------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRecord:
    iteration: int
    group: int
    particle: int
    genome: NetworkGenome
    accuracy: float
    latency_ms: float
    fitness: float
    epochs: int
    failed: bool = False
    error: str = ""

    def to_dict(self):
        return {
            "particle": self.particle,
            "group": self.group,
            "genome": self.genome.to_dict(),
            "accuracy": self.accuracy,
            "latency_ms": self.latency_ms,
            "fitness": self.fitness,
            "failed": self.failed,
            **({"error": self.error} if self.error else {}),
        }


@dataclass
class SearchReport:
    config: dict
    iterations: list = field(default_factory=list)  # per iteration: {"epochs", "records", "group_bests"}
    pareto: list = field(default_factory=list)
    group_bests: dict = field(default_factory=dict)

    def best_fitness_history(self, group):
        return [it["group_bests"][group].fitness for it in self.iterations]

    def records(self):
        return [r for it in self.iterations for r in it["records"]]

    def to_dict(self):
        def best(b):
            return {"genome": b.genome.to_dict(), "fitness": b.fitness, "latency_ms": b.latency}

        return {
            "format": "skynas-search-report-v1",
            "config": self.config,
            "iterations": [
                {
                    "iteration": i + 1,
                    "epochs": it["epochs"],
                    "particles": [r.to_dict() for r in it["records"]],
                    "group_bests": {int(g): best(b) for g, b in it["group_bests"].items()},
                }
                for i, it in enumerate(self.iterations)
            ],
            "group_bests": {int(g): best(b) for g, b in self.group_bests.items()},
            "pareto_front": [
                {"genome": r.genome.to_dict(), "accuracy": r.accuracy, "latency_ms": r.latency_ms,
                 "iteration": r.iteration, "particle": r.particle}
                for r in self.pareto
            ],
        }

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "group", "particle", "acc", "latency_ms", "fitness"])
        for r in self.records():
            w.writerow([r.iteration, r.group, r.particle, repr(r.accuracy), repr(r.latency_ms), repr(r.fitness)])
        return buf.getvalue()


def pareto_front(points, acc=lambda p: p[0], lat=lambda p: p[1]):
    """Points not dominated in (higher accuracy, lower latency), sorted by latency."""
    pts = list(points)
    out = []
    for i, p in enumerate(pts):
        dominated = False
        for j, q in enumerate(pts):
            if i == j:
                continue
            ge = acc(q) >= acc(p) and lat(q) <= lat(p)
            strict = acc(q) > acc(p) or lat(q) < lat(p)
            if ge and (strict or j < i):
                dominated = True
                break
        if not dominated:
            out.append(p)
    return sorted(out, key=lambda p: (lat(p), -acc(p)))


# --- orchestration ---------------------------------------------------------------

_WORKER = {}


def _init_worker(evaluator, estimator):
    _WORKER["evaluator"] = evaluator
    _WORKER["estimator"] = estimator


def _evaluate(evaluator, estimator, genome, epochs):
    try:
        acc = float(evaluator(genome, epochs))
        est = float(estimator(genome))
        if not (0.0 <= acc <= 1.0) or not math.isfinite(est) or est < 0:
            raise SearchError(f"evaluator returned accuracy {acc}, latency {est}")
        return acc, est, ""
    except Exception as e:  # noqa: BLE001 - a failed candidate must not end the search
        return 0.0, math.inf, f"{type(e).__name__}: {e}"


def _evaluate_in_worker(genome, epochs):
    return _evaluate(_WORKER["evaluator"], _WORKER["estimator"], genome, epochs)


def _rank_key(best: Best, index):
    return (-best.fitness, best.latency, index)


def _better(a: Best, b: Optional[Best]):
    return b is None or (a.fitness, -a.latency) > (b.fitness, -b.latency)


def run_search(cfg: SwarmConfig, evaluator, hw_estimator, workers=1, on_iteration=None) -> SearchReport:
    """Run the swarm for ``cfg.I`` iterations; see the module docstring for the loop."""
    groups = initial_population(cfg)
    rng = np.random.default_rng([cfg.rng_seed, 1])
    report = SearchReport(cfg.to_dict())
    cache = {}
    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(
            max_workers=workers,
            mp_context=multiprocessing.get_context("fork"),
            initializer=_init_worker,
            initargs=(evaluator, hw_estimator),
        )
    try:
        for itr in range(cfg.I):
            epochs = cfg.epoch_schedule[itr]
            particles = [p for grp in groups for p in grp.particles]
            todo = []
            for p in particles:
                key = (p.genome.key(), epochs)
                if key not in cache and key not in {k for k, _ in todo}:
                    todo.append((key, p.genome))
            if pool is not None:
                results = list(pool.map(_evaluate_in_worker, [g for _, g in todo], [epochs] * len(todo)))
            else:
                results = [_evaluate(evaluator, hw_estimator, g, epochs) for _, g in todo]
            for (key, _), res in zip(todo, results):
                cache[key] = res
            records = []
            for grp in groups:
                for p in grp.particles:
                    acc, est, err = cache[(p.genome.key(), epochs)]
                    fit = -math.inf if err else fitness(acc, est, cfg.tar, cfg.alpha)
                    p.accuracy, p.latency_est, p.fitness = acc, est, fit
                    cand = Best(p.genome, fit, est)
                    if _better(cand, p.local_best):
                        p.local_best = cand
                    records.append(EvalRecord(itr + 1, grp.group_id, p.index, p.genome, acc, est, fit, epochs,
                                              bool(err), err))
                best_p = min(grp.particles, key=lambda q: _rank_key(q.local_best, q.index))
                if _better(best_p.local_best, grp.group_best):
                    grp.group_best = best_p.local_best
            report.iterations.append({
                "epochs": epochs,
                "records": records,
                "group_bests": {grp.group_id: grp.group_best for grp in groups},
            })
            if on_iteration is not None:
                on_iteration(itr + 1, report)
            if itr == cfg.I - 1:
                break
            for grp in groups:
                for p in grp.particles:
                    vl = _velocity_or_zero(p.genome, p.local_best.genome, cfg)
                    vg = _velocity_or_zero(p.genome, grp.group_best.genome, cfg)
                    p.genome = evolve(p, vl, vg, rng, cfg)
    finally:
        if pool is not None:
            pool.shutdown()
    report.group_bests = {grp.group_id: grp.group_best for grp in groups}
    report.pareto = _report_pareto(report.records())
    return report


def _velocity_or_zero(cur, best, cfg):
    if cur.depth != best.depth:
        # genomes of different depth have no positional correspondence
        return Velocity((0,) * cur.depth, (0,) * cur.depth)
    return get_velocity(cur, best, cfg.bounds.widths)


def _report_pareto(records):
    latest = {}
    for r in records:
        if not r.failed:
            latest[r.genome.key()] = r  # later iterations train longer
    return pareto_front(latest.values(), acc=lambda r: r.accuracy, lat=lambda r: r.latency_ms)


# --- bundle selection -------------------------------------------------------------

@dataclass(frozen=True)
class SketchConfig:
    """Fixed front/back structure used to compare bundles on equal footing."""

    fv1: tuple = (48, 96, 192)
    fv2: tuple = (1, 1, 1)
    epochs: int = 2
    activation: str = "relu6"


@dataclass(frozen=True)
class BundleResult:
    bundle_id: int
    accuracy: float
    latency_ms: float


def bundle_stage1_evaluate(bundles, evaluator, hw_estimator, sketch_cfg: SketchConfig = SketchConfig()):
    """Fast-train one sketch per bundle and keep the accuracy/latency Pareto set."""
    bundles = list(bundles)
    if not bundles:
        raise SearchError("need at least one candidate bundle")
    results = []
    for b in bundles:
        bid = b.id if hasattr(b, "id") else int(b)
        g = NetworkGenome(bid, sketch_cfg.fv1, sketch_cfg.fv2, None, sketch_cfg.activation)
        results.append(BundleResult(bid, float(evaluator(g, sketch_cfg.epochs)), float(hw_estimator(g))))
    return pareto_front(results, acc=lambda r: r.accuracy, lat=lambda r: r.latency_ms)
