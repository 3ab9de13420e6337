"""Analytic latency and resource model for an IP-shared FPGA accelerator and a GPU.

FPGA model
----------
Each bundle replication is one invocation of a five-stage pipeline:

    Load -> EXE_CONV3 -> EXE_CONV1 -> EXE_Pooling -> WriteBack

Stage cycles for a bundle on a stitched input of ``batch`` images:

* Load: input feature map (plus any bypass concatenation) and the bundle's
  weights, divided by DRAM bytes per cycle;
* EXE_CONV3: depthwise MACs / multipliers of the 3x3 IP;
* EXE_CONV1: pointwise MACs / multipliers of the 1x1 IP;
* EXE_Pooling: pooled input elements / pooling lanes;
* WriteBack: output feature map (plus a bypass tap) / DRAM bytes per cycle.

With ping-pong buffers Load and WriteBack overlap the EXE stages and a
bundle costs ``max(stages)``; without, ``Load + max(EXE stages) + WriteBack``.
The detection head is a final CONV1-only invocation. Multipliers come from
the DSP budget: every MAC needs :func:`dsp_cost_per_mac` DSPs and a fixed
share of multipliers goes to the 3x3 IP.

Tile seams in stitched inputs are ignored: work scales exactly with the
number of stitched images.
"""
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .genome import NetworkSpec, instantiate, layer_macs
from .quant import QuantScheme

STAGES = ("load", "conv3", "conv1", "pool", "writeback")
BANDWIDTH_STAGES = ("load", "writeback")

PROFILE_DIR = Path(__file__).parent / "profiles"


@dataclass(frozen=True)
class FpgaTarget:
    """Defaults follow Ultra96: 360 DSPs at 200 MHz (144 GOPS peak), 0.95 MB BRAM."""

    name: str = "ultra96"
    dsp_total: int = 360
    bram_bytes: int = 950_000
    frequency_mhz: float = 200.0
    dsp_mult_width: tuple = (18, 27)
    operand_guard_bits: int = 4
    dram_bytes_per_cycle: float = 16.0
    conv3_share: float = 0.25
    pool_lanes: int = 64
    fm_tile_grid: tuple = (8, 8)

    def __post_init__(self):
        object.__setattr__(self, "dsp_mult_width", tuple(int(v) for v in self.dsp_mult_width))
        object.__setattr__(self, "fm_tile_grid", tuple(int(v) for v in self.fm_tile_grid))
        if min(self.fm_tile_grid) < 1:
            raise ValueError("fm_tile_grid entries must be positive")
        for k in ("dsp_total", "bram_bytes", "frequency_mhz", "dram_bytes_per_cycle", "pool_lanes"):
            if getattr(self, k) <= 0:
                raise ValueError(f"FPGA target {k} must be positive")
        if min(self.dsp_mult_width) <= 0 or self.operand_guard_bits < 0:
            raise ValueError("native multiplier widths must be positive, guard bits non-negative")
        if not 0 < self.conv3_share < 1:
            raise ValueError("conv3_share must be in (0, 1)")

    @property
    def peak_gops(self):
        return 2 * self.dsp_total * self.frequency_mhz / 1e3

    def to_dict(self):
        d = asdict(self)
        d["dsp_mult_width"] = list(self.dsp_mult_width)
        d["fm_tile_grid"] = list(self.fm_tile_grid)
        d["kind"] = "fpga"
        return d


@dataclass(frozen=True)
class GpuTarget:
    """Defaults follow TX2: 665 GFLOPS at 1300 MHz."""

    name: str = "tx2"
    peak_gflops: float = 665.0
    efficiency: float = 0.3
    scale_factor: float = 1.0

    def __post_init__(self):
        if self.peak_gflops <= 0 or self.scale_factor <= 0:
            raise ValueError("GPU peak and scale factor must be positive")
        if not 0 < self.efficiency <= 1:
            raise ValueError("GPU efficiency must be in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["kind"] = "gpu"
        return d


def load_profile(name_or_path):
    """Target from a YAML profile: a bundled name (``ultra96``, ``tx2``) or a file path."""
    p = Path(name_or_path)
    if not p.exists():
        p = PROFILE_DIR / f"{name_or_path}.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no target profile {name_or_path!r}")
    d = yaml.safe_load(p.read_text())
    return target_from_dict(d)


def target_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "fpga")
    if kind == "fpga":
        return FpgaTarget(**d)
    if kind == "gpu":
        return GpuTarget(**d)
    raise ValueError(f"unknown target kind {kind!r}")


@dataclass(frozen=True)
class TilingPlan:
    """``batch`` images stitched on a ``rows x cols`` grid into one input."""

    tile_grid: tuple
    tile_shape: tuple
    stitched_shape: tuple
    batch: int

    def tile_offset(self, k):
        """(row, col) pixel offset of image ``k`` inside the stitched input."""
        r, c = divmod(k, self.tile_grid[1])
        return r * self.tile_shape[1], c * self.tile_shape[2]

    def demux_box(self, box):
        """Map a stitched-normalized (x0, y0, x1, y1) box to ``(image index, box in that image)``."""
        rows, cols = self.tile_grid
        cx = (box[0] + box[2]) / 2
        cy = (box[1] + box[3]) / 2
        c = min(int(cx * cols), cols - 1)
        r = min(int(cy * rows), rows - 1)
        local = (
            box[0] * cols - c,
            box[1] * rows - r,
            box[2] * cols - c,
            box[3] * rows - r,
        )
        return r * cols + c, tuple(min(max(v, 0.0), 1.0) for v in local)


def make_tiling_plan(input_shape, batch=4):
    """Square stitching grid; ``input_shape`` is (C, H, W) or (1, C, H, W)."""
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 4:
        shape = shape[1:]
    if len(shape) != 3:
        raise ValueError(f"input shape must be (C, H, W), got {input_shape}")
    side = math.isqrt(batch)
    if batch < 1 or side * side != batch:
        raise ValueError(f"batch {batch} is not a perfect square")
    C, H, W = shape
    return TilingPlan((side, side), (C, H, W), (1, C, H * side, W * side), batch)


# --- resources ----------------------------------------------------------------

def dsp_cost_per_mac(q: QuantScheme, t: FpgaTarget) -> int:
    """DSP slices per multiply for ``w_bits x fm_bits`` operands.

    Each operand costs ``operand_guard_bits`` beyond its nominal width (sign
    extension and rounding headroom). Operands wider than the native port are
    split, multiplying the DSP count.
    """
    if q.w_bits < 1 or q.fm_bits < 1:
        raise ValueError("bit widths must be at least 1")
    a, b = t.dsp_mult_width
    g = t.operand_guard_bits
    return math.ceil((q.w_bits + g) / a) * math.ceil((q.fm_bits + g) / b)


def _bytes(elems, bits):
    return math.ceil(elems * bits / 8)


def _weight_elems(l):
    if l.op == "dw3":
        return 9 * l.cin + (l.cout if l.bias else 0)
    if l.op == "pw1":
        return l.cin * l.cout + (l.cout if l.bias else 0)
    return 0


def fm_tile_elems(channels, hw, grid):
    """Elements of one spatial tile when an (H, W) map is cut on a ``grid`` of tiles."""
    return channels * math.ceil(hw[0] / grid[0]) * math.ceil(hw[1] / grid[1])


def estimate_bram(spec: NetworkSpec, q: QuantScheme, plan: Optional[TilingPlan] = None, t=None) -> int:
    """Shared ping-pong FM buffer plus one weight buffer, in bytes.

    Each stitched image is processed in ``t.fm_tile_grid`` spatial tiles; the
    FM buffer holds the largest tile of any layer input or output at
    ``fm_bits``. BN is assumed folded, so only conv weights and biases count.
    """
    grid = (t or FpgaTarget()).fm_tile_grid
    c, h, w = spec.input_shape
    fm = fm_tile_elems(c, (h, w), grid)
    for l in spec.layers:
        fm = max(fm, fm_tile_elems(l.cin, l.in_hw, grid), fm_tile_elems(l.cout, l.out_hw, grid))
    wmax = max((_weight_elems(l) for l in spec.layers), default=0)
    return 2 * _bytes(fm, q.fm_bits) + _bytes(wmax, q.w_bits)


@dataclass(frozen=True)
class StageRow:
    """Per-invocation cycle breakdown (one row of the ``estimate`` CSV)."""

    name: str
    macs: int
    load: int
    conv3: int
    conv1: int
    pool: int
    writeback: int
    cycles: int
    bottleneck: str


@dataclass(frozen=True)
class HwEstimate:
    latency_ms: float
    dsp_used: int
    bram_bytes_used: int
    bottleneck: str
    feasible: bool = True
    latency_per_image_ms: float = 0.0
    macs: int = 0
    weight_traffic_bytes: int = 0
    weight_traffic_per_image: float = 0.0
    parallelism: tuple = (0, 0)
    rows: tuple = field(default=(), repr=False)

    def to_dict(self):
        d = asdict(self)
        d["parallelism"] = list(self.parallelism)
        d.pop("rows")
        return d


def _stage_class(stage):
    return "bandwidth" if stage in BANDWIDTH_STAGES else "compute"


def _row_bottleneck(cyc):
    # ties prefer compute stages
    best = max(cyc.values())
    for s in ("conv3", "conv1", "pool", "load", "writeback"):
        if cyc[s] == best:
            return s


def multipliers(q, t, parallelism=None):
    """(3x3 IP, 1x1 IP) multiplier counts."""
    if parallelism is not None:
        return tuple(int(p) for p in parallelism)
    total = t.dsp_total // dsp_cost_per_mac(q, t)
    p3 = max(1, int(total * t.conv3_share))
    return p3, max(1, total - p3)


def estimate_fpga(spec: NetworkSpec, q: QuantScheme, plan: TilingPlan, t: FpgaTarget,
                  parallelism=None, overlap=True) -> HwEstimate:
    batch = plan.batch if plan is not None else 1
    p3, p1 = multipliers(q, t, parallelism)
    cost = dsp_cost_per_mac(q, t)
    bw = t.dram_bytes_per_cycle
    fb, wb = q.fm_bits, q.w_bits

    groups = {}
    order = []
    for l in spec.layers:
        key = l.bundle if l.bundle else "head"
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(l)

    rows = []
    weight_bytes_total = 0
    for key in order:
        ls = groups[key]
        main = [l for l in ls if l.branch == "main"]
        first = next((l for l in main if l.op != "concat"), main[0] if main else ls[0])
        in_elems = first.cin * first.in_hw[0] * first.in_hw[1]
        last = main[-1] if main else ls[-1]
        out_elems = last.cout * last.out_hw[0] * last.out_hw[1]
        tap_elems = sum(l.cout * l.out_hw[0] * l.out_hw[1] for l in ls if l.op == "reorder")
        if not any(l.op == "reorder" for l in ls):
            tap_elems = sum(l.cout * l.out_hw[0] * l.out_hw[1] for l in ls if l.op == "tap")
        w_elems = sum(_weight_elems(l) for l in ls)
        w_bytes = _bytes(w_elems, wb)
        weight_bytes_total += w_bytes
        m3 = sum(layer_macs(l) for l in ls if l.op == "dw3") * batch
        m1 = sum(layer_macs(l) for l in ls if l.op == "pw1") * batch
        pool_in = sum(l.cin * l.in_hw[0] * l.in_hw[1] for l in ls if l.op == "maxpool2") * batch
        cyc = {
            "load": math.ceil((_bytes(in_elems * batch, fb) + w_bytes) / bw),
            "conv3": math.ceil(m3 / p3) if m3 else 0,
            "conv1": math.ceil(m1 / p1) if m1 else 0,
            "pool": math.ceil(pool_in / t.pool_lanes) if pool_in else 0,
            "writeback": math.ceil(_bytes((out_elems + tap_elems) * batch, fb) / bw),
        }
        exe = max(cyc["conv3"], cyc["conv1"], cyc["pool"])
        total = max(cyc.values()) if overlap else cyc["load"] + exe + cyc["writeback"]
        name = f"bundle{key}" if key != "head" else "head"
        rows.append(StageRow(name, m3 + m1, cycles=total, bottleneck=_row_bottleneck(cyc), **cyc))

    total_cycles = sum(r.cycles for r in rows)
    latency_ms = total_cycles / (t.frequency_mhz * 1e3)
    dsp_used = (p3 + p1) * cost
    bram = estimate_bram(spec, q, plan, t)
    feasible = dsp_used <= t.dsp_total and bram <= t.bram_bytes
    share = {"compute": 0, "bandwidth": 0}
    for r in rows:
        share[_stage_class(r.bottleneck)] += r.cycles
    bottleneck = "compute" if share["compute"] >= share["bandwidth"] else "bandwidth"
    if bram > t.bram_bytes:
        bottleneck = "memory"
    return HwEstimate(
        latency_ms=latency_ms,
        dsp_used=dsp_used,
        bram_bytes_used=bram,
        bottleneck=bottleneck,
        feasible=feasible,
        latency_per_image_ms=latency_ms / batch,
        macs=sum(r.macs for r in rows),
        weight_traffic_bytes=weight_bytes_total,
        weight_traffic_per_image=weight_bytes_total / batch,
        parallelism=(p3, p1),
        rows=tuple(rows),
    )


def estimate_gpu(spec: NetworkSpec, t: GpuTarget) -> HwEstimate:
    """Throughput-scaled latency: ``2 * MACs / (peak * efficiency) * scale``."""
    macs = sum(layer_macs(l) for l in spec.layers)
    latency_ms = 2 * macs / (t.peak_gflops * 1e9 * t.efficiency) * t.scale_factor * 1e3
    return HwEstimate(
        latency_ms=latency_ms,
        dsp_used=0,
        bram_bytes_used=0,
        bottleneck="compute",
        latency_per_image_ms=latency_ms,
        macs=macs,
    )


def pipeline_fps(stage_ms, overlapped=True):
    """Frames per second of a host/accelerator task pipeline (pre-process, inference, post-process).

    Overlapped stages run concurrently on successive frames, so the slowest
    stage sets the rate; otherwise stage times add up.
    """
    stage_ms = list(stage_ms)
    if not stage_ms or min(stage_ms) < 0:
        raise ValueError("need non-negative stage latencies")
    period = max(stage_ms) if overlapped else sum(stage_ms)
    return float("inf") if period == 0 else 1000.0 / period


def resized(spec: NetworkSpec, factor):
    """Re-instantiate a genome-backed spec at ``factor`` times the input height and width."""
    if spec.genome is None:
        raise ValueError("resizing needs a genome-backed spec")
    c, h, w = spec.input_shape
    return instantiate(spec.genome, (c, int(round(h * factor)), int(round(w * factor))))


# --- search-facing latency estimators -------------------------------------------

@dataclass(frozen=True)
class FpgaLatency:
    """Genome -> per-image latency (ms) on an FPGA target."""

    target: FpgaTarget = field(default_factory=FpgaTarget)
    scheme: QuantScheme = field(default_factory=lambda: QuantScheme(9, 11))
    input_shape: tuple = (3, 160, 320)
    batch: int = 4

    def estimate(self, genome):
        spec = instantiate(genome, self.input_shape)
        return estimate_fpga(spec, self.scheme, make_tiling_plan(self.input_shape, self.batch), self.target)

    def __call__(self, genome):
        return self.estimate(genome).latency_per_image_ms


@dataclass(frozen=True)
class GpuLatency:
    target: GpuTarget = field(default_factory=GpuTarget)
    input_shape: tuple = (3, 160, 320)

    def estimate(self, genome):
        return estimate_gpu(instantiate(genome, self.input_shape), self.target)

    def __call__(self, genome):
        return self.estimate(genome).latency_ms
