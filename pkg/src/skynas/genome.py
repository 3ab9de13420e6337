"""Bundles, network genomes and their expansion into layer lists.

A genome stacks ``depth`` copies of one Bundle. ``fv1`` gives the output
width of each copy, ``fv2`` is a 0/1 mask with a 2x2 max-pool after copy
``i`` when ``fv2[i] == 1``. An optional bypass taps the output of bundle
``source`` (before its pool), space-to-depth reorders it once per pool it
crosses, and concatenates it after the main path right before bundle
``dest``. Bundle indices in genomes and layer names are 1-based.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import yaml

from .tensor.head import HEAD_CHANNELS


class GenomeError(ValueError):
    pass


class LayerOp(str, Enum):
    DWConv3 = "DWConv3"
    PWConv1 = "PWConv1"
    BN = "BN"
    ReLU = "ReLU"
    ReLU6 = "ReLU6"
    MaxPool2 = "MaxPool2"


CONV_OPS = (LayerOp.DWConv3, LayerOp.PWConv1)
ACTIVATIONS = ("relu", "relu6")


@dataclass(frozen=True)
class Bundle:
    """A short fixed layer sequence; activation ops take the genome's activation."""

    id: int
    ops: tuple
    name: str = ""

    def __post_init__(self):
        ops = tuple(LayerOp(o) for o in self.ops)
        object.__setattr__(self, "ops", ops)
        if not ops:
            raise GenomeError(f"bundle {self.id} has no layers")
        if sum(o is LayerOp.MaxPool2 for o in ops) > 1:
            raise GenomeError(f"bundle {self.id} has more than one pooling op")
        for i, o in enumerate(ops):
            if o is LayerOp.BN and (i == 0 or ops[i - 1] not in CONV_OPS):
                raise GenomeError(f"bundle {self.id}: BN at position {i} does not follow a conv")


D, P, B, R, M = LayerOp.DWConv3, LayerOp.PWConv1, LayerOp.BN, LayerOp.ReLU, LayerOp.MaxPool2

BUNDLES = {
    0: Bundle(0, (D, B, R, P, B, R), "dw3-bn-act-pw1-bn-act"),
    1: Bundle(1, (P, B, R, D, B, R), "pw1-bn-act-dw3-bn-act"),
    2: Bundle(2, (D, P, B, R), "dw3-pw1-bn-act"),
    3: Bundle(3, (P, B, R), "pw1-bn-act"),
    4: Bundle(4, (D, B, R, P, B, R, D, B, R), "dw3-pw1-dw3"),
}

DEFAULT_WIDTHS = (24, 48, 96, 192, 384, 512)
DEFAULT_INPUT = (3, 160, 320)


def get_bundle(bundle_id):
    try:
        return BUNDLES[bundle_id]
    except KeyError:
        raise GenomeError(f"unknown bundle id {bundle_id}; known: {sorted(BUNDLES)}") from None


@dataclass(frozen=True)
class NetworkGenome:
    bundle_id: int
    fv1: tuple
    fv2: tuple
    bypass: Optional[tuple] = None
    activation: str = "relu6"

    def __post_init__(self):
        object.__setattr__(self, "fv1", tuple(int(v) for v in self.fv1))
        object.__setattr__(self, "fv2", tuple(int(v) for v in self.fv2))
        if self.bypass is not None:
            object.__setattr__(self, "bypass", tuple(int(v) for v in self.bypass))

    @property
    def depth(self):
        return len(self.fv1)

    @property
    def pool_positions(self):
        return tuple(i + 1 for i, m in enumerate(self.fv2) if m)

    @property
    def num_pools(self):
        return sum(self.fv2)

    def key(self):
        return (self.bundle_id, self.fv1, self.fv2, self.bypass, self.activation)

    def with_bypass(self, bypass):
        return NetworkGenome(self.bundle_id, self.fv1, self.fv2, bypass, self.activation)

    def validate(self, bounds=None, input_shape=None):
        """Raise :class:`GenomeError` unless every genome invariant holds."""
        get_bundle(self.bundle_id)
        if self.depth < 1:
            raise GenomeError("genome depth must be at least 1")
        if len(self.fv2) != self.depth:
            raise GenomeError(f"fv2 length {len(self.fv2)} != fv1 length {self.depth}")
        if any(m not in (0, 1) for m in self.fv2):
            raise GenomeError(f"fv2 must be a 0/1 mask, got {self.fv2}")
        if any(w < 1 for w in self.fv1):
            raise GenomeError(f"fv1 widths must be positive, got {self.fv1}")
        if self.activation not in ACTIVATIONS:
            raise GenomeError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.bypass is not None:
            src, dst = self.bypass
            if not 1 <= src < dst <= self.depth:
                raise GenomeError(f"bypass {self.bypass} needs 1 <= source < dest <= {self.depth}")
        if bounds is not None:
            bounds.check(self)
        if input_shape is not None:
            instantiate(self, input_shape)

    def to_dict(self):
        return {
            "bundle_id": self.bundle_id,
            "activation": self.activation,
            "fv1": list(self.fv1),
            "fv2": list(self.fv2),
            "bypass": list(self.bypass) if self.bypass else None,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                bundle_id=int(d["bundle_id"]),
                fv1=tuple(d["fv1"]),
                fv2=tuple(d["fv2"]),
                bypass=tuple(d["bypass"]) if d.get("bypass") else None,
                activation=d.get("activation", "relu6"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise GenomeError(f"malformed genome record: {e}") from None

    def dumps(self):
        return "# skynas genome v1\n" + yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def loads(cls, text):
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise GenomeError(f"genome file is not valid YAML: {e}") from None
        if not isinstance(d, dict):
            raise GenomeError("genome file must hold a mapping")
        g = cls.from_dict(d)
        g.validate()
        return g


def skynet_genome(model="C", width_divisor=1):
    """The three SkyNet backbones: A has no bypass, B and C bypass 3 -> 6."""
    last = {"A": 96, "B": 48, "C": 96}[model]
    fv1 = [48, 96, 192, 384, 512, last]
    fv1 = [max(1, w // width_divisor) for w in fv1]
    return NetworkGenome(
        bundle_id=0,
        fv1=tuple(fv1),
        fv2=(1, 1, 1, 0, 0, 0),
        bypass=None if model == "A" else (3, 6),
        activation="relu6",
    )


def max_pools(hw):
    """How many successive 2x2 pools an (H, W) map admits."""
    h, w = hw
    n = 0
    while h % 2 == 0 and w % 2 == 0 and h >= 2 and w >= 2:
        h, w, n = h // 2, w // 2, n + 1
    return n


@dataclass(frozen=True)
class GenomeBounds:
    """Search-space limits used for sampling and repair."""

    depth: tuple = (6, 6)
    widths: tuple = DEFAULT_WIDTHS
    pools: tuple = (0, 4)
    input_shape: tuple = DEFAULT_INPUT
    bundle_ids: tuple = (0,)
    activation: str = "relu6"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(sorted(int(w) for w in self.widths)))
        if isinstance(self.depth, int):
            object.__setattr__(self, "depth", (self.depth, self.depth))
        object.__setattr__(self, "depth", tuple(self.depth))
        object.__setattr__(self, "pools", tuple(self.pools))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "bundle_ids", tuple(self.bundle_ids))
        lo, hi = self.depth
        plo, phi = self.pools
        if not 1 <= lo <= hi:
            raise GenomeError(f"depth bounds {self.depth} are unsatisfiable")
        if not self.widths or self.widths[0] < 1:
            raise GenomeError(f"width alphabet {self.widths} is empty or non-positive")
        if not 0 <= plo <= phi:
            raise GenomeError(f"pool bounds {self.pools} are unsatisfiable")
        if plo > min(hi, self.max_feasible_pools):
            raise GenomeError(
                f"pool bounds {self.pools} need {plo} pools but at most "
                f"{min(hi, self.max_feasible_pools)} fit depth {hi} / input {self.input_shape}"
            )
        for b in self.bundle_ids:
            get_bundle(b)

    @property
    def max_feasible_pools(self):
        inner = sum(o is LayerOp.MaxPool2 for o in get_bundle(self.bundle_ids[0]).ops)
        return max_pools(self.input_shape[1:]) - inner * self.depth[1]

    def pool_limit(self, depth):
        return min(self.pools[1], depth, self.max_feasible_pools)

    def check(self, g):
        lo, hi = self.depth
        if not lo <= g.depth <= hi:
            raise GenomeError(f"depth {g.depth} outside bounds {self.depth}")
        bad = [w for w in g.fv1 if w not in self.widths]
        if bad:
            raise GenomeError(f"widths {bad} not in alphabet {self.widths}")
        if not self.pools[0] <= g.num_pools <= self.pool_limit(g.depth):
            raise GenomeError(
                f"{g.num_pools} pools outside [{self.pools[0]}, {self.pool_limit(g.depth)}]"
            )

    def to_dict(self):
        return {
            "depth": list(self.depth),
            "widths": list(self.widths),
            "pools": list(self.pools),
            "input_shape": list(self.input_shape),
            "bundle_ids": list(self.bundle_ids),
            "activation": self.activation,
        }


def random_genome(rng, bounds: GenomeBounds, bundle_id=None):
    """Sample a valid genome; deterministic for a given generator state."""
    bundle_id = bounds.bundle_ids[0] if bundle_id is None else bundle_id
    lo, hi = bounds.depth
    depth = int(rng.integers(lo, hi + 1))
    limit = bounds.pool_limit(depth)
    if bounds.pools[0] > limit:
        raise GenomeError(f"no genome of depth {depth} satisfies pool bounds {bounds.pools}")
    fv1 = [bounds.widths[int(i)] for i in rng.integers(0, len(bounds.widths), size=depth)]
    n_pools = int(rng.integers(bounds.pools[0], limit + 1))
    mask = [0] * depth
    for p in rng.choice(depth, size=n_pools, replace=False):
        mask[int(p)] = 1
    g = NetworkGenome(bundle_id, tuple(fv1), tuple(mask), None, bounds.activation)
    g.validate(bounds)
    return g


# --- network specs -----------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One resolved layer. ``branch`` is "main" or "bypass"."""

    name: str
    op: str
    cin: int
    cout: int
    in_hw: tuple
    out_hw: tuple
    bundle: int = 0
    bias: bool = False
    branch: str = "main"
    extra: int = 0  # concat: bypass channel count


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    genome: Optional[NetworkGenome] = None
    head_channels: int = HEAD_CHANNELS
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def output_shape(self):
        last = self.layers[-1]
        return (last.cout,) + tuple(last.out_hw)

    @property
    def grid(self):
        return tuple(self.layers[-1].out_hw)

    def conv_layers(self):
        return [l for l in self.layers if l.op in ("dw3", "pw1")]


_ACT = {"relu": "relu", "relu6": "relu6"}


def instantiate(g: NetworkGenome, input_shape=DEFAULT_INPUT):
    """Expand a genome into a resolved layer list ending in the detection head."""
    g.validate()
    bundle = get_bundle(g.bundle_id)
    c, h, w = (int(v) for v in input_shape)
    layers = []

    def add(name, op, cin, cout, in_hw, out_hw, bi, **kw):
        layers.append(LayerSpec(name, op, cin, cout, tuple(in_hw), tuple(out_hw), bi, **kw))

    def pool(name, bi, what):
        nonlocal h, w
        if h % 2 or w % 2:
            raise GenomeError(f"{what}: 2x2 pool needs even spatial dims but feature map is {h}x{w}")
        add(name, "maxpool2", c, c, (h, w), (h // 2, w // 2), bi)
        h, w = h // 2, w // 2

    bypass_c = None
    bypass_hw = None
    for i in range(1, g.depth + 1):
        if g.bypass and i == g.bypass[1]:
            if (h, w) != bypass_hw:
                raise GenomeError(
                    f"bypass {g.bypass}: reordered source is {bypass_hw} but bundle {i} input is {h}x{w}"
                )
            add(f"b{i}.concat", "concat", c, c + bypass_c, (h, w), (h, w), i, extra=bypass_c)
            c += bypass_c
        width = g.fv1[i - 1]
        ops = bundle.ops
        for k, op in enumerate(ops):
            nxt = ops[k + 1] if k + 1 < len(ops) else None
            tag = f"b{i}.{k}"
            if op is LayerOp.DWConv3:
                add(f"{tag}.dw", "dw3", c, c, (h, w), (h, w), i, bias=nxt is not LayerOp.BN)
            elif op is LayerOp.PWConv1:
                add(f"{tag}.pw", "pw1", c, width, (h, w), (h, w), i, bias=nxt is not LayerOp.BN)
                c = width
            elif op is LayerOp.BN:
                add(f"{tag}.bn", "bn", c, c, (h, w), (h, w), i)
            elif op in (LayerOp.ReLU, LayerOp.ReLU6):
                add(f"{tag}.act", _ACT[g.activation], c, c, (h, w), (h, w), i)
            elif op is LayerOp.MaxPool2:
                pool(f"{tag}.pool", i, f"pool inside bundle {i}")
        if g.bypass and i == g.bypass[0]:
            crossed = sum(g.fv2[i - 1:g.bypass[1] - 1])
            add("bypass.tap", "tap", c, c, (h, w), (h, w), i, branch="bypass")
            bc, bh, bw = c, h, w
            for r in range(crossed):
                if bh % 2 or bw % 2:
                    raise GenomeError(
                        f"bypass {g.bypass}: reorder {r + 1} needs even dims, source map is {bh}x{bw}"
                    )
                add(f"bypass.reorder{r + 1}", "reorder", bc, 4 * bc, (bh, bw), (bh // 2, bw // 2), i,
                    branch="bypass")
                bc, bh, bw = 4 * bc, bh // 2, bw // 2
            bypass_c, bypass_hw = bc, (bh, bw)
        if g.fv2[i - 1]:
            pool(f"pool{i}", i, f"pool after bundle {i}")
    add("head", "pw1", c, HEAD_CHANNELS, (h, w), (h, w), 0, bias=True)
    return NetworkSpec(tuple(layers), (int(input_shape[0]), int(input_shape[1]), int(input_shape[2])), g)


def layer_param_count(l: LayerSpec):
    if l.op == "dw3":
        return 9 * l.cin + (l.cout if l.bias else 0)
    if l.op == "pw1":
        return l.cin * l.cout + (l.cout if l.bias else 0)
    if l.op == "bn":
        return 2 * l.cin
    return 0


def param_count(spec: NetworkSpec):
    """Trainable scalars: conv weights, conv biases, BN gamma and beta."""
    return sum(layer_param_count(l) for l in spec.layers)


def layer_macs(l: LayerSpec):
    h, w = l.out_hw
    if l.op == "dw3":
        return 9 * l.cin * h * w
    if l.op == "pw1":
        return l.cin * l.cout * h * w
    return 0


def macs_count(spec: NetworkSpec, input_shape=None):
    """Multiply-accumulates per image; re-instantiates if ``input_shape`` differs."""
    if input_shape is not None and tuple(input_shape) != tuple(spec.input_shape):
        if spec.genome is None:
            raise GenomeError("cannot rescale a spec that has no genome")
        spec = instantiate(spec.genome, input_shape)
    return sum(layer_macs(l) for l in spec.layers)


def feature_map_elems(l: LayerSpec):
    return l.cout * math.prod(l.out_hw)
