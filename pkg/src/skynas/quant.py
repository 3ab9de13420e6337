"""Fixed-point quantization: BN folding, range calibration and integer inference.

Conventions:

* signed two's-complement values with ``bits`` total bits and ``frac_bits``
  fractional bits; rounding is half-to-even, out-of-range values saturate;
* one scale per tensor (weights, biases, feature maps);
* ``frac_bits = bits - 1 - ceil(log2(max_abs))`` clamped to
  [:data:`MIN_FRAC`, :data:`MAX_FRAC`]; an all-zero tensor gets ``MAX_FRAC``.
  A max that is an exact power of two therefore saturates by one ULP;
* a conv followed directly by an activation is one fused unit: the wide
  accumulator goes through the activation and is re-quantized once.

Integer inference holds integers in float64 arrays when every partial sum is
provably below 2**53 (exact, and fast through BLAS) and in int64 otherwise,
so results are bit-exact either way.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .genome import NetworkSpec
from .model import Model, bn_params, conv_weights, run_network
from .tensor import ops
from .tensor.head import decode_batch
from .tensor.ops import BnParams, ConvWeights, ShapeError

MIN_FRAC = -16
MAX_FRAC = 32
MAX_BITS = 32
ACTIVATIONS = ("relu", "relu6")
INPUT = "input"


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    """Bit widths for feature maps and weights, plus calibrated fractional bits per tensor."""

    fm_bits: int
    w_bits: int
    frac_bits: dict = field(default_factory=dict, compare=False, hash=False)
    rounding: str = "half_even"

    def __post_init__(self):
        for k in ("fm_bits", "w_bits"):
            v = getattr(self, k)
            if not isinstance(v, (int, np.integer)) or not 2 <= v <= MAX_BITS:
                raise QuantError(f"{k} must be an integer in [2, {MAX_BITS}], got {v!r}")
        if self.rounding != "half_even":
            raise QuantError(f"unsupported rounding mode {self.rounding!r}")

    def with_frac(self, frac_bits):
        return replace(self, frac_bits=dict(frac_bits))

    def to_dict(self):
        return {"fm_bits": int(self.fm_bits), "w_bits": int(self.w_bits), "rounding": self.rounding}


def _qrange(bits):
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def quantize_int(x, bits, frac_bits):
    """Nearest integer codes (half-to-even), saturated to the signed range."""
    lo, hi = _qrange(bits)
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 2.0 ** frac_bits), lo, hi)


def fixed_round_trip(x, bits, frac_bits):
    """Quantize and dequantize; error is at most half a ULP inside the representable range."""
    if bits < 2:
        raise QuantError(f"bits must be at least 2, got {bits}")
    q = quantize_int(x, bits, frac_bits) * 2.0 ** -frac_bits
    return float(q) if np.ndim(q) == 0 else q


@dataclass(frozen=True)
class FixedTensor:
    payload: np.ndarray
    bits: int
    frac_bits: int

    def __post_init__(self):
        p = np.asarray(self.payload)
        lo, hi = _qrange(self.bits)
        if p.size and (p.min() < lo or p.max() > hi):
            raise QuantError(f"payload outside the signed {self.bits}-bit range")
        if p.size and np.any(p != np.rint(p)):
            raise QuantError("payload must hold integers")
        object.__setattr__(self, "payload", p.astype(np.int64))

    @classmethod
    def from_float(cls, x, bits, frac_bits):
        return cls(quantize_int(x, bits, frac_bits), bits, frac_bits)

    def to_float(self):
        return self.payload.astype(np.float64) * 2.0 ** -self.frac_bits


def frac_bits_for(max_abs, bits):
    if max_abs == 0:
        return MAX_FRAC
    f = bits - 1 - math.ceil(math.log2(max_abs))
    return int(min(max(f, MIN_FRAC), MAX_FRAC))


# --- BN folding --------------------------------------------------------------

def fold_bn(conv: ConvWeights, bn: BnParams) -> ConvWeights:
    """Absorb inference-mode BN into the preceding conv's weights and bias."""
    if bn.channels != conv.cout:
        raise ShapeError(f"BN has {bn.channels} channels but the conv produces {conv.cout}")
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    w = conv.weight * (scale[:, None, None] if conv.kind == ops.DEPTHWISE else scale[:, None])
    b = conv.bias if conv.bias is not None else np.zeros(conv.cout, dtype=conv.weight.dtype)
    return ConvWeights(conv.kind, w, (b - bn.running_mean) * scale + bn.beta)


def fold_spec(spec: NetworkSpec) -> NetworkSpec:
    """The same network with BN layers removed and their convs given biases."""
    layers = []
    for l in spec.layers:
        if l.op == "bn":
            prev = layers[-1]
            if prev.op not in ("dw3", "pw1"):
                raise QuantError(f"{l.name}: BN must directly follow a conv to be folded")
            layers[-1] = replace(prev, bias=True)
            continue
        layers.append(l)
    meta = dict(spec.meta)
    meta["folded"] = True
    return replace(spec, layers=tuple(layers), meta=meta)


def fold_params(spec: NetworkSpec, params, state):
    out = {}
    layers = spec.layers
    for i, l in enumerate(layers):
        if l.op not in ("dw3", "pw1"):
            continue
        cw = conv_weights(l, params)
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if nxt is not None and nxt.op == "bn":
            cw = fold_bn(cw, bn_params(nxt, params, state))
        out[f"{l.name}.w"] = cw.weight
        if cw.bias is not None:
            out[f"{l.name}.b"] = cw.bias
    return out


def fold_model(model: Model) -> Model:
    params = fold_params(model.spec, model.params, model.state)
    return Model(fold_spec(model.spec), params, {}, model.anchors, dict(model.meta))


# --- calibration -------------------------------------------------------------

def _has_bn(spec):
    return any(l.op == "bn" for l in spec.layers)


def quant_points(spec: NetworkSpec):
    """Layer names whose outputs are stored (and so re-quantized) as feature maps.

    Convs feeding an activation are fused with it, and the bypass tap merely
    aliases an existing map.
    """
    pts = []
    layers = spec.layers
    for i, l in enumerate(layers):
        if l.op == "tap":
            continue
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if l.op in ("dw3", "pw1") and nxt is not None and nxt.op in ACTIVATIONS:
            continue
        pts.append(l.name)
    return pts


def _trace(spec, params, x, conv_inputs=None):
    """Float forward recording every layer's output max-abs.

    With ``conv_inputs`` (a dict) also records each conv's per-channel input max-abs.
    """
    rec = {INPUT: float(np.max(np.abs(x))) if x.size else 0.0}
    h = x
    byp = None
    for l in spec.layers:
        if l.op == "tap":
            byp = h
            continue
        if l.op == "reorder":
            byp = ops.reorder_forward(byp)
            out = byp
        elif l.op in ("dw3", "pw1"):
            if conv_inputs is not None:
                m = np.abs(h).max(axis=(0, 2, 3))
                conv_inputs[l.name] = np.maximum(conv_inputs.get(l.name, 0.0), m)
            w = conv_weights(l, params)
            h = ops.dwconv3_forward(h, w) if l.op == "dw3" else ops.pwconv1_forward(h, w)
            out = h
        elif l.op == "relu6":
            h = out = ops.relu6_forward(h)
        elif l.op == "relu":
            h = out = ops.relu_forward(h)
        elif l.op == "maxpool2":
            h, _ = ops.maxpool2_forward(h)
            out = h
        elif l.op == "concat":
            h = out = ops.concat_channels(h, byp)
        else:
            raise QuantError(f"cannot quantize layer {l.name} of type {l.op}")
        rec[l.name] = float(np.max(np.abs(out))) if out.size else 0.0
    return rec


def prune_dead_inputs(spec: NetworkSpec, weights, calib_inputs, batch_size=16):
    """Zero conv weights whose input channel is identically zero on the calibration set.

    A channel that ReLU6 never lets through leaves its BN running variance
    near zero, and folding then blows its weights up by ~1/sqrt(eps). Those
    weights multiply zeros, but with per-tensor scaling they would still set
    the whole tensor's range. Returns ``(weights, pruned)``; ``pruned`` maps
    layer name to the pruned input channels. Outputs on the calibration set
    are unchanged.
    """
    if _has_bn(spec):
        raise QuantError("fold BN into the convs before pruning")
    x = np.asarray(calib_inputs, dtype=np.float64)
    if x.ndim != 4 or len(x) == 0:
        raise QuantError("pruning needs at least one (C, H, W) input")
    seen = {}
    for i in range(0, len(x), batch_size):
        _trace(spec, weights, x[i:i + batch_size], seen)
    out, pruned = dict(weights), {}
    for l in spec.layers:
        if l.op not in ("dw3", "pw1"):
            continue
        dead = np.flatnonzero(seen[l.name] == 0)
        if not len(dead):
            continue
        w = out[f"{l.name}.w"].copy()
        if l.op == "dw3":
            w[dead] = 0.0
        else:
            w[:, dead] = 0.0
        out[f"{l.name}.w"] = w
        pruned[l.name] = dead.tolist()
    return out, pruned


def calibrate(spec: NetworkSpec, weights, calib_inputs, scheme: QuantScheme, batch_size=16):
    """Fractional bits for every weight tensor (at ``w_bits``) and stored feature map (at ``fm_bits``)."""
    if _has_bn(spec):
        raise QuantError("fold BN into the convs before calibrating")
    x = np.asarray(calib_inputs, dtype=np.float64)
    if x.ndim != 4 or len(x) == 0:
        raise QuantError("calibration needs at least one (C, H, W) input")
    frac = {}
    for name, w in weights.items():
        frac[name] = frac_bits_for(float(np.max(np.abs(w))) if w.size else 0.0, scheme.w_bits)
    mx = {}
    for i in range(0, len(x), batch_size):
        for k, v in _trace(spec, weights, x[i:i + batch_size]).items():
            mx[k] = max(mx.get(k, 0.0), v)
    for k in [INPUT] + quant_points(spec):
        frac[k] = frac_bits_for(mx[k], scheme.fm_bits)
    return frac


# --- quantized model and integer inference -----------------------------------

@dataclass
class QuantizedModel:
    """Folded network with fixed-point weights and per-map formats."""

    spec: NetworkSpec
    weights: dict
    scheme: QuantScheme
    anchors: tuple
    meta: dict = field(default_factory=dict)

    def fm_frac(self, name):
        return self.scheme.frac_bits[name]

    def dequantized_weights(self):
        return {k: v.to_float() for k, v in self.weights.items()}

    def forward_int(self, x):
        """Integer-only inference; returns the head's integer codes and their frac bits."""
        return _int_forward(self, x)

    def forward(self, x):
        codes, f = self.forward_int(x)
        return codes * 2.0 ** -f

    def predict(self, images, batch_size=32):
        out = []
        for i in range(0, len(images), batch_size):
            out.append(decode_batch(self.forward(images[i:i + batch_size]), self.anchors))
        return np.concatenate(out) if out else np.zeros((0, 4))


def quantize_network(spec: NetworkSpec, weights, scheme: QuantScheme, calib, anchors=None) -> QuantizedModel:
    """Fixed-point weights at ``w_bits`` using the calibrated formats in ``calib``."""
    if _has_bn(spec):
        raise QuantError("network still has BN layers; fold them before quantizing")
    missing = [k for k in list(weights) + [INPUT] + quant_points(spec) if k not in calib]
    if missing:
        raise QuantError(f"calibration is missing formats for {missing[:5]}")
    q = {k: FixedTensor.from_float(w, scheme.w_bits, calib[k]) for k, w in weights.items()}
    return QuantizedModel(spec, q, scheme.with_frac(calib), anchors if anchors is not None else ())


def quantize_model(model: Model, scheme: QuantScheme, calib_inputs) -> QuantizedModel:
    """Fold, prune dead input channels, calibrate and quantize a trained float model."""
    folded = fold_model(model) if model.has_bn else model
    weights, pruned = prune_dead_inputs(folded.spec, folded.params, calib_inputs)
    calib = calibrate(folded.spec, weights, calib_inputs, scheme)
    qm = quantize_network(folded.spec, weights, scheme, calib, folded.anchors)
    qm.meta["pruned_inputs"] = pruned
    return qm


def _requant(acc, f_from, f_to, bits):
    """Move integer codes from ``f_from`` to ``f_to`` fractional bits, rounding half-even, saturating."""
    s = f_from - f_to
    lo, hi = _qrange(bits)
    if s > 0:
        # exact: a float64 division by a power of two only changes the exponent
        r = np.rint(acc.astype(np.float64) / 2.0 ** s) if acc.dtype != np.int64 else _rshift_even(acc, s)
    else:
        r = acc.astype(np.float64) * 2.0 ** -s
    return np.clip(r.astype(np.float64), lo, hi)


def _rshift_even(acc, s):
    q = acc >> s
    rem = acc - (q << s)
    half = np.int64(1) << (s - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return (q + up).astype(np.float64)


def _accum_dtype(in_bits, w_bits, terms):
    """float64 when every partial sum fits the 53-bit mantissa, else int64."""
    need = (in_bits - 1) + (w_bits - 1) + math.ceil(math.log2(max(terms, 1))) + 2
    if need <= 52:
        return np.float64
    if need <= 62:
        return np.int64
    raise QuantError(f"accumulator needs {need} bits, beyond int64")


def _int_dw(x, w, dtype):
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=dtype)
    xp[:, :, 1:-1, 1:-1] = x
    w = w.astype(dtype)
    acc = np.zeros((B, C, H, W), dtype=dtype)
    for dy in range(3):
        for dx in range(3):
            acc += xp[:, :, dy:dy + H, dx:dx + W] * w[None, :, dy, dx, None, None]
    return acc


def _int_pw(x, w, dtype):
    B, C, H, W = x.shape
    acc = np.matmul(w.astype(dtype), x.astype(dtype).reshape(B, C, H * W))
    return acc.reshape(B, w.shape[0], H, W)


def _int_forward(qm: QuantizedModel, x):
    sch = qm.scheme
    fb, wb = sch.fm_bits, sch.w_bits
    spec = qm.spec
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"network expects input (B, {spec.input_shape}), got shape {x.shape}")
    f = sch.frac_bits[INPUT]
    h = quantize_int(x, fb, f)  # float64 holding integers
    byp, fbyp = None, None
    acc, facc = None, None
    layers = spec.layers
    pts = set(quant_points(spec))
    for i, l in enumerate(layers):
        if l.op == "tap":
            byp, fbyp = h, f
            continue
        if l.op == "reorder":
            byp = ops.reorder_forward(byp)
            if l.name in pts:
                byp = _requant(byp, fbyp, sch.frac_bits[l.name], fb)
                fbyp = sch.frac_bits[l.name]
            continue
        if l.op in ("dw3", "pw1"):
            wt = qm.weights[f"{l.name}.w"]
            terms = 9 if l.op == "dw3" else l.cin
            dt = _accum_dtype(fb, wb, terms + 1)
            xin = h.astype(dt)
            acc = (_int_dw if l.op == "dw3" else _int_pw)(xin, wt.payload, dt)
            facc = f + wt.frac_bits
            bt = qm.weights.get(f"{l.name}.b")
            if bt is not None:
                acc = acc + _align_bias(bt, facc, dt)[None, :, None, None]
            if l.name in pts:
                h, f = _requant(acc, facc, sch.frac_bits[l.name], fb), sch.frac_bits[l.name]
                acc = None
            continue
        if l.op in ACTIVATIONS:
            src, fs = (acc, facc) if acc is not None else (h, f)
            lo = src.dtype.type(0)
            if l.op == "relu6":
                top = min(6 * 2 ** fs, 2 ** 62) if fs >= 0 else 6 // 2 ** -fs
                src = np.clip(src, lo, src.dtype.type(top))
            else:
                src = np.maximum(src, lo)
            h, f = _requant(src, fs, sch.frac_bits[l.name], fb), sch.frac_bits[l.name]
            acc = None
            continue
        if l.op == "maxpool2":
            h, _ = ops.maxpool2_forward(h)
        elif l.op == "concat":
            fc = sch.frac_bits[l.name]
            h = ops.concat_channels(_requant(h, f, fc, fb), _requant(byp, fbyp, fc, fb))
            f = fc
            continue
        else:
            raise QuantError(f"cannot run layer {l.name} of type {l.op} in integer mode")
        h, f = _requant(h, f, sch.frac_bits[l.name], fb), sch.frac_bits[l.name]
    if acc is not None:
        raise QuantError("network ends in an un-requantized accumulator")
    return h, f


def _align_bias(bt: FixedTensor, facc, dtype):
    s = facc - bt.frac_bits
    if s >= 0:
        return (bt.payload * (2 ** s)).astype(dtype) if dtype == np.int64 else bt.payload.astype(np.float64) * 2.0 ** s
    # bias finer than the accumulator: round it into the accumulator grid
    return _requant(bt.payload if dtype == np.int64 else bt.payload.astype(np.float64), bt.frac_bits, facc,
                    MAX_BITS * 2).astype(dtype)


def float_forward(model: Model, x):
    """Reference float output for comparisons."""
    y, _ = run_network(model.spec, model.params, model.state, x)
    return y
