"""Run a :class:`~skynas.genome.NetworkSpec` forward (and backward via the tape).

Parameters live in a flat ``{name: ndarray}`` dict: ``<layer>.w`` and
``<layer>.b`` for convs, ``<layer>.gamma`` / ``<layer>.beta`` for BN. BN running
statistics are kept separately in ``state`` (``<layer>.mean`` / ``<layer>.var``)
because they are not trained by gradient descent.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .genome import NetworkSpec
from .tensor import ops
from .tensor.head import HEAD_CHANNELS, NUM_ANCHORS, VALUES_PER_ANCHOR, decode_batch
from .tensor.ops import BnParams, ConvWeights, ShapeError

DEFAULT_ANCHORS = ((0.08, 0.12), (0.2, 0.3))
OBJECTNESS_PRIOR = -4.0


def init_params(spec: NetworkSpec, seed=0, dtype=np.float64):
    """He-normal conv weights, identity BN, small head with a negative objectness prior."""
    rng = np.random.default_rng(seed)
    params, state = {}, {}
    for l in spec.layers:
        if l.op == "dw3":
            params[f"{l.name}.w"] = rng.normal(0.0, np.sqrt(2.0 / 9), (l.cin, 3, 3))
            if l.bias:
                params[f"{l.name}.b"] = np.zeros(l.cout)
        elif l.op == "pw1":
            std = 0.01 if l.name == "head" else np.sqrt(2.0 / l.cin)
            params[f"{l.name}.w"] = rng.normal(0.0, std, (l.cout, l.cin))
            if l.bias:
                b = np.zeros(l.cout)
                if l.name == "head":
                    b[VALUES_PER_ANCHOR - 1::VALUES_PER_ANCHOR] = OBJECTNESS_PRIOR
                params[f"{l.name}.b"] = b
        elif l.op == "bn":
            params[f"{l.name}.gamma"] = np.ones(l.cin)
            params[f"{l.name}.beta"] = np.zeros(l.cin)
            state[f"{l.name}.mean"] = np.zeros(l.cin)
            state[f"{l.name}.var"] = np.ones(l.cin)
    params = {k: v.astype(dtype) for k, v in params.items()}
    state = {k: v.astype(dtype) for k, v in state.items()}
    return params, state


def conv_weights(l, params):
    kind = ops.DEPTHWISE if l.op == "dw3" else ops.POINTWISE
    return ConvWeights(kind, params[f"{l.name}.w"], params.get(f"{l.name}.b"))


def bn_params(l, params, state, eps=1e-5, momentum=0.1):
    return BnParams(
        params[f"{l.name}.gamma"],
        params[f"{l.name}.beta"],
        state[f"{l.name}.mean"],
        state[f"{l.name}.var"],
        eps=eps,
        momentum=momentum,
    )


def run_network(spec: NetworkSpec, params, state, x, mode="infer", tape=None, bn_momentum=0.1):
    """Forward pass. Returns ``(head_output, new_state)``; inputs are not mutated.

    When ``tape`` is given every op records its backward closure.
    """
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"network expects input (B, {spec.input_shape}), got shape {x.shape}")
    new_state = dict(state)
    rec = tape is not None
    cur = tape.watch() if rec else None
    h = x
    byp, byp_slot = None, None
    for l in spec.layers:
        if l.branch == "bypass":
            if l.op == "tap":
                byp, byp_slot = h, cur
            elif l.op == "reorder":
                byp = ops.reorder_forward(byp)
                if rec:
                    byp_slot = tape.push(l.name, [byp_slot], lambda g: ((ops.inverse_reorder(g),), {}))
            continue
        if l.op in ("dw3", "pw1"):
            w = conv_weights(l, params)
            fwd, bwd = (
                (ops.dwconv3_forward, ops.dwconv3_backward)
                if l.op == "dw3"
                else (ops.pwconv1_forward, ops.pwconv1_backward)
            )
            xin, h = h, fwd(h, w)
            if rec:
                cur = tape.push(l.name, [cur], _conv_bwd(bwd, xin, w, l.name))
        elif l.op == "bn":
            p = bn_params(l, params, state, momentum=bn_momentum)
            h, p_new, cache = ops.bn_forward(h, p, mode)
            if mode == "train":
                new_state[f"{l.name}.mean"] = p_new.running_mean
                new_state[f"{l.name}.var"] = p_new.running_var
            if rec:
                cur = tape.push(l.name, [cur], _bn_bwd(cache, p, l.name))
        elif l.op in ("relu", "relu6"):
            xin = h
            if l.op == "relu6":
                h = ops.relu6_forward(h)
                bwd = ops.relu6_backward
            else:
                h = ops.relu_forward(h)
                bwd = ops.relu_backward
            if rec:
                cur = tape.push(l.name, [cur], lambda g, xin=xin, bwd=bwd: ((bwd(xin, g),), {}))
        elif l.op == "maxpool2":
            h, idx = ops.maxpool2_forward(h)
            if rec:
                cur = tape.push(l.name, [cur], lambda g, idx=idx: ((ops.maxpool2_backward(idx, g),), {}))
        elif l.op == "concat":
            first = h.shape[1]
            h = ops.concat_channels(h, byp)
            if rec:
                cur = tape.push(
                    l.name, [cur, byp_slot], lambda g, first=first: (ops.split_channels(g, first), {})
                )
        else:
            raise ValueError(f"unknown layer op {l.op!r} in {l.name}")
    return h, new_state


def _conv_bwd(bwd, xin, w, name):
    def fn(g):
        gx, gw, gb = bwd(xin, w, g)
        p = {f"{name}.w": gw}
        if gb is not None:
            p[f"{name}.b"] = gb
        return (gx,), p

    return fn


def _bn_bwd(cache, p, name):
    def fn(g):
        gx, gg, gb = ops.bn_backward(cache, p, g)
        return (gx,), {f"{name}.gamma": gg, f"{name}.beta": gb}

    return fn


@dataclass
class Model:
    """A network spec bundled with its weights, BN statistics and anchor priors."""

    spec: NetworkSpec
    params: dict
    state: dict
    anchors: tuple = DEFAULT_ANCHORS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.shape != (NUM_ANCHORS, 2):
            raise ShapeError(f"expected {NUM_ANCHORS} anchor (w, h) pairs, got shape {a.shape}")
        self.anchors = tuple(tuple(float(v) for v in row) for row in a)
        if self.spec.layers[-1].cout != HEAD_CHANNELS:
            raise ShapeError("network must end in a 10-channel detection head")

    @classmethod
    def initialize(cls, spec, seed=0, anchors=DEFAULT_ANCHORS, dtype=np.float64):
        params, state = init_params(spec, seed, dtype)
        return cls(spec, params, state, anchors)

    @property
    def has_bn(self):
        return any(l.op == "bn" for l in self.spec.layers)

    def forward(self, x, mode="infer", tape=None):
        return run_network(self.spec, self.params, self.state, x, mode, tape)

    def predict(self, images, batch_size=32):
        """Best box per image as an (N, 4) array of normalized corners."""
        out = []
        for i in range(0, len(images), batch_size):
            y, _ = self.forward(images[i:i + batch_size])
            out.append(decode_batch(y, self.anchors))
        return np.concatenate(out) if out else np.zeros((0, 4))

    def with_params(self, params, state=None):
        return replace(self, params=params, state=self.state if state is None else state)
