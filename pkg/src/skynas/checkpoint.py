"""Binary checkpoints for float and fixed-point models.

Layout (all little-endian)::

    magic   8 bytes  b"SKYNASCK"
    version u32
    count   u32      number of records
    record* tag u8, name_len u16, name utf-8, body

Record bodies by tag:

* ``PARAM`` / ``STATE``: ndim u8, shape u32 * ndim, float64 payload
* ``FIXED``: bits u8, frac_bits i8, ndim u8, shape u32 * ndim, int64 payload
* ``META``: length u32, YAML text (genome, input shape, anchors, scheme)

Records are written sorted by (tag, name), so identical models give
identical bytes.
"""
import struct
from pathlib import Path

import numpy as np
import yaml

from .genome import NetworkGenome, instantiate
from .model import Model
from .quant import FixedTensor, QuantizedModel, QuantScheme, fold_spec

MAGIC = b"SKYNASCK"
VERSION = 1
PARAM, STATE, FIXED, META = 0, 1, 2, 3


class CheckpointError(ValueError):
    pass


def _name(buf, name):
    b = name.encode()
    buf += struct.pack("<H", len(b))
    buf += b


def _shape(buf, a):
    buf += struct.pack("<B", a.ndim)
    buf += struct.pack(f"<{a.ndim}I", *a.shape)


def _write(path, records):
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(records))
    for tag, name, body in sorted(records, key=lambda r: (r[0], r[1])):
        buf += struct.pack("<B", tag)
        _name(buf, name)
        if tag in (PARAM, STATE):
            a = np.ascontiguousarray(body, dtype="<f8")
            _shape(buf, a)
            buf += a.tobytes()
        elif tag == FIXED:
            a = np.ascontiguousarray(body.payload, dtype="<i8")
            buf += struct.pack("<Bb", body.bits, body.frac_bits)
            _shape(buf, a)
            buf += a.tobytes()
        else:
            b = body.encode()
            buf += struct.pack("<I", len(b))
            buf += b
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def array(self, dtype):
        (ndim,) = self.take("<B")
        shape = self.take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.raw(8 * n), dtype=dtype).reshape(shape).astype(dtype.lstrip("<"))


def _read(path):
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.raw(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a skynas checkpoint")
    version, count = r.take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out = {PARAM: {}, STATE: {}, FIXED: {}, META: None}
    for _ in range(count):
        (tag,) = r.take("<B")
        (n,) = r.take("<H")
        name = r.raw(n).decode()
        if tag in (PARAM, STATE):
            out[tag][name] = r.array("<f8")
        elif tag == FIXED:
            bits, frac = r.take("<Bb")
            out[FIXED][name] = FixedTensor(r.array("<i8"), bits, frac)
        elif tag == META:
            (n,) = r.take("<I")
            out[META] = yaml.safe_load(r.raw(n).decode())
        else:
            raise CheckpointError(f"{path}: unknown record tag {tag}")
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    if out[META] is None:
        raise CheckpointError(f"{path}: missing metadata record")
    return out


def _meta_text(d):
    return yaml.safe_dump(d, sort_keys=True)


def _spec_from_meta(m):
    spec = instantiate(NetworkGenome.from_dict(m["genome"]), tuple(m["input_shape"]))
    return fold_spec(spec) if m.get("folded") else spec


def save_model(model: Model, path):
    if model.spec.genome is None:
        raise CheckpointError("only genome-backed models can be checkpointed")
    meta = {
        "kind": "float",
        "genome": model.spec.genome.to_dict(),
        "input_shape": list(model.spec.input_shape),
        "anchors": [list(a) for a in model.anchors],
        "folded": bool(model.spec.meta.get("folded", False)),
    }
    recs = [(PARAM, k, v) for k, v in model.params.items()]
    recs += [(STATE, k, v) for k, v in model.state.items()]
    recs.append((META, "meta", _meta_text(meta)))
    _write(path, recs)


def load_model(path) -> Model:
    d = _read(path)
    m = d[META]
    if m.get("kind") != "float":
        raise CheckpointError(f"{path}: not a float checkpoint (kind={m.get('kind')!r})")
    spec = _spec_from_meta(m)
    return Model(spec, d[PARAM], d[STATE], tuple(tuple(a) for a in m["anchors"]))


def save_quantized(qm: QuantizedModel, path):
    weight_names = set(qm.weights)
    meta = {
        "kind": "fixed",
        "genome": qm.spec.genome.to_dict(),
        "input_shape": list(qm.spec.input_shape),
        "anchors": [list(a) for a in qm.anchors],
        "folded": True,
        "scheme": qm.scheme.to_dict(),
        "fm_frac_bits": {k: int(v) for k, v in qm.scheme.frac_bits.items() if k not in weight_names},
    }
    recs = [(FIXED, k, v) for k, v in qm.weights.items()]
    recs.append((META, "meta", _meta_text(meta)))
    _write(path, recs)


def load_quantized(path) -> QuantizedModel:
    d = _read(path)
    m = d[META]
    if m.get("kind") != "fixed":
        raise CheckpointError(f"{path}: not a quantized checkpoint (kind={m.get('kind')!r})")
    frac = dict(m["fm_frac_bits"])
    frac.update({k: v.frac_bits for k, v in d[FIXED].items()})
    s = m["scheme"]
    scheme = QuantScheme(s["fm_bits"], s["w_bits"], rounding=s.get("rounding", "half_even")).with_frac(frac)
    return QuantizedModel(_spec_from_meta(m), d[FIXED], scheme, tuple(tuple(a) for a in m["anchors"]))
