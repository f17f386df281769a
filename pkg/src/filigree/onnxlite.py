"""Minimal ONNX model reader and CPU evaluator.

Parses the protobuf wire format directly (no onnx / onnxruntime dependency,
neither is assumed to be installable) and evaluates the small op set needed
for truncated convolutional backbones: Conv, BatchNormalization, Relu,
MaxPool, Add, plus Identity/Constant plumbing.  Convolution accumulates in
float64 via im2col + BLAS; activations are kept float32.

Also provides :class:`NeuralExtractor`, the extractor backed by an
interchange model file plus its JSON sidecar declaring stride, dim and input
normalization constants.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .extract import Extractor
from .featmap import FormatError

# TensorProto.DataType codes
_TENSOR_DTYPES = {1: "<f4", 6: "<i4", 7: "<i8", 11: "<f8"}

_ATTR_FLOAT, _ATTR_INT, _ATTR_STRING, _ATTR_TENSOR = 1, 2, 3, 4
_ATTR_FLOATS, _ATTR_INTS, _ATTR_STRINGS = 6, 7, 8


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise FormatError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise FormatError("varint too long")


def _signed(v: int) -> int:
    return v - (1 << 64) if v >= (1 << 63) else v


def _parse_fields(buf: bytes) -> dict[int, list[tuple[int, object]]]:
    """Split a message payload into {field_number: [(wire_type, value), ...]}."""
    fields: dict[int, list[tuple[int, object]]] = {}
    pos = 0
    while pos < len(buf):
        tag, pos = _read_varint(buf, pos)
        num, wire = tag >> 3, tag & 7
        if wire == 0:
            val, pos = _read_varint(buf, pos)
        elif wire == 1:
            val = buf[pos:pos + 8]
            pos += 8
        elif wire == 2:
            ln, pos = _read_varint(buf, pos)
            val = buf[pos:pos + ln]
            if len(val) != ln:
                raise FormatError("truncated length-delimited field")
            pos += ln
        elif wire == 5:
            val = buf[pos:pos + 4]
            pos += 4
        else:
            raise FormatError(f"unsupported wire type {wire}")
        fields.setdefault(num, []).append((wire, val))
    return fields


def _first(fields, num, default=None):
    vals = fields.get(num)
    return vals[0][1] if vals else default


def _first_int(fields, num, default=0) -> int:
    vals = fields.get(num)
    return _signed(vals[0][1]) if vals else default


def _first_str(fields, num, default="") -> str:
    vals = fields.get(num)
    return vals[0][1].decode("utf-8") if vals else default


def _repeated_str(fields, num) -> list[str]:
    return [v.decode("utf-8") for _, v in fields.get(num, [])]


def _repeated_int(fields, num) -> list[int]:
    out: list[int] = []
    for wire, v in fields.get(num, []):
        if wire == 0:
            out.append(_signed(v))
        elif wire == 2:  # packed
            pos = 0
            while pos < len(v):
                val, pos = _read_varint(v, pos)
                out.append(_signed(val))
        else:
            raise FormatError(f"field {num}: unexpected wire type {wire} for ints")
    return out


def _repeated_float(fields, num) -> list[float]:
    out: list[float] = []
    for wire, v in fields.get(num, []):
        if wire == 5:
            out.append(struct.unpack("<f", v)[0])
        elif wire == 2:
            out.extend(np.frombuffer(v, dtype="<f4").tolist())
        else:
            raise FormatError(f"field {num}: unexpected wire type {wire} for floats")
    return out


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    f = _parse_fields(buf)
    dims = _repeated_int(f, 1)
    dtype_code = _first_int(f, 2, 1)
    name = _first_str(f, 8)
    if dtype_code not in _TENSOR_DTYPES:
        raise FormatError(f"tensor {name!r}: unsupported data type {dtype_code}")
    np_dtype = _TENSOR_DTYPES[dtype_code]
    raw = _first(f, 9)
    if raw is not None:
        arr = np.frombuffer(raw, dtype=np_dtype)
    elif dtype_code == 1:
        arr = np.asarray(_repeated_float(f, 4), dtype=np.float32)
    elif dtype_code in (6, 7):
        arr = np.asarray(_repeated_int(f, 7 if dtype_code == 7 else 5),
                         dtype=np_dtype)
    else:
        raise FormatError(f"tensor {name!r}: no data payload")
    arr = arr.reshape(dims) if dims else arr.reshape(())
    return name, np.ascontiguousarray(arr)


def _parse_attribute(buf: bytes) -> tuple[str, object]:
    f = _parse_fields(buf)
    name = _first_str(f, 1)
    atype = _first_int(f, 20, 0)
    if atype == _ATTR_FLOAT or (atype == 0 and 2 in f):
        return name, struct.unpack("<f", _first(f, 2))[0]
    if atype == _ATTR_INT or (atype == 0 and 3 in f):
        return name, _first_int(f, 3)
    if atype == _ATTR_STRING or (atype == 0 and 4 in f):
        return name, _first_str(f, 4)
    if atype == _ATTR_TENSOR or (atype == 0 and 5 in f):
        return name, _parse_tensor(_first(f, 5))[1]
    if atype == _ATTR_FLOATS or (atype == 0 and 7 in f):
        return name, _repeated_float(f, 7)
    if atype == _ATTR_INTS or (atype == 0 and 8 in f):
        return name, _repeated_int(f, 8)
    if atype == _ATTR_STRINGS or (atype == 0 and 9 in f):
        return name, _repeated_str(f, 9)
    return name, None


@dataclass(frozen=True)
class OnnxNode:
    op_type: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict


@dataclass(frozen=True)
class OnnxGraph:
    nodes: tuple[OnnxNode, ...]
    initializers: dict[str, np.ndarray]
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    name: str = ""


@dataclass(frozen=True)
class OnnxModel:
    graph: OnnxGraph
    ir_version: int
    opset_version: int
    producer: str = ""

    @property
    def input_name(self) -> str:
        return self.graph.input_names[0]

    @property
    def output_name(self) -> str:
        return self.graph.output_names[0]


def _parse_value_info_name(buf: bytes) -> str:
    return _first_str(_parse_fields(buf), 1)


def _parse_graph(buf: bytes) -> OnnxGraph:
    f = _parse_fields(buf)
    nodes = []
    for _, nbuf in f.get(1, []):
        nf = _parse_fields(nbuf)
        attrs = dict(_parse_attribute(abuf) for _, abuf in nf.get(5, []))
        nodes.append(OnnxNode(
            op_type=_first_str(nf, 4),
            inputs=tuple(_repeated_str(nf, 1)),
            outputs=tuple(_repeated_str(nf, 2)),
            attrs=attrs,
        ))
    initializers = dict(_parse_tensor(tbuf) for _, tbuf in f.get(5, []))
    inputs = [_parse_value_info_name(vbuf) for _, vbuf in f.get(11, [])]
    # graphs may redundantly list initializers among inputs
    inputs = [n for n in inputs if n not in initializers]
    outputs = [_parse_value_info_name(vbuf) for _, vbuf in f.get(12, [])]
    return OnnxGraph(nodes=tuple(nodes), initializers=initializers,
                     input_names=tuple(inputs), output_names=tuple(outputs),
                     name=_first_str(f, 2))


def load_model(path) -> OnnxModel:
    """Parse an ONNX file into an evaluable model description."""
    raw = Path(path).read_bytes()
    f = _parse_fields(raw)
    gbuf = _first(f, 7)
    if gbuf is None:
        raise FormatError(f"{path}: no graph in model")
    opset = 0
    for _, obuf in f.get(8, []):
        of = _parse_fields(obuf)
        if _first_str(of, 1) == "":  # default ai.onnx domain
            opset = _first_int(of, 2, 0)
    return OnnxModel(graph=_parse_graph(gbuf),
                     ir_version=_first_int(f, 1, 0),
                     opset_version=opset,
                     producer=_first_str(f, 2))


def model_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pair(attr, default):
    if attr is None:
        return (default, default)
    vals = [int(v) for v in attr]
    return (vals[0], vals[1])


def _conv(x, w, b, strides, pads, group, dilations):
    if group != 1:
        raise NotImplementedError("grouped convolution not supported")
    if any(d != 1 for d in dilations):
        raise NotImplementedError("dilated convolution not supported")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::strides[0], ::strides[1]]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    kernel = w.reshape(oc, ic * kh * kw).astype(np.float64)
    y = cols.astype(np.float64) @ kernel.T
    if b is not None:
        y += b.astype(np.float64)[None, :]
    return y.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2).astype(np.float32)


def _maxpool(x, kernel, strides, pads):
    kh, kw = kernel
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::strides[0], ::strides[1]]
    return np.ascontiguousarray(win.max(axis=(4, 5)))


def run(model: OnnxModel, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate the graph on named inputs; returns all graph outputs."""
    g = model.graph
    env: dict[str, np.ndarray] = {}
    for name, arr in g.initializers.items():
        env[name] = arr
    for name in g.input_names:
        if name not in inputs:
            raise ValueError(f"missing graph input {name!r}")
        env[name] = np.asarray(inputs[name], dtype=np.float32)

    for node in g.nodes:
        op = node.op_type
        if op == "Conv":
            x = env[node.inputs[0]]
            w = env[node.inputs[1]]
            b = env[node.inputs[2]] if len(node.inputs) > 2 else None
            strides = _pair(node.attrs.get("strides"), 1)
            dil = _pair(node.attrs.get("dilations"), 1)
            pads = node.attrs.get("pads") or [0, 0, 0, 0]
            group = int(node.attrs.get("group", 1))
            y = _conv(x, w, b, strides, [int(p) for p in pads], group, dil)
        elif op == "BatchNormalization":
            x, scale, bias, mean, var = (env[i] for i in node.inputs[:5])
            eps = float(node.attrs.get("epsilon", 1e-5))
            inv = 1.0 / np.sqrt(var.astype(np.float64) + eps)
            y = ((x.astype(np.float64) - mean[None, :, None, None])
                 * (scale * inv)[None, :, None, None]
                 + bias[None, :, None, None]).astype(np.float32)
        elif op == "Relu":
            y = np.maximum(env[node.inputs[0]], 0.0)
        elif op == "MaxPool":
            kernel = _pair(node.attrs.get("kernel_shape"), 1)
            strides = _pair(node.attrs.get("strides"), 1)
            pads = node.attrs.get("pads") or [0, 0, 0, 0]
            if int(node.attrs.get("ceil_mode", 0)):
                raise NotImplementedError("MaxPool ceil_mode not supported")
            y = _maxpool(env[node.inputs[0]], kernel, strides,
                         [int(p) for p in pads])
        elif op == "Add":
            y = env[node.inputs[0]] + env[node.inputs[1]]
        elif op == "Identity":
            y = env[node.inputs[0]]
        elif op == "Constant":
            y = node.attrs.get("value")
        else:
            raise NotImplementedError(
                f"op {op!r} not supported (supported: Conv, "
                "BatchNormalization, Relu, MaxPool, Add, Identity, Constant)")
        env[node.outputs[0]] = y

    missing = [n for n in g.output_names if n not in env]
    if missing:
        raise ValueError(f"graph outputs never produced: {missing}")
    return {n: env[n] for n in g.output_names}


class NeuralExtractor(Extractor):
    """Extractor backed by an interchange model file and its JSON sidecar.

    The sidecar declares ``stride``, ``dim`` and the per-channel input
    normalization constants; the model itself is treated as an opaque
    image -> grid function.  Loaded models are read-only and safe to share
    between concurrent callers.
    """

    def __init__(self, model_path, sidecar_path=None):
        model_path = Path(model_path)
        if sidecar_path is None:
            sidecar_path = model_path.with_suffix(".json")
        meta = json.loads(Path(sidecar_path).read_text())
        self.stride = int(meta["stride"])
        self.dim = int(meta["dim"])
        self.mean = np.asarray(meta.get("normalize_mean", [0.0, 0.0, 0.0]),
                               dtype=np.float32)
        self.std = np.asarray(meta.get("normalize_std", [1.0, 1.0, 1.0]),
                              dtype=np.float32)
        self.kind = "neural"
        self.model = load_model(model_path)
        self.fingerprint_hash = model_fingerprint(model_path)
        self.input_name = meta.get("input_name", self.model.input_name)
        self.output_name = meta.get("output_name", self.model.output_name)

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        side = pixels.shape[0]
        if pixels.shape[0] != pixels.shape[1]:
            raise ValueError("extractor input must be square")
        if side % self.stride:
            raise ValueError(f"input side {side} not a multiple of stride {self.stride}")
        g = side // self.stride
        rgb = pixels if pixels.ndim == 3 else np.repeat(pixels[:, :, None], 3, axis=2)
        x = (rgb - self.mean[None, None, :]) / self.std[None, None, :]
        x = x.transpose(2, 0, 1)[None].astype(np.float32)
        out = run(self.model, {self.input_name: x})[self.output_name]
        if out.shape != (1, self.dim, g, g):
            raise ValueError(
                f"model produced {out.shape}, expected (1, {self.dim}, {g}, {g})")
        return np.ascontiguousarray(out[0].transpose(1, 2, 0))
