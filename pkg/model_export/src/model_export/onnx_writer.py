"""Minimal ONNX serializer for inference graphs of convolutional backbones.

Writes the protobuf wire format directly (the onnx package is not assumed to
be installable); the op set is limited to what truncated residual backbones
need: Conv, BatchNormalization, Relu, MaxPool, Add.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IR_VERSION = 8
OPSET_VERSION = 13

_FLOAT = 1  # TensorProto.DataType

_ATTR_FLOAT, _ATTR_INT, _ATTR_INTS = 1, 2, 7


def _varint(v: int) -> bytes:
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _tag(field_no: int, wire: int) -> bytes:
    return _varint((field_no << 3) | wire)


def _len_delim(field_no: int, payload: bytes) -> bytes:
    return _tag(field_no, 2) + _varint(len(payload)) + payload


def _string(field_no: int, s: str) -> bytes:
    return _len_delim(field_no, s.encode("utf-8"))


def _int64(field_no: int, v: int) -> bytes:
    if v < 0:
        v += 1 << 64
    return _tag(field_no, 0) + _varint(v)


def _float32(field_no: int, v: float) -> bytes:
    return _tag(field_no, 5) + struct.pack("<f", v)


def _tensor_proto(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    out = b"".join(_int64(1, d) for d in arr.shape)
    out += _int64(2, _FLOAT)
    out += _string(8, name)
    out += _len_delim(9, arr.tobytes())
    return out


def _attr_int(name: str, v: int) -> bytes:
    return _string(1, name) + _int64(3, v) + _int64(20, _ATTR_INT)


def _attr_float(name: str, v: float) -> bytes:
    return _string(1, name) + _float32(2, v) + _int64(20, _ATTR_FLOAT)


def _attr_ints(name: str, vals) -> bytes:
    packed = b"".join(_varint(int(v)) for v in vals)
    return _string(1, name) + _len_delim(8, packed) + _int64(20, _ATTR_INTS)


def _value_info(name: str, shape) -> bytes:
    dims = b""
    for d in shape:
        dims += _len_delim(1, _int64(1, int(d)))
    tensor_type = _int64(1, _FLOAT) + _len_delim(2, dims)
    return _string(1, name) + _len_delim(2, _len_delim(1, tensor_type))


@dataclass
class GraphBuilder:
    """Accumulates nodes and initializers, then serializes a ModelProto."""

    name: str = "backbone"
    producer: str = "model-export"
    nodes: list[bytes] = field(default_factory=list)
    initializers: list[bytes] = field(default_factory=list)
    _counter: int = 0

    def fresh(self, prefix: str) -> str:
        self._counter += 1
        return f"{prefix}_{self._counter}"

    def initializer(self, name: str, arr: np.ndarray) -> str:
        self.initializers.append(_tensor_proto(name, arr))
        return name

    def _node(self, op: str, inputs, outputs, attrs=()) -> None:
        blob = b"".join(_string(1, i) for i in inputs)
        blob += b"".join(_string(2, o) for o in outputs)
        blob += _string(3, self.fresh(op.lower()))
        blob += _string(4, op)
        blob += b"".join(_len_delim(5, a) for a in attrs)
        self.nodes.append(blob)

    def conv(self, x: str, weight: np.ndarray, bias, stride, padding) -> str:
        out = self.fresh("conv_out")
        wname = self.initializer(self.fresh("conv_w"), weight)
        inputs = [x, wname]
        if bias is not None:
            inputs.append(self.initializer(self.fresh("conv_b"), bias))
        kh, kw = weight.shape[2], weight.shape[3]
        attrs = [
            _attr_ints("dilations", [1, 1]),
            _attr_int("group", 1),
            _attr_ints("kernel_shape", [kh, kw]),
            _attr_ints("pads", [padding[0], padding[1], padding[0], padding[1]]),
            _attr_ints("strides", [stride[0], stride[1]]),
        ]
        self._node("Conv", inputs, [out], attrs)
        return out

    def batch_norm(self, x: str, scale, bias, mean, var, eps: float) -> str:
        out = self.fresh("bn_out")
        inputs = [x,
                  self.initializer(self.fresh("bn_scale"), scale),
                  self.initializer(self.fresh("bn_bias"), bias),
                  self.initializer(self.fresh("bn_mean"), mean),
                  self.initializer(self.fresh("bn_var"), var)]
        self._node("BatchNormalization", inputs, [out],
                   [_attr_float("epsilon", eps)])
        return out

    def relu(self, x: str) -> str:
        out = self.fresh("relu_out")
        self._node("Relu", [x], [out])
        return out

    def max_pool(self, x: str, kernel, stride, padding) -> str:
        out = self.fresh("pool_out")
        attrs = [
            _attr_ints("kernel_shape", [kernel[0], kernel[1]]),
            _attr_ints("pads", [padding[0], padding[1], padding[0], padding[1]]),
            _attr_ints("strides", [stride[0], stride[1]]),
        ]
        self._node("MaxPool", [x], [out], attrs)
        return out

    def add(self, a: str, b: str) -> str:
        out = self.fresh("add_out")
        self._node("Add", [a, b], [out])
        return out

    def serialize(self, input_name: str, input_shape, output_name: str,
                  output_shape) -> bytes:
        graph = b"".join(_len_delim(1, n) for n in self.nodes)
        graph += _string(2, self.name)
        graph += b"".join(_len_delim(5, t) for t in self.initializers)
        graph += _len_delim(11, _value_info(input_name, input_shape))
        graph += _len_delim(12, _value_info(output_name, output_shape))

        model = _int64(1, IR_VERSION)
        model += _string(2, self.producer)
        model += _len_delim(7, graph)
        model += _len_delim(8, _string(1, "") + _int64(2, OPSET_VERSION))
        return model
