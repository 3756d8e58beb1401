"""RGRPMODL writer/reader implemented from the documented byte layout.

Layout (all little-endian):
  magic "RGRPMODL" (8 bytes), version u32 = 1,
  input shape C,H,W (3 x u32), class count M (u32), layer count (u32);
  per layer: kind byte (0 conv2d, 1 linear, 2 relu, 3 maxpool2d, 4 flatten),
  then the kind header and row-major f32 data:
    conv2d:    in, out, kH, kW, stride, pad (6 x u32);
               weights out*in*kH*kW f32; bias out f32
    linear:    in, out (2 x u32); weights out*in f32; bias out f32
    maxpool2d: window H, W, stride (3 x u32)
    relu / flatten: no payload

This module is deliberately independent of the inference package: the byte
format is the only contract shared with it.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RGRPMODL"
VERSION = 1

KIND_CODES = {"conv2d": 0, "linear": 1, "relu": 2, "maxpool2d": 3, "flatten": 4}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


class FormatError(RuntimeError):
    pass


def write_model(path, input_shape, num_classes: int, layers: list):
    """layers: dicts with 'kind' plus the kind's fields; weights/bias as
    numpy arrays (cast to f32 on write)."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<3I", *input_shape)
    out += struct.pack("<I", num_classes)
    out += struct.pack("<I", len(layers))
    for layer in layers:
        kind = layer["kind"]
        out += struct.pack("<B", KIND_CODES[kind])
        if kind == "conv2d":
            out += struct.pack("<6I", layer["in_channels"], layer["out_channels"],
                               layer["kernel"][0], layer["kernel"][1],
                               layer["stride"], layer["padding"])
            out += np.ascontiguousarray(layer["weights"], dtype="<f4").tobytes()
            out += np.ascontiguousarray(layer["bias"], dtype="<f4").tobytes()
        elif kind == "linear":
            out += struct.pack("<2I", layer["in_features"], layer["out_features"])
            out += np.ascontiguousarray(layer["weights"], dtype="<f4").tobytes()
            out += np.ascontiguousarray(layer["bias"], dtype="<f4").tobytes()
        elif kind == "maxpool2d":
            out += struct.pack("<3I", layer["window"][0], layer["window"][1], layer["stride"])
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Cursor:
    def __init__(self, data, path):
        self.data, self.off, self.path = data, 0, str(path)

    def take(self, n):
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at offset {self.off}")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def read_model(path) -> dict:
    """Parse a model file back into the write_model structure (f32 arrays)."""
    with open(path, "rb") as f:
        cur = _Cursor(f.read(), path)
    if cur.take(8) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version = cur.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    input_shape = (cur.u32(), cur.u32(), cur.u32())
    num_classes = cur.u32()
    n_layers = cur.u32()
    layers = []
    for _ in range(n_layers):
        code = cur.take(1)[0]
        kind = CODE_KINDS.get(code)
        if kind is None:
            raise FormatError(f"{path}: unknown layer code {code}")
        if kind == "conv2d":
            cin, cout, kh, kw, stride, pad = (cur.u32() for _ in range(6))
            w = np.frombuffer(cur.take(4 * cout * cin * kh * kw), dtype="<f4")
            b = np.frombuffer(cur.take(4 * cout), dtype="<f4")
            layers.append({"kind": kind, "in_channels": cin, "out_channels": cout,
                           "kernel": (kh, kw), "stride": stride, "padding": pad,
                           "weights": w.reshape(cout, cin, kh, kw).copy(), "bias": b.copy()})
        elif kind == "linear":
            din, dout = cur.u32(), cur.u32()
            w = np.frombuffer(cur.take(4 * dout * din), dtype="<f4")
            b = np.frombuffer(cur.take(4 * dout), dtype="<f4")
            layers.append({"kind": kind, "in_features": din, "out_features": dout,
                           "weights": w.reshape(dout, din).copy(), "bias": b.copy()})
        elif kind == "maxpool2d":
            layers.append({"kind": kind, "window": (cur.u32(), cur.u32()),
                           "stride": cur.u32()})
        else:
            layers.append({"kind": kind})
    if cur.off != len(cur.data):
        raise FormatError(f"{path}: trailing bytes")
    return {"input_shape": input_shape, "num_classes": num_classes, "layers": layers}
