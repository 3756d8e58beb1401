"""Bit-exact readers and writers.

Datasets (MNIST IDX, CIFAR-10 binary), the portable model format (RGRPMODL),
ensemble persistence (RGRPENSB), adversarial sets (RGRPADVX) and evaluation
reports (TSV + JSON).

All custom formats are little-endian with an 8-byte ASCII magic and a u32
version that must match exactly; IDX is big-endian per its own convention.
Weights and images are stored as f32, ensembles as f64 (KL scores of
near-duplicate PMFs are precision-sensitive).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .attacks import AdversarialRecord
from .core import GenerativeEnsemble
from .engine import Conv2d, Flatten, Linear, MaxPool2d, NetworkModel, ReLU
from .errors import FormatError, ValidationError

MODEL_MAGIC = b"RGRPMODL"
ENSEMBLE_MAGIC = b"RGRPENSB"
ADVSET_MAGIC = b"RGRPADVX"
FORMAT_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_KIND_CODES = {"conv2d": 0, "linear": 1, "relu": 2, "maxpool2d": 3, "flatten": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

UNTARGETED = 0xFFFFFFFF


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0,1]
    labels: np.ndarray  # (N,) int64
    provenance: str = "train"  # train | test | adversarial

    def __len__(self):
        return len(self.images)


class _Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated (wanted {n} bytes at offset {self.off})")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").copy()

    def done(self):
        if self.off != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.off} trailing bytes")


def _read_be32(reader: _Reader) -> int:
    return struct.unpack(">I", reader.take(4))[0]


def load_mnist(images_path, labels_path, provenance: str = "train") -> LabeledDataset:
    """Parse an IDX image/label file pair; pixels are scaled by 1/255."""
    with open(images_path, "rb") as f:
        img = _Reader(f.read(), str(images_path))
    magic = _read_be32(img)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad IDX image magic 0x{magic:08x}")
    count, rows, cols = _read_be32(img), _read_be32(img), _read_be32(img)
    pixels = np.frombuffer(img.take(count * rows * cols), dtype=np.uint8)
    img.done()

    with open(labels_path, "rb") as f:
        lab = _Reader(f.read(), str(labels_path))
    magic = _read_be32(lab)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad IDX label magic 0x{magic:08x}")
    lcount = _read_be32(lab)
    labels = np.frombuffer(lab.take(lcount), dtype=np.uint8).astype(np.int64)
    lab.done()

    if count != lcount:
        raise FormatError(f"image count {count} != label count {lcount}")
    images = (pixels.astype(np.float64) / 255.0).reshape(count, 1, rows, cols)
    return LabeledDataset(images, labels, provenance)


def load_cifar10(batch_paths, provenance: str = "train") -> LabeledDataset:
    """Parse CIFAR-10 binary batches: 3073-byte records, 1 label byte then
    3072 pixel bytes in R,G,B plane order."""
    if isinstance(batch_paths, (str, bytes)) or not hasattr(batch_paths, "__iter__"):
        batch_paths = [batch_paths]
    all_images, all_labels = [], []
    for path in batch_paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % 3073 != 0:
            raise FormatError(f"{path}: length {len(raw)} not divisible by 3073")
        n = len(raw) // 3073
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, 3073)
        all_labels.append(rec[:, 0].astype(np.int64))
        all_images.append(rec[:, 1:].astype(np.float64).reshape(n, 3, 32, 32) / 255.0)
    return LabeledDataset(np.concatenate(all_images), np.concatenate(all_labels), provenance)


# ---------------------------------------------------------------------------
# model format


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_model(model: NetworkModel, path):
    """Write the portable single-file model format (weights as f32 LE)."""
    model.validate()
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<3I", *model.input_shape)
    out += struct.pack("<I", model.num_classes)
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        out += struct.pack("<B", _KIND_CODES[layer.kind])
        if layer.kind == "conv2d":
            out += struct.pack("<6I", layer.in_channels, layer.out_channels,
                               layer.kernel[0], layer.kernel[1], layer.stride, layer.padding)
            out += _f32_bytes(layer.weights)
            out += _f32_bytes(layer.bias)
        elif layer.kind == "linear":
            out += struct.pack("<2I", layer.in_dim, layer.out_dim)
            out += _f32_bytes(layer.weights)
            out += _f32_bytes(layer.bias)
        elif layer.kind == "maxpool2d":
            out += struct.pack("<3I", layer.window[0], layer.window[1], layer.stride)
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_model(path) -> NetworkModel:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.take(8) != MODEL_MAGIC:
        raise FormatError(f"{path}: bad model magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported model format version {version}")
    input_shape = (r.u32(), r.u32(), r.u32())
    num_classes = r.u32()
    n_layers = r.u32()
    layers = []
    for _ in range(n_layers):
        code = r.u8()
        if code not in _CODE_KINDS:
            raise FormatError(f"{path}: unknown layer kind code {code}")
        kind = _CODE_KINDS[code]
        if kind == "conv2d":
            cin, cout, kh, kw, stride, pad = (r.u32() for _ in range(6))
            w = r.f32_array(cout * cin * kh * kw).reshape(cout, cin, kh, kw)
            b = r.f32_array(cout)
            layers.append(Conv2d(cin, cout, (kh, kw), stride, pad, w, b))
        elif kind == "linear":
            din, dout = r.u32(), r.u32()
            w = r.f32_array(dout * din).reshape(dout, din)
            b = r.f32_array(dout)
            layers.append(Linear(din, dout, w, b))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool2d":
            layers.append(MaxPool2d((r.u32(), r.u32()), r.u32()))
        elif kind == "flatten":
            layers.append(Flatten())
    r.done()
    model = NetworkModel(layers, input_shape, num_classes)
    try:
        model.validate()
    except ValidationError as e:
        raise FormatError(f"{path}: inconsistent model: {e}") from None
    return model


# ---------------------------------------------------------------------------
# ensemble format


def save_ensemble(ensemble: GenerativeEnsemble, path):
    """Write the ensemble: f64 matrices, class-major, positive then negative
    per layer; selected k stored as 0 when unset."""
    ensemble.validate()
    out = bytearray()
    out += ENSEMBLE_MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<d", ensemble.delta)
    out += struct.pack("<I", ensemble.num_classes)
    out += struct.pack("<I", ensemble.n_layers)
    out += struct.pack("<I", ensemble.selected_k or 0)
    for ordinal in range(ensemble.n_layers):
        d = ensemble.pos[ordinal].shape[1]
        out += struct.pack("<2I", ensemble.layer_indices[ordinal], d)
        out += np.ascontiguousarray(ensemble.pos[ordinal], dtype="<f8").tobytes()
        out += np.ascontiguousarray(ensemble.neg[ordinal], dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_ensemble(path) -> GenerativeEnsemble:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.take(8) != ENSEMBLE_MAGIC:
        raise FormatError(f"{path}: bad ensemble magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported ensemble format version {version}")
    delta = r.f64()
    m = r.u32()
    n_layers = r.u32()
    selected_k = r.u32() or None
    layer_indices, pos, neg = [], [], []
    for _ in range(n_layers):
        layer_indices.append(r.u32())
        d = r.u32()
        pos.append(r.f64_array(m * d).reshape(m, d))
        neg.append(r.f64_array(m * d).reshape(m, d))
    r.done()
    ens = GenerativeEnsemble(num_classes=m, delta=delta, layer_indices=layer_indices,
                             pos=pos, neg=neg, selected_k=selected_k)
    try:
        ens.validate()
    except ValidationError as e:
        raise FormatError(f"{path}: invalid ensemble: {e}") from None
    return ens


# ---------------------------------------------------------------------------
# adversarial sets


def save_adversarial_set(records: list, path):
    """Write attack records; images are stored as f32 in C,H,W order. The
    image extent lives in the header, so the record list must be homogeneous."""
    if records:
        shape = records[0].image.shape
        if any(r.image.shape != shape for r in records):
            raise ValidationError("adversarial records have mixed image shapes")
    else:
        shape = (0, 0, 0)
    out = bytearray()
    out += ADVSET_MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(records))
    out += struct.pack("<3I", *shape)
    for rec in records:
        target = UNTARGETED if rec.target is None else rec.target
        out += struct.pack("<3I", rec.source_index, rec.true_label, target)
        out += struct.pack("<B", 1 if rec.success else 0)
        out += struct.pack("<f", rec.confidence)
        out += _f32_bytes(rec.image)
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_adversarial_set(path) -> list:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.take(8) != ADVSET_MAGIC:
        raise FormatError(f"{path}: bad adversarial-set magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported adversarial-set format version {version}")
    count = r.u32()
    shape = (r.u32(), r.u32(), r.u32())
    records = []
    for _ in range(count):
        source, true_label, target = r.u32(), r.u32(), r.u32()
        success = r.u8() != 0
        confidence = struct.unpack("<f", r.take(4))[0]
        image = r.f32_array(int(np.prod(shape))).reshape(shape)
        records.append(AdversarialRecord(source, true_label,
                                         None if target == UNTARGETED else target,
                                         image, success, confidence))
    r.done()
    return records


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class ReportRow:
    dataset: str
    attack: str  # "none" for clean sets
    n_samples: int  # #S for adversarial sets, evaluated count otherwise
    smax_top1: float
    smax_top5: float
    regroup_top1: float
    regroup_top5: float
    mode: str
    k: int
    smax_seconds: float  # mean per-sample inference time
    regroup_seconds: float


_REPORT_COLUMNS = ["dataset", "attack", "n_samples", "smax_top1", "smax_top5",
                   "regroup_top1", "regroup_top5", "mode", "k",
                   "smax_seconds", "regroup_seconds"]


def write_report(rows: list, tsv_path, json_path, config_hash: str = ""):
    """Emit the evaluation table as TSV and JSON (same content)."""
    with open(tsv_path, "w") as f:
        f.write("\t".join(_REPORT_COLUMNS) + "\n")
        for row in rows:
            d = asdict(row)
            f.write("\t".join(_format_cell(d[c]) for c in _REPORT_COLUMNS) + "\n")
    payload = {"config_hash": config_hash, "rows": [asdict(r) for r in rows]}
    with open(json_path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def read_report_json(json_path) -> dict:
    with open(json_path) as f:
        return json.load(f)
