"""Export a torch checkpoint into the RGRPMODL format.

The architecture is supplied as an explicit JSON description (no graph
tracing): input shape, class count, and an ordered layer list where
parametric entries name their state-dict keys, e.g.

    {"input_shape": [1, 28, 28], "num_classes": 10, "layers": [
        {"kind": "conv2d", "in_channels": 1, "out_channels": 8,
         "kernel": [5, 5], "stride": 2, "padding": 2,
         "weight": "net.0.weight", "bias": "net.0.bias"},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "linear", "in_features": 1568, "out_features": 10,
         "weight": "net.3.weight", "bias": "net.3.bias"}]}

Conv weights are written out x in x kH x kW, linear weights out x in, both
row-major f32 (torch's native layout).
"""

from __future__ import annotations

import json

import numpy as np

from .format import write_model

SUPPORTED_KINDS = ("conv2d", "linear", "relu", "maxpool2d", "flatten")


class ExportError(ValueError):
    pass


def load_architecture(source) -> dict:
    """Parse and validate an architecture description (path, JSON text, or dict)."""
    if isinstance(source, dict):
        arch = source
    else:
        text = source if str(source).lstrip().startswith("{") else open(source).read()
        arch = json.loads(text)
    for key in ("input_shape", "num_classes", "layers"):
        if key not in arch:
            raise ExportError(f"architecture missing {key!r}")
    if len(arch["input_shape"]) != 3:
        raise ExportError("input_shape must be [C, H, W]")
    unsupported = sorted({l.get("kind") for l in arch["layers"]} - set(SUPPORTED_KINDS))
    if unsupported:
        raise ExportError(f"unsupported layer kind(s): {', '.join(map(str, unsupported))}")
    return arch


def _tensor(state_dict, key, expect_shape):
    if key not in state_dict:
        raise ExportError(f"checkpoint has no tensor {key!r}")
    value = state_dict[key]
    array = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
    if tuple(array.shape) != tuple(expect_shape):
        raise ExportError(f"{key}: shape {tuple(array.shape)} != expected {tuple(expect_shape)}")
    return array


def export_checkpoint(state_dict, architecture, out_path) -> dict:
    """Write the checkpoint as RGRPMODL; returns the validated architecture.

    state_dict maps names to tensors (torch state dict or plain arrays);
    architecture is anything load_architecture accepts.
    """
    arch = load_architecture(architecture)
    layers = []
    for spec in arch["layers"]:
        kind = spec["kind"]
        if kind == "conv2d":
            kh, kw = spec["kernel"]
            shape = (spec["out_channels"], spec["in_channels"], kh, kw)
            layers.append({
                "kind": kind, "in_channels": spec["in_channels"],
                "out_channels": spec["out_channels"], "kernel": (kh, kw),
                "stride": spec.get("stride", 1), "padding": spec.get("padding", 0),
                "weights": _tensor(state_dict, spec["weight"], shape),
                "bias": _tensor(state_dict, spec["bias"], (spec["out_channels"],)),
            })
        elif kind == "linear":
            shape = (spec["out_features"], spec["in_features"])
            layers.append({
                "kind": kind, "in_features": spec["in_features"],
                "out_features": spec["out_features"],
                "weights": _tensor(state_dict, spec["weight"], shape),
                "bias": _tensor(state_dict, spec["bias"], (spec["out_features"],)),
            })
        elif kind == "maxpool2d":
            layers.append({"kind": kind, "window": tuple(spec["window"]),
                           "stride": spec.get("stride", 1)})
        else:
            layers.append({"kind": kind})
    write_model(out_path, tuple(arch["input_shape"]), arch["num_classes"], layers)
    return arch
