"""Operator entry point: export a checkpoint, optionally verify parity.

    rgrp-export --checkpoint model.pt --arch arch.json --out model.rgm \
        [--parity-samples 100]

--parity-samples rebuilds the torch module from the architecture JSON with
the checkpoint weights and compares logits against the exported file via the
inference CLI.
"""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, export_checkpoint, load_architecture
from .format import FormatError
from .parity import ParityError, parity_check


def build_module(arch: dict, state_dict):
    """torch.nn.Sequential mirroring the architecture description."""
    import torch
    from torch import nn

    mods = []
    for spec in arch["layers"]:
        kind = spec["kind"]
        if kind == "conv2d":
            m = nn.Conv2d(spec["in_channels"], spec["out_channels"],
                          tuple(spec["kernel"]), stride=spec.get("stride", 1),
                          padding=spec.get("padding", 0))
            m.weight.data = state_dict[spec["weight"]].detach().clone().float()
            m.bias.data = state_dict[spec["bias"]].detach().clone().float()
        elif kind == "linear":
            m = nn.Linear(spec["in_features"], spec["out_features"])
            m.weight.data = state_dict[spec["weight"]].detach().clone().float()
            m.bias.data = state_dict[spec["bias"]].detach().clone().float()
        elif kind == "relu":
            m = nn.ReLU()
        elif kind == "maxpool2d":
            m = nn.MaxPool2d(tuple(spec["window"]), stride=spec.get("stride", 1))
        elif kind == "flatten":
            m = nn.Flatten()
        else:
            raise ExportError(f"unsupported layer kind {kind!r}")
        mods.append(m)
    return torch.nn.Sequential(*mods)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rgrp-export",
                                     description="export a torch checkpoint to RGRPMODL")
    parser.add_argument("--checkpoint", required=True, help="torch .pt state-dict file")
    parser.add_argument("--arch", required=True, help="architecture JSON")
    parser.add_argument("--out", required=True, help="output .rgm path")
    parser.add_argument("--parity-samples", type=int, default=0,
                        help="verify logits on N random inputs via the inference CLI")
    args = parser.parse_args(argv)
    try:
        import torch

        state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
        arch = export_checkpoint(state, args.arch, args.out)
        print(f"exported: {args.out}")
        if args.parity_samples > 0:
            module = build_module(arch, state)
            report = parity_check(module, args.out, arch["input_shape"],
                                  samples=args.parity_samples)
            status = "ok" if report.ok else "FAIL"
            print(f"parity: max |dlogit| = {report.max_abs_deviation:.3e} over "
                  f"{report.samples} samples (tolerance {report.tolerance:g}) -> {status}")
            if not report.ok:
                return 1
        return 0
    except (ExportError, FormatError, ParityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
