"""Numerical parity between a torch model and its exported RGRPMODL file.

Random inputs are pushed through the torch module directly, and through the
exported file via the inference toolkit's `infer` CLI run as a subprocess
(the only runtime contact between the two stacks). Reports the maximum
absolute logit deviation; 1e-4 is the expected bound for f32 storage plus
differing accumulation orders.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

PARITY_TOLERANCE = 1e-4


class ParityError(RuntimeError):
    pass


def resolve_cli(override=None) -> list:
    """Command for the inference CLI: $REGROUP_CLI, `regroup` on PATH, or
    `python -m regroup.cli` as a fallback."""
    if override:
        return list(override)
    env = os.environ.get("REGROUP_CLI")
    if env:
        return env.split()
    exe = shutil.which("regroup")
    if exe:
        return [exe]
    return [sys.executable, "-m", "regroup.cli"]


def infer_logits(model_path, image: np.ndarray, cli=None) -> np.ndarray:
    """One forward pass through the exported model via the CLI."""
    cmd = resolve_cli(cli)
    with tempfile.TemporaryDirectory() as tmp:
        image_path = os.path.join(tmp, "sample.npy")
        np.save(image_path, image.astype(np.float64))
        proc = subprocess.run(cmd + ["infer", "--model", str(model_path),
                                     "--image", image_path],
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise ParityError(f"infer failed (rc={proc.returncode}): {proc.stderr.strip()}")
        return np.asarray(json.loads(proc.stdout)["logits"], dtype=np.float64)


@dataclass
class ParityReport:
    samples: int
    max_abs_deviation: float
    tolerance: float = PARITY_TOLERANCE

    @property
    def ok(self) -> bool:
        return self.max_abs_deviation <= self.tolerance


def parity_check(module, model_path, input_shape, samples: int = 100,
                 seed: int = 0, cli=None) -> ParityReport:
    """Compare torch logits with CLI logits on `samples` random inputs."""
    import torch

    module = module.eval()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(samples):
            x = rng.random(tuple(input_shape), dtype=np.float64)
            torch_logits = module(torch.from_numpy(x[None]).float()).numpy()[0].astype(np.float64)
            cli_logits = infer_logits(model_path, x, cli)
            if cli_logits.shape != torch_logits.shape:
                raise ParityError(f"logit length mismatch: {cli_logits.shape} vs {torch_logits.shape}")
            worst = max(worst, float(np.abs(cli_logits - torch_logits).max()))
    return ParityReport(samples, worst)
