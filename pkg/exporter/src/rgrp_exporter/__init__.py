"""Bridge from torch checkpoints to the RGRPMODL inference format."""

from .export import ExportError, export_checkpoint, load_architecture
from .format import FormatError, read_model, write_model
from .parity import PARITY_TOLERANCE, ParityError, ParityReport, infer_logits, parity_check

__version__ = "0.1.0"

__all__ = [
    "ExportError", "export_checkpoint", "load_architecture",
    "FormatError", "read_model", "write_model",
    "PARITY_TOLERANCE", "ParityError", "ParityReport", "infer_logits", "parity_check",
]
