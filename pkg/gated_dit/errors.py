#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Error Types
Every failure raised by the package derives from GatedDiTError so the CLI
can map it to an exit code in one place.
"""
from typing import List, Optional, Sequence, Tuple


class GatedDiTError(Exception):
    """Base class for package errors"""


class DimensionError(GatedDiTError, ValueError):
    """Operand shapes do not fit the operation"""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shape_txt = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {shape_txt}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ClassIdError(GatedDiTError, ValueError):
    """Class label outside the embedding table"""


class TapeError(GatedDiTError):
    """Backward requested on a tensor that no tape recorded"""


class NonScalarLossError(GatedDiTError, ValueError):
    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(shape)
        super().__init__(f"backward needs a scalar loss, got shape {self.shape}")


class NonFiniteError(GatedDiTError, ArithmeticError):
    """NaN or Inf showed up where finite values are required"""


class NonFiniteActivationError(NonFiniteError):
    def __init__(self, block_index: int, stream: str = "latent"):
        self.block_index = block_index
        self.stream = stream
        super().__init__(f"non-finite {stream} activation after block {block_index}")


class NonFiniteLossError(NonFiniteError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value} at step {step}")


class NonFiniteFunctionError(NonFiniteError):
    """grad_check evaluated f to NaN/Inf"""


class FusionAlignmentError(GatedDiTError, ValueError):
    def __init__(self, n_latent: int, n_condition: int):
        self.n_latent = n_latent
        self.n_condition = n_condition
        super().__init__(
            f"gated fusion needs index-aligned streams: {n_latent} latent tokens "
            f"vs {n_condition} condition tokens"
        )


class ConfigError(GatedDiTError):
    """One or more configuration lines could not be applied"""

    def __init__(self, errors: List[Tuple[Optional[int], str]], source: str = "<config>"):
        self.errors = list(errors)
        self.source = source
        lines = []
        for line_no, message in self.errors:
            where = f"{source}:{line_no}" if line_no is not None else source
            lines.append(f"{where}: {message}")
        super().__init__("\n".join(lines) if lines else f"{source}: invalid configuration")


class CheckpointError(GatedDiTError):
    """Checkpoint file is missing, truncated or corrupt"""


class ReportFormatError(GatedDiTError):
    def __init__(self, path: str, line: Optional[int], message: str):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")
