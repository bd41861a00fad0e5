"""
Error types for mvad - one class per failure the pipeline can report
"""

from typing import Any, Dict, Optional


class MvadError(Exception):
    """Base class for every error raised by the pipeline."""


# ─────────────────────────────────────────────────────────────────────────────
# Geometry
# ─────────────────────────────────────────────────────────────────────────────

class SingularMatrix(MvadError, ValueError):
    pass


class PointAtInfinity(MvadError, ValueError):
    pass


class EmptyWindow(MvadError, ValueError):
    pass


class AsymmetricAdjacency(MvadError, ValueError):
    pass


class MissingHomography(MvadError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing homography"


class CalibrationError(MvadError, ValueError):
    pass


# ─────────────────────────────────────────────────────────────────────────────
# Network / diffusion
# ─────────────────────────────────────────────────────────────────────────────

class DimensionMismatch(MvadError, ValueError):
    pass


class EmptyCandidateSet(MvadError, ValueError):
    pass


class ShapeMismatch(MvadError, ValueError):
    pass


class IndivisibleDimensions(MvadError, ValueError):
    pass


class InvalidTimestepPair(MvadError, ValueError):
    pass


class NonFiniteInput(MvadError, ValueError):
    pass


class NonFiniteLoss(MvadError, RuntimeError):
    """Training diverged. Carries the step, timesteps and loss components."""

    def __init__(self, step: int, timesteps: Any, components: Dict[str, float]):
        self.step = step
        self.timesteps = timesteps
        self.components = components
        super().__init__(
            f"non-finite loss at step {step} (t={timesteps}): {components}"
        )


class CheckpointMismatch(MvadError, ValueError):
    pass


# ─────────────────────────────────────────────────────────────────────────────
# Memory bank / scoring / evaluation
# ─────────────────────────────────────────────────────────────────────────────

class EmptyFeatureSet(MvadError, ValueError):
    pass


class LevelMismatch(MvadError, ValueError):
    pass


class EmptyMap(MvadError, ValueError):
    pass


class EmptyList(MvadError, ValueError):
    pass


class CorruptBankFile(MvadError, ValueError):
    pass


class SingleClass(MvadError, ValueError):
    pass


# ─────────────────────────────────────────────────────────────────────────────
# Data
# ─────────────────────────────────────────────────────────────────────────────

class DefectOutOfBounds(MvadError, RuntimeError):
    pass


class IoFailure(MvadError, OSError):
    pass


class ManifestMissing(MvadError, FileNotFoundError):
    pass


class MaskLabelMismatch(MvadError, ValueError):
    pass


class ContaminatedTrainSplit(MaskLabelMismatch):
    """A train sample carries a defect mask; train must be anomaly-free."""


class MissingCalibration(MvadError, FileNotFoundError):
    pass


# ─────────────────────────────────────────────────────────────────────────────
# CLI / configuration
# ─────────────────────────────────────────────────────────────────────────────

class ConfigParseError(MvadError, ValueError):
    """Configuration could not be parsed or validated."""

    def __init__(self, message: str, key: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        self.key = key
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}, column {column})"
        prefix = f"{key}: " if key else ""
        super().__init__(f"{prefix}{message}{where}")


class MissingInput(MvadError, FileNotFoundError):
    pass


# Warning categories
class BankMismatchWarning(UserWarning):
    """Bank was built from a different checkpoint than the one scoring with it."""


class MetricUnavailableWarning(UserWarning):
    """A metric level had a single class and was reported as n/a."""


class CacheEntryWarning(UserWarning):
    """A feature cache entry could not be read or written; it is recomputed."""
