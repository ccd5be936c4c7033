"""Exception hierarchy. Every error carries a machine-readable ``code``."""

from __future__ import annotations


class CapAttackError(Exception):
    code = "error"

    def __init__(self, message: str = "", code: str | None = None):
        super().__init__(message or self.code)
        if code is not None:
            self.code = code


class ShapeMismatch(CapAttackError):
    code = "shape_mismatch"


class DomainError(CapAttackError):
    code = "domain_error"


class ZeroNorm(CapAttackError):
    code = "zero_norm"


class EncoderFailure(CapAttackError):
    code = "encoder_failure"


class PipelineFailure(CapAttackError):
    code = "pipeline_failure"


class NonFiniteGradient(CapAttackError):
    code = "non_finite_gradient"


class MissingIndex(CapAttackError):
    code = "missing_index"


class InsufficientSamples(CapAttackError):
    code = "insufficient_samples"


class EmptyInput(CapAttackError):
    code = "empty_input"


class ConfigError(CapAttackError):
    code = "config_error"


class ModelLoadError(CapAttackError):
    code = "model_load_failure"


class MissingArtifact(CapAttackError):
    code = "missing_artifact"
