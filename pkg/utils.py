"""
Shared constants, the exception hierarchy and small helpers used across sentinel.
Keeps error-to-exit-code mapping and hashing consistent between commands.
"""
import hashlib
import json
import logging
from typing import Any

import numpy as np
from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

# Constants
EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_VALIDATION_ERROR = 2
PROBABILITY_EPSILON = 1e-7
EULER_GAMMA = 0.5772156649
ARTIFACT_FORMAT = "sentinel-artifact"
ARTIFACT_VERSION = 1
REPORT_VERSION = 1
J_BUDGETS = (25, 50, 100)


class SentinelError(Exception):
    """Base class for every error raised by sentinel."""

    exit_code = EXIT_RUNTIME_ERROR


class ConfigurationError(SentinelError):
    exit_code = EXIT_VALIDATION_ERROR


class DataError(SentinelError):
    """Invalid, malformed or unusable data (including infeasible synthetic specs)."""

    exit_code = EXIT_VALIDATION_ERROR


class SparseFormatError(DataError):
    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class MissingArtifactError(SentinelError):
    exit_code = EXIT_VALIDATION_ERROR

    def __init__(self, path: Any, what: str = "artifact"):
        self.path = str(path)
        super().__init__(f"required {what} not found: {self.path}")


class ArtifactError(SentinelError):
    pass


class CorruptArtifactError(ArtifactError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


class ArtifactKindError(ArtifactError):
    pass


class TraceError(SentinelError):
    """A forward trace that cannot be used for a backward pass."""


class InvariantViolation(SentinelError):
    pass


class AttackError(SentinelError):
    pass


def handle_command_error(error: Exception, command: str) -> int:
    """
    Standardized command error handling.
    Logs the failure and returns the process exit code for it.
    """
    if isinstance(error, ValidationError):
        logger.error(f"Invalid configuration for {command}: {error}")
        return EXIT_VALIDATION_ERROR
    if isinstance(error, SentinelError):
        if error.exit_code == EXIT_VALIDATION_ERROR:
            logger.error(f"Validation error during {command}: {error}")
        else:
            logger.error(f"Runtime error during {command}: {error}")
        return error.exit_code
    logger.exception(f"Unexpected error during {command}: {error}")
    return EXIT_RUNTIME_ERROR


def canonical_json(data: Any) -> str:
    """Deterministic JSON dump (sorted keys, no whitespace variance)."""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data: Any) -> str:
    """SHA-256 hex digest of the canonical JSON form of *data*."""
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded generator; extra integers select an independent stream."""
    if stream:
        return np.random.default_rng([seed, *stream])
    return np.random.default_rng(seed)


def validate_probability(value: float, name: str = "value") -> float:
    """Return *value* if it lies in [0, 1], else raise ConfigurationError."""
    if not (0.0 <= value <= 1.0):
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    return value


def parse_override(assignment: str) -> tuple:
    """
    Split a ``section.key=value`` override into (path list, value).
    The value is decoded as JSON when possible, otherwise kept as a string.
    """
    if "=" not in assignment:
        raise ConfigurationError(f"override must look like section.key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigurationError(f"empty override key in {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value
