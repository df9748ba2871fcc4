"""Exception hierarchy shared by all deltacomp modules.

Each exception carries a stable ``code`` string so callers (and the CLI,
which maps the three classes to distinct exit codes) can dispatch on the
failure class without parsing messages.
"""


class DeltaCompError(Exception):
    """Base class for all deltacomp errors."""

    code = "ERROR"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class UsageError(DeltaCompError):
    """Invalid arguments, shapes, specs, or missing required inputs."""

    code = "USAGE"


class IntegrityError(DeltaCompError):
    """Corrupt or inconsistent serialized data (bad magic, checksum, truncation)."""

    code = "INTEGRITY"


class NumericsError(DeltaCompError):
    """Numerical failure: non-finite data, singular systems, non-convergence."""

    code = "NUMERIC"


# Stable codes referenced across modules.
CHECKSUM_MISMATCH = "CHECKSUM_MISMATCH"
MAGIC_MISMATCH = "MAGIC_MISMATCH"
VERSION_MISMATCH = "VERSION_MISMATCH"
TRUNCATED = "TRUNCATED"
CORRUPT = "CORRUPT"
NUMERICALLY_SINGULAR = "NUMERICALLY_SINGULAR"
NO_CONVERGENCE = "NO_CONVERGENCE"
NON_FINITE = "NON_FINITE"
BUDGET_EXHAUSTED = "BUDGET_EXHAUSTED"
RANK_OVERFLOW = "RANK_OVERFLOW"
MISSING_CALIBRATION = "MISSING_CALIBRATION"
