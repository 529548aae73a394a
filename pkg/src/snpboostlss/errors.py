"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its documented exit statuses without a lookup table.
"""


class SnpBoostError(Exception):
    exit_code = 1


class ConfigError(SnpBoostError, ValueError):
    """Invalid tuning knob, split specification or command line option."""

    exit_code = 2


class DataError(SnpBoostError, ValueError):
    """Input data is malformed, inconsistent or degenerate."""

    exit_code = 3


class FormatError(DataError):
    """A file does not follow its declared layout."""


class TruncationError(FormatError):
    pass


class IntegrityError(DataError):
    """Duplicate identifiers or other referential problems."""


class SchemaError(DataError):
    """A table lacks required columns."""


class MissingVariantError(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"variants not found in genotype matrix: {shown}{more}")


class DegenerateError(DataError):
    """Zero variance, empty groups or similar conditions that make a quantity undefined."""


class CollinearityError(DataError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(
            "design matrix is rank deficient; linearly dependent columns: "
            + ", ".join(self.columns)
        )


class SeparationError(DataError):
    pass


class NumericError(SnpBoostError, ArithmeticError):
    """Non-finite values or failed numerical procedures."""

    exit_code = 4
