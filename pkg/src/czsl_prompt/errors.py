"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or inconsistent input: manifests, feature files, configs, splits."""


class NumericError(ArithmeticError):
    """Numerical failure: degenerate norms, non-finite losses or gradients."""
