"""Exception types shared across the package.

Both classes subclass ValueError so callers that don't care about the
distinction can catch one type; the CLI maps them to exit code 1.
"""


class ValidationError(ValueError):
    """Data violates an invariant (bad normalization, missing label, ...)."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class LengthOverflowError(ValidationError):
    """A step has more tokens than the configured maximum.

    Carries both lengths so callers can re-derive the maximum from data.
    """

    def __init__(self, n_tokens: int, max_tokens: int):
        self.n_tokens = n_tokens
        self.max_tokens = max_tokens
        super().__init__(
            f"step has {n_tokens} tokens, exceeds configured maximum {max_tokens}"
        )
