"""Non-orthogonal multi-user deep joint source-channel coding with user-specific projections."""

__version__ = "0.1.0"
