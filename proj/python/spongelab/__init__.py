"""Python bindings for the sponge-patch laboratory."""

from ._core import (
    Model,
    SpongelabError,
    ValidationError,
    apply_patch,
    cum_latency,
    first_violation,
    gen_stream,
    gen_video,
    gradcheck,
    train_patch,
)

__all__ = [
    "Model",
    "SpongelabError",
    "ValidationError",
    "apply_patch",
    "cum_latency",
    "first_violation",
    "gen_stream",
    "gen_video",
    "gradcheck",
    "train_patch",
]
