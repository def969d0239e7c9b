"""knowpilot: a domain-writing agent engine that fuses task-specific
priors, retrieved explicit knowledge, and experiential knowledge captured
from human edits into a section-by-section generation pipeline."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
