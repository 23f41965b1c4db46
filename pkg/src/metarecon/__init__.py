"""Multi-task MRI reconstruction: unrolled solver plus bi-level meta-training."""

__version__ = "0.1.0"
