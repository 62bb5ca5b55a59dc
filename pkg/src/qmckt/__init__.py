"""Question-centric multi-expert contrastive knowledge tracing."""

__version__ = "0.1.0"
