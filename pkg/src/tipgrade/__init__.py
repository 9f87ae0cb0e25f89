"""LLM grading pipelines for text-input problems, with agreement metrics."""

__version__ = "0.1.0"
