"""Machine unlearning by minimizing input sensitivity, with evaluation and diagnostics."""

__version__ = "0.1.0"
