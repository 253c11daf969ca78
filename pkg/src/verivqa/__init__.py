"""verivqa: answer verification with competing explanations for VQA."""

__version__ = "0.1.0"
