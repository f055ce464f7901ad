"""Text-conditioned generation of low-rank fingerprint deltas for a small
frozen language model, with statistical verification and robustness tooling."""

__version__ = "0.1.0"
