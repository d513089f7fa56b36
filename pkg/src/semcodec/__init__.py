"""semcodec: a dual-encoder split-RVQ speech tokenizer with reconstruction-driven
semantic distillation, Gaussian KL diagnostics, and sequence-identity
mutual-information evaluation."""

__version__ = "0.1.0"
