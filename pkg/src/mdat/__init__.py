"""Margin-discrepancy adversarial training for multi-domain bag-of-features
text classification, with divergence oracles and a numerical evaluator of
the Rademacher-complexity generalization bound."""

__version__ = "0.1.0"
