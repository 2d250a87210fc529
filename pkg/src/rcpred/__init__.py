"""Counterfactual prediction under runtime confounding."""
