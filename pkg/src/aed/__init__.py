"""Adversarial energy disaggregation."""
