"""Deterministic zeroth-order optimization by coherent coordinate descent."""
