"""Shared helpers used across uflow modules."""
