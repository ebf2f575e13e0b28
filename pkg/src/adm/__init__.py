"""Adaptive delay model."""
