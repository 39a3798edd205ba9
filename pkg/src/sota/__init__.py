"""Optimal-transport attention for tri-modal imitation learning."""
