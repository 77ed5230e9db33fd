"""Reflection coupling and Langevin transport map laboratory."""
