"""Harnack inequalities and gradient estimates for degenerate G-SDEs."""
