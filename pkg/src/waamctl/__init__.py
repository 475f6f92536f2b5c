"""Toolkit for learning thin-wall arc-deposition dynamics and regulating bead
height and width with a constrained one-step-ahead predictive controller,
evaluated in closed loop against a synthetic deposition plant."""

__version__ = "0.1.0"
