"""Differentiable physics for cable-driven tensegrity robots.

Subpackages: autodiff (reverse-mode tape), dynamics (rigid rods),
robot (topology + cables + motors), contact (detection and learnable
response), engine (the differentiable simulator), ground_truth (the
hidden-parameter reference simulator), sysid (progressive parameter
identification), control (trajectory optimization), cli (experiment
driver).
"""

__version__ = "0.1.0"
