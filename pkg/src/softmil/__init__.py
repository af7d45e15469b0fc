"""Soft multiple-instance logistic regression with L1 regularization.

Fuses multi-reader ellipse marks into scored regions, turns scores into soft
bag targets, fits a sparse bag-level classifier and evaluates it with FROC
operating points.
"""

__version__ = "0.1.0"
