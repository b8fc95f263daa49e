"""Membership-inference attack laboratory.

Trains dense classifiers with vanilla or relaxed-loss procedures, mounts
black-box and white-box membership attacks with shadow-model calibration,
and checks the loss-distribution bound chain numerically.
"""

__version__ = "0.1.0"
