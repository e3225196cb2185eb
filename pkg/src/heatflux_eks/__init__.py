"""Online wall heat-flux estimation with an ANN-surrogate extended Kalman smoother."""
__version__ = "0.1.0"
