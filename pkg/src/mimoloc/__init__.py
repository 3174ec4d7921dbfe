"""Massive MIMO-OFDM indoor localization toolkit.

CSI simulation with front-end impairments, two-stage phase calibration,
sliding-window multipath extraction, support-vector-regression
fingerprinting, and geometric baselines, plus an experiment harness
that ties them together.
"""

__version__ = "0.1.0"
