"""Lead-I ECG interval estimation workbench.

Estimates PR, QRS, and QT intervals plus heart rate from 10-second
single-lead ECG: waveform parsing, preprocessing, a residual conv-net
regressor family with a classifier-gated PR path, a heuristic
delineation baseline, and an evaluation harness, all verifiable at desk
scale against a synthetic generator with exact ground truth.
"""

__version__ = "0.1.0"
