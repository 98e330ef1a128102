"""Tiny-CNN EEG motor-movement decoding with inter-session transfer learning.

Synthetic sessions, IIR preprocessing, a hand-differentiated compact CNN,
rolling-window CV, transfer-learning schedules and an embedded budget model.
"""

__version__ = "0.1.0"
