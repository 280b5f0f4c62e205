"""Published per-class scores for the four-stage classifier and a confusion matrix consistent with them.

The matrix is one solution of the row/column margins implied by the reported
precision, recall and support (club TP=142/FP=103/FN=54, contribMid
TP=1714/FP=10/FN=0, federation TP=80/FP=55/FN=82, toy TP=736/FP=0/FN=32).
Any matrix with these margins yields the same metrics.
"""

import numpy as np

CLASSES = ("club", "contribMid", "federation", "toy")

COUNTS = np.array([
    [142, 0, 54, 0],
    [0, 1714, 0, 0],
    [72, 10, 80, 0],
    [31, 0, 1, 736],
])

# class: (precision, recall, f1, support)
PER_CLASS = {
    "club": (0.5796, 0.7245, 0.6440, 196),
    "contribMid": (0.9942, 1.0000, 0.9971, 1714),
    "federation": (0.5926, 0.4938, 0.5387, 162),
    "toy": (1.0000, 0.9583, 0.9787, 768),
}
MACRO_F1 = 0.7896
WEIGHTED_F1 = 0.9416
ACCURACY = 0.9408
BALANCED_ACCURACY = 0.7942
