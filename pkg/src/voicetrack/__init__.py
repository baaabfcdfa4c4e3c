"""Longitudinal vocal-biomarker toolkit.

Acoustic feature extraction, statistical screening, a personalised
sequential encoder for pairwise visit comparison, and trajectory
reconstruction, with a synthetic cohort generator for verification.
"""

__version__ = "0.1.0"
