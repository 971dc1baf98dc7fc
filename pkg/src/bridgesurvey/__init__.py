"""Desk-scale bridge deck survey: grid-world simulator with traffic and
procedural cracks, two crack detectors over synthetic patch imagery, a
from-scratch clipped-surrogate policy-gradient agent, and an experiment
harness that compares detector/scenario combinations."""

__version__ = "0.1.0"
