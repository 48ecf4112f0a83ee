"""Pedestrian crossing-action prediction toolkit.

Feature sequences extracted from pedestrian image crops, plus categorical
attributes (gaze, orientation, movement state) and the normalized bounding
box center, are fed to a many-to-one recurrent classifier that outputs the
probability of a crossing action at a future frame horizon.
"""

__version__ = "0.1.0"
