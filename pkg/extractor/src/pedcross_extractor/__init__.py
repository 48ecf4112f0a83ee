"""Feature-store production from pedestrian image crops with pretrained CNNs."""

__version__ = "0.1.0"
