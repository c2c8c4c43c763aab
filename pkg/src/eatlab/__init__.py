"""eatlab: embodiment-conditioned sequence-model control at desk scale."""

__version__ = "0.1.0"
