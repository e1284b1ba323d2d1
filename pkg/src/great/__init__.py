"""3D object affordance grounding from interaction images and reasoned knowledge."""

__version__ = "0.1.0"

NUM_POINTS = 2048
