"""Self-supervised monocular depth with a windowed-attention encoder and a densely cascaded decoder."""

__version__ = "0.1.0"
