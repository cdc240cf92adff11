"""ID-free multimodal graph recommender with a verifiable training engine."""

__version__ = "0.1.0"
