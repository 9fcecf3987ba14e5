"""Confusion-aware multimodal classification on precomputed feature vectors."""
