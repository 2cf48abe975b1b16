"""Concept-attention saliency maps for a toy multi-modal DiT."""
