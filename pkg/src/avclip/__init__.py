"""Audiovisual transformer for long-range text-to-video retrieval."""
