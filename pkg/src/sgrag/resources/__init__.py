"""Versioned data files: default prompt head and grid-cell synonyms."""
