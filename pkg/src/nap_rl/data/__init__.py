"""Bundled ontology and entity data."""
