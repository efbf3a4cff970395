"""Road scene graphs: synthetic scenes, rule-based extraction, VGAE refinement."""

__version__ = "0.1.0"
