"""Future-view semantics for desk-scale vision-and-language navigation."""

__version__ = "0.1.0"
