"""Deformable registration and deep embedded clustering for disease-severity grading."""

__version__ = "0.1.0"

CLASSES = ("ClassA", "ClassB", "ClassC")
