"""Toolkit for step-level error detection in math word problems.

Pipelines: alternative-solution generation (compose / permute / explain),
seeded error injection with gold labels, solution likelihood analysis,
and detection strategies including the four-stage ask-then-detect flow.
"""

__version__ = "0.1.0"
