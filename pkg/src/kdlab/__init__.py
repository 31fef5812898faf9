"""Desk-scale knowledge distillation lab with self-undermining ("nasty") teachers."""

__version__ = "0.1.0"
