"""Asynchronous function calling for LLMs: markup, scheduling, runtime, and simulation."""

__version__ = "0.1.0"
