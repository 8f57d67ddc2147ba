"""Harness for solving, grading and analyzing linguistics-olympiad problems."""

__version__ = "0.1.0"
