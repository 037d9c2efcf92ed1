"""Recovering respiratory and circulatory signals from EIT image sequences."""

__version__ = "0.1.0"
