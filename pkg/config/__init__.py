"""
CoopDet Configuration Module

Centralized configuration management for the CoopDet simulator.
"""

from .settings import Config

__all__ = ['Config']
