"""
CoopDet Utilities Module

Common utilities and helper functions used throughout the simulator.

Components:
- common.py: Seeded streams, seed splitting, hashing, size formatting
- errors.py: Exception hierarchy
- logging.py: Centralized logging setup
- validators.py: Configuration value validation
- decorators.py: Reusable decorators
"""
