"""
Core package containing the registration data models and numerical primitives.
"""
