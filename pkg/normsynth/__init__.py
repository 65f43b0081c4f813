"""
normsynth - MR intensity normalization and patch-based contrast synthesis
"""
__version__ = '1.0.0'
