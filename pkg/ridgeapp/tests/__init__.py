"""
Test package for the ridgeapp application.
"""
