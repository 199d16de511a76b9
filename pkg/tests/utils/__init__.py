"""
Tests for the shared utilities: run configuration, logging, seeding and image I/O.
"""
