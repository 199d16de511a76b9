"""
Tests for the continuous image flow, the absorbing text process and their schedules.
"""
