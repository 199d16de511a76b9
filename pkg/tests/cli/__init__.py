"""End-to-end command tests for run_jointsr.py"""
