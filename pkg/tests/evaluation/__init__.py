"""Metric and evaluation harness tests"""
