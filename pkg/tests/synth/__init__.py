"""Synthetic data tests: vocabulary, rendering, degradation, manifests"""
