"""Training loop and joint sampler"""
