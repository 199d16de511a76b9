"""Continuous image flow and discrete absorbing text diffusion"""
