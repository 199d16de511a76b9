"""
Training loop and joint sampler tests.

Most tests drive the loops with stub denoisers from the root conftest so that
expected values can be computed by hand.
"""
