"""
Denoiser network and checkpoint archive for the JointSR Project.
"""
