"""JointSR shared utilities: configuration, logging, seeding, exceptions and image I/O"""
