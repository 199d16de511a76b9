"""Recognition and fidelity metrics, evaluation harness"""
