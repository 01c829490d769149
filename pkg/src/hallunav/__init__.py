"""Learned dynamic-obstacle hallucination for training LiDAR motion planners.

Pipeline stages: collect open-space motion plans, learn an obstacle
hallucination encoder against a fixed differentiable trajectory-optimizer
decoder, generate a supervised (scan history, goal, action) dataset, train
a recurrent scan-history planner, and evaluate it in a procedural
dynamic-obstacle benchmark against DWA/random/static-hallucination
baselines.
"""

__version__ = "0.1.0"
