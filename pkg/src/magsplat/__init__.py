"""Multi-agent Gaussian-splat SLAM backend.

Simulated RGB-D agents build, compact, and transmit 3D Gaussian submaps to a
central server that detects loops, estimates loop edges without any initial
relative pose, optimizes a robust pose graph, and fuses a global map, with
exact byte accounting of everything transmitted.
"""

__version__ = "0.1.0"
