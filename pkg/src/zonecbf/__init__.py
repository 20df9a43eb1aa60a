"""Buffer-zone barrier-function navigation stack.

Library layers: ground-truth world simulation, lidar perception with
tracked bounding ellipses, per-obstacle barrier construction with
buffer-zone activation, QP/MPC solvers, the blended controller, and a
closed-loop scenario/benchmark engine with a CLI front end.
"""

__version__ = "0.1.0"
