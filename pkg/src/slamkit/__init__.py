"""slamkit: a keyframe-based visual SLAM engine for mono, stereo and RGB-D cameras.

The engine is organized around a sparse keyframe map refined by bundle
adjustment, a loop-closing back-end with pose-graph optimization, and an
optional TSDF volumetric integrator, plus dataset loaders and a trajectory
evaluation harness.
"""

__version__ = "0.1.0"
