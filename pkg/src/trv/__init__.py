"""Self-supervised traversability estimation from driving experience.

Learns per-pixel traversability from vehicle trajectories and segmentation
mask proposals over frozen visual features, then turns predictions into
bird's-eye-view costmaps suitable for sampling-based planning.
"""

__version__ = "0.1.0"
