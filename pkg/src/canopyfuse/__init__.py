"""canopyfuse: desk-scale canopy-height mapping from sparse LiDAR + raster imagery."""

__version__ = "0.1.0"
