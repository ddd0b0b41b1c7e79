"""Object-aware LiDAR diffusion at desk scale."""
__version__ = "0.1.0"
