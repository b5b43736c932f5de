"""geotomo: geodesic X-ray transforms and boundary rigidity on simple disks."""

__version__ = "0.1.0"
