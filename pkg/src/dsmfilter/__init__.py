"""Refinement of noisy stereo DSMs into building-preserving, vegetation-free height maps."""

from .raster import HeightMap, Metrics, NormalField, RasterError, RoofClassMap, load_raster, save_raster

__all__ = ["HeightMap", "Metrics", "NormalField", "RasterError", "RoofClassMap", "load_raster", "save_raster"]
__version__ = "0.1.0"
