"""Volume preparation: grids, I/O, quality control, preprocessing, phantoms."""
from .grid import SliceImage, Units, VolumeGrid

__all__ = ['SliceImage', 'Units', 'VolumeGrid']
