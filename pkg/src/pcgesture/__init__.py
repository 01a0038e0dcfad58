"""Volumetric hand-gesture classification from depth point clouds.

Point-cloud frames are cropped to a region of interest, voxelized into
occupancy grids, grouped into sliding windows and classified by a 3D CNN
(or a per-step CNN feeding an LSTM). The ROI can be jittered to augment
training data. All numerics run on numpy.
"""

__version__ = "0.1.0"
