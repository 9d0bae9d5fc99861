"""Vessel-tree mesh reconstruction, deformable mesh fitting, and surface metrics.

The package covers three workflows:

* ``volume`` / ``skeleton`` / ``centerline`` / ``reconstruct`` / ``meshops``:
  turn a binary voxel label of a tubular tree into a single watertight
  triangle mesh (skeletonize, split into root-to-leaf branches, fit B-spline
  centerlines, sweep smoothed cross-section rings, boolean-union the branches).
* ``deform``: fit a subdivided icosphere to a target point cloud by
  minimizing a weighted sum of chamfer, Laplacian, normal-consistency and
  edge losses, either by direct vertex optimization or through a small
  graph-convolutional network.
* ``metrics`` / ``synth``: evaluation metrics (Dice, HD, ASSD, chamfer,
  smoothness, segment count, hit ratios) and analytic phantoms that provide
  paired ground truth for all of the above.
"""

__version__ = "0.1.0"
