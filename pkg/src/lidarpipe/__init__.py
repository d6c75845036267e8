"""Non-learned LiDAR 3D detection pipeline: densification, painting,
voxelization, anchor-free head encode/decode, TTA + weighted-boxes-fusion
ensembling, threshold grid search and mAP/mAPH evaluation."""

__version__ = "0.1.0"
