"""
Semantic scene completion from LiDAR scans with local deep implicit functions

Modules:
    scene_io        KITTI scans/labels/poses, ray traversal, multi-scan accumulation
    synthscene      procedural scenes and simulated scans with analytic ground truth
    sampling        training targets (free-space carving, consistency points, batches)
    latent_grid     three-level 2D latent grid and support regions
    decoder         conditioned MLP with exact backward pass
    losses          semantic, geometric and consistency losses
    trainer         auto-decoder fitting with Adam
    extraction      voxel grids, MISE meshes, ground images
    evaluation      IoU / mIoU, precision-recall sweeps
    cli             command line front end
"""

__version__ = "0.3.0"
