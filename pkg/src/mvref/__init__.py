"""Multi-view refinement of rendered inverse-depth maps.

The package is organised roughly along the data flow:

``scene``     procedural scenes, mesh corruption and a software rasterizer
``geometry``  pinhole camera model and SE(3) pose algebra
``warp``      cross-view reprojection, resampling and occlusion masks
``autodiff``  minimal reverse-mode automatic differentiation on numpy arrays
``net``       the refinement network (encoder/decoder, aggregation, feature
              transform) and its checkpoint format
``loss``      training objective (berHu data term, gradient term, geometric
              consistency, weight regularisation)
``metrics``   inverse-depth evaluation metrics and report formatting
``train``     the training loop (Adam, schedules, checkpointing, resume)
``dataset``   on-disk sample layout shared by generation/training/evaluation
``cli``       command line entry points
"""

__version__ = "0.1.0"
