"""Star-polygon instance segmentation: a small, self-contained pipeline
built on an in-package reverse-mode autodiff engine.

Submodules: autodiff (tensor engine), geometry (star polygons, IoU),
encode (ground-truth targets), model (network + distance refinement),
losses (objectives incl. the perceptual shape loss), optim, postprocess
(proposal suppression), metrics (AP/PQ), synth (synthetic data), train,
pipeline (inference/eval), dataio, plots, cli.
"""

__version__ = "0.1.0"
