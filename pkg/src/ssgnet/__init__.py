"""Task-agnostic scene-structure guidance maps from single images.

A small fully-convolutional network is trained, without labels, to emit
per-pixel soft segmentation maps whose channels sit low in the spectrum of a
pixel-affinity graph Laplacian while staying close to hard assignments.  The
package ships its own autodiff tape, graph construction, and eigensolvers so
every numerical claim is checkable end to end, plus a CLI wrapping the whole
pipeline.

Submodules:

* ``tensor``   reverse-mode autodiff and the image layers
* ``graph``    pixel features, exact k-NN, affinity and Laplacian assembly
* ``spectral`` dense and Lanczos eigensolvers, reference soft segmentation
* ``model``    the guidance network and the 1x1 fusion layer
* ``losses``   eigen/sparsity objective, Adam, the training loop
* ``dataio``   images, checkpoints, raw map files, traces
* ``assets``   deterministic synthetic test scenes
* ``figures``  matplotlib reports
* ``gradcheck`` finite-difference gradient verification
* ``cli``      the ``ssgnet`` command

Heavy imports are deferred until first attribute access so the CLI can pin
BLAS thread counts before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "graph", "spectral", "model", "losses", "dataio",
               "assets", "figures", "gradcheck", "cli", "errors")

_EXPORTS = {
    "Tensor": ("tensor", "Tensor"),
    "LayerParams": ("tensor", "LayerParams"),
    "no_grad": ("tensor", "no_grad"),
    "SparseGraph": ("graph", "SparseGraph"),
    "GraphKind": ("graph", "GraphKind"),
    "PixelFeature": ("graph", "PixelFeature"),
    "FeatureField": ("graph", "FeatureField"),
    "extract_features": ("graph", "extract_features"),
    "knn_search": ("graph", "knn_search"),
    "build_affinity": ("graph", "build_affinity"),
    "build_laplacian": ("graph", "build_laplacian"),
    "build_image_graph": ("graph", "build_image_graph"),
    "EigenPairs": ("spectral", "EigenPairs"),
    "dense_smallest_eigs": ("spectral", "dense_smallest_eigs"),
    "lanczos_smallest_eigs": ("spectral", "lanczos_smallest_eigs"),
    "reference_softseg": ("spectral", "reference_softseg"),
    "SsgNet": ("model", "SsgNet"),
    "forward": ("model", "forward"),
    "forward_padded": ("model", "forward_padded"),
    "FusionLayer": ("model", "FusionLayer"),
    "fuse_guidance": ("model", "fuse_guidance"),
    "param_count": ("model", "param_count"),
    "LossConfig": ("losses", "LossConfig"),
    "eigen_loss": ("losses", "eigen_loss"),
    "spatial_loss": ("losses", "spatial_loss"),
    "total_loss": ("losses", "total_loss"),
    "AdamState": ("losses", "AdamState"),
    "adam_step": ("losses", "adam_step"),
    "gather_grads": ("losses", "gather_grads"),
    "train": ("losses", "train"),
    "DatasetSpec": ("dataio", "DatasetSpec"),
    "load_image": ("dataio", "load_image"),
    "save_maps": ("dataio", "save_maps"),
    "builtin_images": ("assets", "builtin_images"),
    "SsgError": ("errors", "SsgError"),
    "ContractError": ("errors", "ContractError"),
}

__all__ = ["__version__", *_SUBMODULES, *_EXPORTS]


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    if name in _EXPORTS:
        mod, attr = _EXPORTS[name]
        return getattr(import_module(f".{mod}", __name__), attr)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
