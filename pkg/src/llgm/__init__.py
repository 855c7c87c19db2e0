"""Low-light enhancement with a pyramid of 2D Gaussian splats.

Stage 1 (:mod:`llgm.reconstruct`) fits Gaussians to an image.  Stage 2
(:mod:`llgm.enhance`) freezes their geometry and learns, per Gaussian, a
mixture over a dictionary of brightening curves (:mod:`llgm.dictionary`).
"""

from .dictionary import Dictionary, build_dictionary, load_dictionary, save_dictionary
from .enhance import EnhanceConfig, enhance
from .gaussians import GaussianLevel, GaussianSet, load_model, save_model
from .image import load_image, save_image
from .metrics import evaluate
from .reconstruct import ReconConfig, fit

__all__ = [
    "Dictionary", "EnhanceConfig", "GaussianLevel", "GaussianSet", "ReconConfig", "build_dictionary",
    "enhance", "evaluate", "fit", "load_dictionary", "load_image", "load_model", "save_dictionary",
    "save_image", "save_model",
]
