"""woplearn: learning locally-defined binary image operators from image pairs.

A binary image transformation that is translation-invariant and locally
defined w.r.t. a finite window is fully determined by a local function that
maps each pixel's windowed neighborhood pattern to an output bit.  This
package estimates such local functions from input/output image pairs with
either a frequency lookup table or a small from-scratch CNN, applies them as
image operators, and evaluates them on staff-line removal.
"""

__version__ = "0.1.0"

from .imagecore import BinaryImage, Window, make_rect_window, extract_patch
from .woperator import LocalFunction, apply_operator, compose_apply

__all__ = [
    "BinaryImage",
    "Window",
    "make_rect_window",
    "extract_patch",
    "LocalFunction",
    "apply_operator",
    "compose_apply",
    "__version__",
]
