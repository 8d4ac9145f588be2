"""Desk-scale emulation of NVFP4 quantization-aware training for segmentation."""

from .fp4core import BlockGeometry, QuantizedTensor, RoundingMode, dequantize, quantize
from .qatlayer import RECIPES, QuantLinear, RecipeConfig, recipe_from_name

__version__ = "0.1.0"

__all__ = ["BlockGeometry", "QuantizedTensor", "RoundingMode", "dequantize", "quantize", "RECIPES",
           "QuantLinear", "RecipeConfig", "recipe_from_name", "__version__"]
