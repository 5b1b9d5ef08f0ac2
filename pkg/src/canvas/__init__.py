"""Toy-scale flow-matching image editing with an outpainting production pipeline."""

from canvas.errors import DegenerateInput, InvalidArgument, NumericDivergence, ParseError, SpikeAbort

__version__ = "0.1.0"

__all__ = ["DegenerateInput", "InvalidArgument", "NumericDivergence", "ParseError", "SpikeAbort", "__version__"]
