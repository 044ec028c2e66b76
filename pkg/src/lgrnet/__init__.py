"""Local Grid Rendering networks for point-cloud feature extraction and
3D object detection."""

from lgrnet.errors import InvalidArgument, InvalidState, ParseError
from lgrnet.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "InvalidArgument", "InvalidState", "ParseError", "__version__"]
