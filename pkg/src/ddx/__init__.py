from ddx.imgcore import Rect

__version__ = "0.1.0"
__all__ = ["Rect", "__version__"]
