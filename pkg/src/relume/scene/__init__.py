from .camera import Camera
from .color import srgb_decode, srgb_encode

__all__ = ["Camera", "srgb_decode", "srgb_encode"]
