from .degrade import CropPolicy, DegradationConfig, crop_training, degrade
from .io import ImageFormatError, check_image, load_image, quantize, save_image
from .metrics import psnr, ssim
from .resample import gaussian_blur, resize, resize_bicubic

__all__ = [
    "CropPolicy",
    "DegradationConfig",
    "ImageFormatError",
    "check_image",
    "crop_training",
    "degrade",
    "gaussian_blur",
    "load_image",
    "psnr",
    "quantize",
    "resize",
    "resize_bicubic",
    "save_image",
    "ssim",
]
