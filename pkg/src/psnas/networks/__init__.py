"""Light-calibration and normal-estimation networks, binning and losses."""
from .binning import (AZIMUTH, ELEVATION, HEAD_SIZES, INTENSITY, BinningSpec, LightEstimate,
                      decode_bins, encode_lights)
from .losses import LAMBDA_AUX, auxiliary_train_loss, light_loss, normal_loss
from .models import (LIGHT_LAYOUT, NORMAL_LAYOUT, LightNet, LightNetConfig, NormalNet,
                     NormalNetConfig, normal_net_input, normalize_images, predict_lights)

__all__ = [
    "AZIMUTH", "ELEVATION", "HEAD_SIZES", "INTENSITY", "LAMBDA_AUX", "LIGHT_LAYOUT",
    "NORMAL_LAYOUT", "BinningSpec", "LightEstimate", "LightNet", "LightNetConfig", "NormalNet",
    "NormalNetConfig", "auxiliary_train_loss", "decode_bins", "encode_lights", "light_loss",
    "normal_loss", "normal_net_input", "normalize_images", "predict_lights",
]
