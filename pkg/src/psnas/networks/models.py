"""Light-calibration and normal-estimation networks.

Both networks take a stack of images of one object. Sets of equal size are
batched along the leading axis as ``[B*n, C, H, W]``; features are max-pooled
over each set of ``n``. With ``genotype=None`` the cells are searchable
supernets driven by an :class:`ArchParams`; otherwise the network is the
discrete child described by the genotype.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import BatchNorm2d, Conv2d, Linear, Module, ShapeError, Tensor
from ..autodiff import functional as F
from ..search_space import ArchParams, CellStack, Genotype
from .binning import HEAD_SIZES, LightEstimate, decode_bins

LIGHT_LAYOUT = (("feature", "NRNRN"), ("classifier", "NR"))
NORMAL_LAYOUT = (("feature", "NRNRN"), ("regressor", "NNN"))


class Stem(Module):
    """Two fixed 3x3 conv + BN + ReLU layers; the first may be strided."""

    def __init__(self, c_in: int, channels: int, stride: int, *, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(c_in, channels, 3, stride, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class Head(Module):
    def __init__(self, c_in: int, hidden: int, out: int, *, rng, dtype):
        super().__init__()
        self.fc1 = Linear(c_in, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, out, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


@dataclass
class LightNetConfig:
    channels: int = 8
    stem_stride: int = 2
    head_hidden: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NormalNetConfig:
    channels: int = 8
    stem_stride: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def _check_genotype(genotype: Genotype | None, channels: int, layout) -> None:
    if genotype is None:
        return
    if genotype.channels != channels:
        raise ValueError(f"genotype was searched with {genotype.channels} channels, "
                         f"config asks for {channels}")
    if genotype.layout and tuple(genotype.layout) != tuple(layout):
        raise ValueError(f"genotype layout {genotype.layout} does not match {layout}")


class _PSNet(Module):
    layout: tuple = ()

    def __init__(self, genotype: Genotype | None):
        super().__init__()
        self._genotype = genotype

    @property
    def searchable(self) -> bool:
        return self._genotype is None

    @property
    def genotype(self) -> Genotype | None:
        return self._genotype

    def _check_alpha(self, alpha: ArchParams | None) -> None:
        if self.searchable and alpha is None:
            raise ValueError("a supernet forward needs architecture parameters")

    def _check_input(self, x: np.ndarray, channels: int) -> None:
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(f"expected [N,{channels},H,W] input, got {x.shape}")
        H, W = x.shape[2:]
        if H % self.reduction_factor or W % self.reduction_factor:
            raise ShapeError(f"image size {H}x{W} is not divisible by the network's "
                             f"reduction factor {self.reduction_factor}")


class LightNet(_PSNet):
    """Per-image classifier of light azimuth, elevation and intensity bins.

    Input per image: the image and the object mask as two channels.
    """

    layout = LIGHT_LAYOUT

    def __init__(self, config: LightNetConfig | None = None, genotype: Genotype | None = None,
                 *, rng, dtype=np.float32):
        super().__init__(genotype)
        cfg = config or LightNetConfig()
        _check_genotype(genotype, cfg.channels, self.layout)
        self.config = cfg
        affine = genotype is not None
        C = cfg.channels
        self.stem = Stem(2, C, cfg.stem_stride, rng=rng, dtype=dtype)
        self.feature = CellStack("NRNRN", C, C, genotype, affine, rng=rng, dtype=dtype)
        fc = self.feature.out_channels
        self.classifier = CellStack("NR", 2 * fc, self.feature.final_channels, genotype, affine,
                                    rng=rng, dtype=dtype)
        heads_in = self.classifier.out_channels
        self.heads = [Head(heads_in, cfg.head_hidden, k, rng=rng, dtype=dtype) for k in HEAD_SIZES]

    @property
    def reduction_factor(self) -> int:
        return (self.config.stem_stride * self.feature.reduction_factor
                * self.classifier.reduction_factor)

    def forward(self, images: Tensor, mask, set_size: int, alpha: ArchParams | None = None):
        """``images`` [B*n,1,H,W], ``mask`` [B,H,W] or [H,W] -> three logit tensors [B*n,K]."""
        self._check_alpha(alpha)
        x = _with_mask(images, mask, set_size)
        self._check_input(x.data, 2)
        local = self.feature(self.stem(x), alpha)
        glob = F.repeat_sets(F.set_max(local, set_size), set_size)
        z = self.classifier(F.concat([local, glob], axis=1), alpha)
        pooled = F.global_avg_pool(z)
        return tuple(head(pooled) for head in self.heads)


class NormalNet(_PSNet):
    """Per-pixel unit normals from images paired with their light directions.

    Input per image: the normalized image replicated to three channels and
    the light direction broadcast over the image, six channels in total.
    """

    layout = NORMAL_LAYOUT

    def __init__(self, config: NormalNetConfig | None = None, genotype: Genotype | None = None,
                 *, rng, dtype=np.float32):
        super().__init__(genotype)
        cfg = config or NormalNetConfig()
        _check_genotype(genotype, cfg.channels, self.layout)
        self.config = cfg
        affine = genotype is not None
        C = cfg.channels
        self.stem = Stem(6, C, cfg.stem_stride, rng=rng, dtype=dtype)
        self.feature = CellStack("NRNRN", C, C, genotype, affine, rng=rng, dtype=dtype)
        fc = self.feature.out_channels
        self.regressor = CellStack("NNN", fc, self.feature.final_channels, genotype, affine,
                                   rng=rng, dtype=dtype)
        self.out = Conv2d(self.regressor.out_channels, 3, 1, rng=rng, dtype=dtype)
        self.aux = Conv2d(fc, 3, 1, rng=rng, dtype=dtype)

    @property
    def reduction_factor(self) -> int:
        return self.config.stem_stride * self.feature.reduction_factor

    def forward(self, inputs: Tensor, set_size: int, alpha: ArchParams | None = None,
                with_aux: bool = False):
        """``inputs`` [B*n,6,H,W] -> unit normals [B,3,H,W] (and the auxiliary map)."""
        self._check_alpha(alpha)
        if set_size < 1:
            raise ValueError("the normal network needs at least one image")
        self._check_input(inputs.data, 6)
        size = inputs.shape[2:]
        pooled = F.set_max(self.feature(self.stem(inputs), alpha), set_size)
        normals = _to_normals(self.out(self.regressor(pooled, alpha)), size)
        if not with_aux:
            return normals
        return normals, _to_normals(self.aux(pooled), size)


def _to_normals(x: Tensor, size) -> Tensor:
    return F.l2_normalize_channels(F.upsample_bilinear(x, size))


def _with_mask(images: Tensor, mask, set_size: int) -> Tensor:
    mask = np.asarray(mask, images.dtype)
    if mask.ndim == 2:
        mask = mask[None]
    B = images.shape[0] // set_size
    if mask.shape[0] != B:
        raise ShapeError(f"{mask.shape[0]} masks for {B} image sets")
    m = np.repeat(mask, set_size, axis=0)[:, None]
    return F.concat([images, Tensor(m)], axis=1)


# ----------------------------------------------------------------- inputs

def normalize_images(images: np.ndarray, mask: np.ndarray, intensities) -> np.ndarray:
    """Divide image j by e_j, then scale the whole stack so its masked mean is 0.5.

    One scale is shared by all images of an object so that relative
    brightness across lights survives.
    """
    images = np.asarray(images)
    e = np.asarray(intensities, np.float64)
    if (e <= 0).any():
        raise ValueError("intensities must be positive")
    out = images / e.reshape(-1, *([1] * (images.ndim - 1)))
    sel = out[..., np.asarray(mask, bool)]
    level = float(sel.mean()) if sel.size else 0.0
    if level > 0:
        out = out * (0.5 / level)
    return out.astype(images.dtype)


def normal_net_input(images: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """[n,1,H,W] normalized images and [n,3] directions -> [n,6,H,W]."""
    n, _, H, W = images.shape
    if directions.shape != (n, 3):
        raise ValueError(f"{n} images but light directions of shape {directions.shape}")
    dirs = np.broadcast_to(directions[:, :, None, None], (n, 3, H, W)).astype(images.dtype)
    return np.concatenate([np.repeat(images, 3, axis=1), dirs], axis=1)


def predict_lights(net: LightNet, images: np.ndarray, mask: np.ndarray,
                   alpha: ArchParams | None = None) -> LightEstimate:
    """Eval-mode light estimate for one object's image stack [n,1,H,W]."""
    logits = net(Tensor(images), mask, images.shape[0], alpha)
    classes = [np.argmax(z.data, axis=1) for z in logits]
    return decode_bins(*classes)
