"""Feature extractors: planned-path encoder, camera encoder, LiDAR VAE.

Each extractor emits a 64-dimensional feature vector per frame. The LiDAR
feature is the concatenation of the VAE posterior means and log-variances
(32 + 32); its reconstruction term only matters for the training loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .layers import add_conv, add_linear, conv, linear

__all__ = ["PathEncoder", "CameraEncoder", "ScanVae", "SvaeOutput", "svae_loss"]

FEATURE_DIM = 64
LATENT_DIM = 32


def _conv_out(n: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (n + 2 * padding - kernel) // stride + 1


class PathEncoder:
    """Lower-half ROI crop, three strided convolutions, linear head to 64."""

    CHANNELS = (8, 16, 32)

    def __init__(self, store: ParamStore, height: int, width: int, rng: np.random.Generator,
                 prefix: str = "encoders.path"):
        self.prefix = prefix
        self.height = height
        self.width = width
        self.roi_start = height // 2
        h, w = height - self.roi_start, width
        cin = 1
        for i, cout in enumerate(self.CHANNELS, start=1):
            add_conv(store, f"{prefix}.conv{i}", cin, cout, 3, rng)
            h, w, cin = _conv_out(h), _conv_out(w), cout
        self.flat_dim = cin * h * w
        add_linear(store, f"{prefix}.fc", self.flat_dim, FEATURE_DIM, rng)
        self.store = store

    def __call__(self, images: Tensor) -> Tensor:
        if images.data.ndim != 4 or images.data.shape[1] != 1 or images.data.shape[2:] != (self.height, self.width):
            raise ValueError(
                f"path encoder expects (B, 1, {self.height}, {self.width}), got {images.data.shape}"
            )
        x = ad.slice_axis(images, 2, self.roi_start, self.height)
        for i in range(1, len(self.CHANNELS) + 1):
            x = ad.relu(conv(self.store, f"{self.prefix}.conv{i}", x))
        x = ad.reshape(x, (x.data.shape[0], self.flat_dim))
        return linear(self.store, f"{self.prefix}.fc", x)


class CameraEncoder:
    """Four strided convolutions over the RGB frame, linear head to 64."""

    CHANNELS = (8, 16, 32, 32)

    def __init__(self, store: ParamStore, height: int, width: int, rng: np.random.Generator,
                 prefix: str = "encoders.camera"):
        self.prefix = prefix
        self.height = height
        self.width = width
        h, w, cin = height, width, 3
        for i, cout in enumerate(self.CHANNELS, start=1):
            add_conv(store, f"{prefix}.conv{i}", cin, cout, 3, rng)
            h, w, cin = _conv_out(h), _conv_out(w), cout
        self.flat_dim = cin * h * w
        add_linear(store, f"{prefix}.fc", self.flat_dim, FEATURE_DIM, rng)
        self.store = store

    def __call__(self, images: Tensor) -> Tensor:
        if images.data.ndim != 4 or images.data.shape[1] != 3 or images.data.shape[2:] != (self.height, self.width):
            raise ValueError(
                f"camera encoder expects (B, 3, {self.height}, {self.width}), got {images.data.shape}"
            )
        x = images
        for i in range(1, len(self.CHANNELS) + 1):
            x = ad.relu(conv(self.store, f"{self.prefix}.conv{i}", x))
        x = ad.reshape(x, (x.data.shape[0], self.flat_dim))
        return linear(self.store, f"{self.prefix}.fc", x)


@dataclass
class SvaeOutput:
    mu: Tensor  # (B, 32)
    logvar: Tensor  # (B, 32)
    z: Tensor  # (B, 32)
    reconstruction: Tensor  # (B, scan_len), sigmoid range
    feature: Tensor  # (B, 64) = concat(mu, logvar)


class ScanVae:
    """Variational autoencoder over normalized scans; feature = (mu, logvar)."""

    HIDDEN = (256, 128)

    def __init__(self, store: ParamStore, scan_len: int, rng: np.random.Generator,
                 prefix: str = "encoders.svae"):
        self.prefix = prefix
        self.scan_len = scan_len
        add_linear(store, f"{prefix}.enc1", scan_len, self.HIDDEN[0], rng)
        add_linear(store, f"{prefix}.enc2", self.HIDDEN[0], self.HIDDEN[1], rng)
        add_linear(store, f"{prefix}.mu", self.HIDDEN[1], LATENT_DIM, rng)
        add_linear(store, f"{prefix}.logvar", self.HIDDEN[1], LATENT_DIM, rng)
        add_linear(store, f"{prefix}.dec1", LATENT_DIM, self.HIDDEN[1], rng)
        add_linear(store, f"{prefix}.dec2", self.HIDDEN[1], self.HIDDEN[0], rng)
        add_linear(store, f"{prefix}.dec3", self.HIDDEN[0], scan_len, rng)
        self.store = store

    def encode(self, scans: Tensor, rng: np.random.Generator | None, train: bool) -> SvaeOutput:
        """Scans must already be normalized to [0, 1] by the sensor max range."""
        if scans.data.ndim != 2 or scans.data.shape[1] != self.scan_len:
            raise ValueError(f"expected (B, {self.scan_len}) scans, got {scans.data.shape}")
        p = self.prefix
        h = ad.relu(linear(self.store, f"{p}.enc1", scans))
        h = ad.relu(linear(self.store, f"{p}.enc2", h))
        mu = linear(self.store, f"{p}.mu", h)
        logvar = linear(self.store, f"{p}.logvar", h)
        if train:
            if rng is None:
                raise ValueError("training-mode encoding requires an rng stream")
            eps = Tensor(rng.standard_normal(mu.data.shape))
            z = ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
        else:
            z = mu
        d = ad.relu(linear(self.store, f"{p}.dec1", z))
        d = ad.relu(linear(self.store, f"{p}.dec2", d))
        recon = ad.sigmoid(linear(self.store, f"{p}.dec3", d))
        feature = ad.concat([mu, logvar], axis=1)
        return SvaeOutput(mu=mu, logvar=logvar, z=z, reconstruction=recon, feature=feature)


def svae_loss(output: SvaeOutput, scans: Tensor) -> Tensor:
    """KL to the standard normal plus half squared reconstruction error.

    Both terms are summed per frame; batched inputs return the mean over
    frames.
    """
    if output.reconstruction.data.shape != scans.data.shape:
        raise ValueError(
            f"reconstruction shape {output.reconstruction.data.shape} != scan shape {scans.data.shape}"
        )
    batch = scans.data.shape[0] if scans.data.ndim == 2 else 1
    kl = ad.kl_to_standard_normal(output.mu, output.logvar)
    err = ad.sub(output.reconstruction, scans)
    sq = ad.mul(ad.tensor_sum(ad.mul(err, err)), 0.5)
    return ad.mul(ad.add(kl, sq), 1.0 / batch)
