"""FFT high-frequency structure extraction.

Spectra are handled DC-at-center (quadrant-swapped), so the Gaussian
high-emphasis mask can be indexed from the image center exactly as written:
M[i, j] = 1 - exp(-((i - W/2)^2 + (j - H/2)^2) / (2 sigma^2)) with i the
horizontal index. The center index is (floor(H/2), floor(W/2)) and the mask
is exactly 0 there, so the DC bin is annihilated.
"""

from __future__ import annotations

import numpy as np

# Imaginary residue above this after the inverse transform of a
# Hermitian-symmetric masked spectrum indicates a bug, not noise.
_IMAG_TOL = 1e-9


def fft2(img):
    """2D FFT of a real image plane, returned with DC at the center."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D plane, got shape {img.shape}")
    return np.fft.fftshift(np.fft.fft2(img))


def ifft2(spectrum):
    """Inverse of fft2 (expects the DC-at-center layout)."""
    return np.fft.ifft2(np.fft.ifftshift(spectrum))


def build_mask(H, W, sigma):
    """Gaussian high-emphasis mask on the centered spectrum.

    Zero at the center bin, approaching 1 toward the spectrum edges.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if H < 1 or W < 1:
        raise ValueError(f"invalid mask shape ({H}, {W})")
    i = np.arange(W, dtype=np.float64) - (W // 2)   # horizontal
    j = np.arange(H, dtype=np.float64) - (H // 2)   # vertical
    jj, ii = np.meshgrid(j, i, indexing="ij")
    return 1.0 - np.exp(-(ii ** 2 + jj ** 2) / (2.0 * sigma ** 2))


def extract_hf(img, sigma=20.0):
    """High-frequency reconstruction IFFT(FFT(I) * M_h), real part.

    Multi-channel images are filtered per channel independently.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return np.stack([extract_hf(img[..., c], sigma)
                         for c in range(img.shape[2])], axis=-1)
    H, W = img.shape
    mask = build_mask(H, W, sigma)
    out = ifft2(fft2(img) * mask)
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    scale = max(1.0, float(np.max(np.abs(img))))
    if residue > _IMAG_TOL * scale:
        raise FloatingPointError(
            f"imaginary residue {residue:g} exceeds tolerance"
        )
    return out.real


def normalize_display(img):
    """Affine stretch of a plane to [0, 255]; constant input maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo = float(np.min(img))
    hi = float(np.max(img))
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo) * 255.0
