"""The cracking pipeline's image preprocessing and its smooth surrogates.

The real pipeline that a cracker consumes is luminance conversion ->
Gaussian filtering -> hard thresholding. The hard threshold has zero
gradient almost everywhere, so adversarial generation pairs the real
forward pass with the gradient of a sigmoid relaxation of the threshold
(hard forward / soft backward).

Numpy functions here are the reference implementations used by training
and evaluation; the torch variants mirror them for batched optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import torch

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PreprocessConfig:
    """Parameters of the filtering + binarization stage.

    ``threshold`` is the hard binarization cut (strictly-above maps to 1),
    ``softness`` the lateral width of its sigmoid relaxation.
    """

    kernel_size: int = 3
    sigma: float = 0.8
    threshold: float = 0.8
    softness: float = 0.05
    grayscale_first: bool = True

    def __post_init__(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd integer >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly inside (0, 1)")
        if self.softness <= 0:
            raise ValueError("softness must be positive")


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Discretized 2D Gaussian, normalized so the taps sum to 1."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be an odd integer >= 1")
    half = kernel_size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    ii, jj = np.meshgrid(coords, coords, indexing="ij")
    kernel = np.exp(-(ii**2 + jj**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """RGB -> luminance; grayscale input passes through unchanged."""
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 3:
        w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
        return (image.astype(np.float64) @ w).astype(image.dtype)
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {image.shape}")


def gaussian_filter(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """2D convolution with the normalized Gaussian kernel, replicate padding."""
    kernel = gaussian_kernel(config.kernel_size, config.sigma)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        out = scipy.ndimage.convolve(img, kernel, mode="nearest")
    elif img.ndim == 3:
        out = np.stack(
            [scipy.ndimage.convolve(img[..., c], kernel, mode="nearest") for c in range(img.shape[-1])],
            axis=-1,
        )
    else:
        raise ValueError(f"expected 2D or 3D image, got shape {image.shape}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def binarize(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Hard threshold: strictly above ``threshold`` -> 1, else 0."""
    return (np.asarray(image) > config.threshold).astype(np.float32)


def binarize_soft(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Sigmoid relaxation of the hard threshold; strictly increasing."""
    x = np.asarray(image, dtype=np.float64)
    out = 1.0 / (1.0 + np.exp(-(x - config.threshold) / config.softness))
    return out.astype(np.float64)


def pipeline_forward(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """The real preprocessing a cracker sees: grayscale -> filter -> hard threshold."""
    img = np.asarray(image)
    if config.grayscale_first and img.ndim == 3:
        img = to_grayscale(img)
    return binarize(gaussian_filter(img, config), config)


def pipeline_soft(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Fully differentiable surrogate of :func:`pipeline_forward`."""
    img = np.asarray(image)
    if config.grayscale_first and img.ndim == 3:
        img = to_grayscale(img)
    return binarize_soft(gaussian_filter(img, config), config)


def pipeline_surrogate_gradient(
    image: np.ndarray, config: PreprocessConfig, upstream_gradient: np.ndarray
) -> np.ndarray:
    """Vector-Jacobian product of the soft pipeline at ``image``.

    Returns the gradient with respect to the raw input, regardless of the
    hard forward used elsewhere. ``upstream_gradient`` must match the
    pipeline output shape.
    """
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))
    x.requires_grad_(True)
    y = _torch_pipeline_soft_single(x, config)
    up = torch.from_numpy(np.ascontiguousarray(upstream_gradient, dtype=np.float64))
    if up.shape != y.shape:
        raise ValueError(f"upstream gradient shape {tuple(up.shape)} != pipeline output shape {tuple(y.shape)}")
    (grad,) = torch.autograd.grad(y, x, grad_outputs=up)
    return grad.numpy()


# --- torch mirror, used by batched training/attack code ---


def torch_gaussian_kernel(config: PreprocessConfig, dtype=torch.float32, device=None) -> torch.Tensor:
    k = gaussian_kernel(config.kernel_size, config.sigma)
    return torch.as_tensor(k, dtype=dtype, device=device)


def torch_grayscale(x: torch.Tensor) -> torch.Tensor:
    """(N, 3, H, W) -> (N, 1, H, W); single-channel input passes through."""
    if x.shape[1] == 1:
        return x
    w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def torch_gaussian_filter(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Depthwise Gaussian convolution with replicate padding on (N, C, H, W)."""
    ksize = kernel.shape[0]
    pad = ksize // 2
    channels = x.shape[1]
    weight = kernel.flip((0, 1)).view(1, 1, ksize, ksize).expand(channels, 1, ksize, ksize)
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="replicate")
    out = torch.nn.functional.conv2d(padded, weight, groups=channels)
    return out.clamp(0.0, 1.0)


def _torch_pipeline_common(x: torch.Tensor, config: PreprocessConfig) -> torch.Tensor:
    if config.grayscale_first and x.shape[1] == 3:
        x = torch_grayscale(x)
    kernel = torch_gaussian_kernel(config, dtype=x.dtype, device=x.device)
    return torch_gaussian_filter(x, kernel)


def torch_pipeline_hard(x: torch.Tensor, config: PreprocessConfig) -> torch.Tensor:
    return (_torch_pipeline_common(x, config) > config.threshold).to(x.dtype)


def torch_pipeline_soft(x: torch.Tensor, config: PreprocessConfig) -> torch.Tensor:
    filtered = _torch_pipeline_common(x, config)
    return torch.sigmoid((filtered - config.threshold) / config.softness)


def _torch_pipeline_soft_single(x: torch.Tensor, config: PreprocessConfig) -> torch.Tensor:
    """Soft pipeline on a single unbatched (H, W) or (H, W, 3) tensor."""
    if x.dim() == 3:
        if config.grayscale_first:
            w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device)
            batched = (x * w).sum(-1).unsqueeze(0).unsqueeze(0)
        else:
            batched = x.permute(2, 0, 1).unsqueeze(0)
    else:
        batched = x.unsqueeze(0).unsqueeze(0)
    kernel = torch_gaussian_kernel(config, dtype=x.dtype, device=x.device)
    filtered = torch_gaussian_filter(batched, kernel)
    soft = torch.sigmoid((filtered - config.threshold) / config.softness)
    if x.dim() == 3 and not config.grayscale_first:
        return soft.squeeze(0).permute(1, 2, 0)
    return soft.squeeze(0).squeeze(0)


class _HardForwardSoftBackward(torch.autograd.Function):
    """Real pipeline on the forward pass, soft-pipeline gradient on the backward."""

    @staticmethod
    def forward(ctx, x, kernel_size, sigma, threshold, softness, grayscale_first):
        ctx.save_for_backward(x)
        ctx.config = PreprocessConfig(
            kernel_size=kernel_size,
            sigma=sigma,
            threshold=threshold,
            softness=softness,
            grayscale_first=grayscale_first,
        )
        with torch.no_grad():
            return torch_pipeline_hard(x, ctx.config)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        with torch.enable_grad():
            xx = x.detach().clone().requires_grad_(True)
            y = torch_pipeline_soft(xx, ctx.config)
            (grad,) = torch.autograd.grad(y, xx, grad_outputs=grad_output)
        return grad, None, None, None, None, None


def bpda_pipeline(x: torch.Tensor, config: PreprocessConfig) -> torch.Tensor:
    """Batched (N, C, H, W) pipeline with hard forward and soft backward."""
    return _HardForwardSoftBackward.apply(
        x, config.kernel_size, config.sigma, config.threshold, config.softness, config.grayscale_first
    )
