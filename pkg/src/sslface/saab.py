"""Saab transform primitives.

A Saab kernel bank is a constant unit-length DC kernel plus PCA eigenvectors
of the DC-removed patch residuals, with one shared non-negativity bias. The
bank is fitted from sliding-window patches and applied as a plain projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, FitError

# Eigenvalues below RANK_RTOL times the unit's total energy (DC second moment
# plus covariance trace) are numerical noise: their eigenvectors are arbitrary
# null-space directions (possibly overlapping the DC kernel) and must not
# become AC kernels.
RANK_RTOL = 1e-12


@dataclass
class SaabKernelBank:
    """Fitted kernels for one transform unit.

    kernels: (patch_dim, n_kept) with column 0 the DC kernel.
    eigenvalues: (n_kept - 1,) AC eigenvalues, descending.
    dc_energy_raw: second moment of training DC responses.
    bias: shared non-negativity offset, >= 0.
    """

    kernels: np.ndarray
    eigenvalues: np.ndarray
    dc_energy_raw: float
    bias: float

    @property
    def patch_dim(self) -> int:
        return self.kernels.shape[0]

    @property
    def n_kept(self) -> int:
        return self.kernels.shape[1]

    def raw_energies(self) -> np.ndarray:
        """Per-kernel raw energy: DC second moment then AC eigenvalues."""
        return np.concatenate([[self.dc_energy_raw], self.eigenvalues])


def extract_patches(channel: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """Valid-padding sliding-window patches of an (H, W) or (H, W, C) map.

    Returns (n_patches, window*window*C) with patches in row-major grid order
    and each patch flattened row-major spatial, channel fastest.
    """
    arr = np.asarray(channel, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if h < window or w < window:
        raise DataError(f"image {h}x{w} smaller than {window}x{window} window")
    if stride < 1:
        raise DataError("stride must be >= 1")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(arr, (window, window), axis=(0, 1))
    view = view[::stride, ::stride]  # (out_h, out_w, c, window, window)
    patches = view.transpose(0, 1, 3, 4, 2).reshape(out_h * out_w, window * window * c)
    return np.ascontiguousarray(patches)


def patch_grid_side(side: int, window: int, stride: int = 1) -> int:
    """Spatial side of the patch grid produced by valid extraction."""
    return (side - window) // stride + 1


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip eigenvector columns so the largest-magnitude entry is positive.

    argmax takes the lowest index on magnitude ties, which makes the
    convention deterministic.
    """
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def fit_saab(patches: np.ndarray, n_keep: int | None = None) -> SaabKernelBank:
    """Fit a Saab kernel bank from training patches.

    ``n_keep`` is the total kept kernel count including DC (None keeps
    everything the data supports). AC kernels are eigenvectors of the biased
    (1/n) sample covariance of DC-removed residuals, in descending eigenvalue
    order; kernels past the numerical rank of that covariance are dropped so
    the bank stays orthonormal even on degenerate data.
    """
    pts = np.asarray(patches, dtype=np.float64)
    if pts.ndim != 2:
        raise FitError("patches must be a 2-D matrix")
    n, d = pts.shape
    if n < 2:
        raise FitError(f"need at least 2 patches to fit, got {n}")
    if not np.all(np.isfinite(pts)):
        raise FitError("non-finite values in training patches")

    dc = np.full(d, 1.0 / np.sqrt(d))
    dc_resp = pts @ dc
    residuals = pts - np.outer(dc_resp, dc)
    centered = residuals - residuals.mean(axis=0)
    cov = (centered.T @ centered) / n

    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]

    dc_energy = float(np.mean(dc_resp**2))
    scale = dc_energy + float(eigvals.sum())
    rank = int(np.sum(eigvals > scale * RANK_RTOL)) if scale > 0 else 0
    max_ac = min(d - 1, rank)
    if n_keep is not None:
        if n_keep < 1:
            raise FitError("n_keep must be >= 1 (the DC kernel is always kept)")
        max_ac = min(max_ac, n_keep - 1)
    ac_kernels = _fix_signs(eigvecs[:, :max_ac])

    # fixed C layout so BLAS takes the same path a deserialized copy will
    kernels = np.ascontiguousarray(np.column_stack([dc, ac_kernels]) if max_ac else dc[:, None])
    bank = SaabKernelBank(
        kernels=kernels,
        eigenvalues=eigvals[:max_ac].copy(),
        dc_energy_raw=dc_energy,
        bias=0.0,
    )
    bank.bias = compute_bias(bank, pts)
    return bank


def compute_bias(bank: SaabKernelBank, patches: np.ndarray) -> float:
    """Smallest b >= 0 making every kept response on ``patches`` non-negative."""
    responses = np.asarray(patches, dtype=np.float64) @ bank.kernels
    return float(max(0.0, -responses.min(initial=0.0)))


def apply_saab(bank: SaabKernelBank, patches: np.ndarray, add_bias: bool = True) -> np.ndarray:
    """Project patches onto the bank: (n_patches, n_kept) responses.

    With ``add_bias`` the shared bias is added to every response; training
    responses are then >= 0, test responses may dip slightly below zero and
    are left as-is.
    """
    pts = np.asarray(patches, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != bank.patch_dim:
        raise DataError(f"patch dim {pts.shape} does not match bank dim {bank.patch_dim}")
    out = pts @ bank.kernels
    if add_bias:
        out = out + bank.bias
    return out


def select_kernels(bank: SaabKernelBank, keep_ac: np.ndarray, patches: np.ndarray) -> SaabKernelBank:
    """Rebuild a bank keeping DC plus the flagged AC columns.

    ``keep_ac`` is a boolean mask over the AC kernels. The bias is recomputed
    on ``patches`` over the retained columns only.
    """
    mask = np.asarray(keep_ac, dtype=bool)
    if mask.shape != (bank.n_kept - 1,):
        raise DataError("keep_ac mask must cover the AC kernels")
    kernels = np.ascontiguousarray(np.column_stack([bank.kernels[:, :1], bank.kernels[:, 1:][:, mask]]))
    reduced = SaabKernelBank(
        kernels=kernels,
        eigenvalues=bank.eigenvalues[mask].copy(),
        dc_energy_raw=bank.dc_energy_raw,
        bias=0.0,
    )
    reduced.bias = compute_bias(reduced, patches)
    return reduced


def max_pool_2x2(grid: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 max pooling over the two leading axes.

    Odd trailing rows/columns are truncated; the 32x32 pipeline never hits
    that case (28->14, 10->5).
    """
    arr = np.asarray(grid)
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise DataError("max_pool_2x2 needs at least a 2x2 grid")
    h2, w2 = arr.shape[0] // 2, arr.shape[1] // 2
    arr = arr[: h2 * 2, : w2 * 2]
    if arr.ndim == 2:
        blocks = arr.reshape(h2, 2, w2, 2)
        return blocks.max(axis=(1, 3))
    blocks = arr.reshape(h2, 2, w2, 2, *arr.shape[2:])
    return blocks.max(axis=(1, 3))
