"""Fourier operators on the collocated periodic grid ``x_j = j / n``."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft


@dataclass(frozen=True)
class SpectralGrid:
    """Wavenumber tables for an ``n^3`` grid using the real-to-complex layout."""

    n: int

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @cached_property
    def axis(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(n, n, n, 3)``."""
        a = self.axis
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)

    @cached_property
    def _modes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        m = np.fft.fftfreq(n, 1.0 / n)
        mz = np.fft.rfftfreq(n, 1.0 / n)
        return m[:, None, None], m[None, :, None], mz[None, None, :]

    @cached_property
    def k(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Wavevector components ``2 pi m`` (broadcastable)."""
        return tuple(2.0 * np.pi * m for m in self._modes)  # type: ignore[return-value]

    @cached_property
    def k_deriv(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Wavevector with the Nyquist entry zeroed, for odd derivatives."""
        out = []
        for m in self._modes:
            kk = 2.0 * np.pi * m.copy()
            if self.n % 2 == 0:
                kk[np.abs(m) == self.n // 2] = 0.0
            out.append(kk)
        return tuple(out)  # type: ignore[return-value]

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky, kz = self.k
        return kx**2 + ky**2 + kz**2

    @cached_property
    def inv_k2(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = 1.0 / self.k2
        out[0, 0, 0] = 0.0
        return out

    @cached_property
    def dealias(self) -> np.ndarray:
        """Two-thirds rule mask."""
        cut = self.n / 3.0
        mx, my, mz = self._modes
        return (np.abs(mx) < cut) & (np.abs(my) < cut) & (np.abs(mz) < cut)

    @cached_property
    def rfft_weights(self) -> np.ndarray:
        """Multiplicity of each half-spectrum entry in Parseval sums."""
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        if self.n % 2 == 0:
            w[-1] = 1.0
        return w[None, None, :]

    def forward(self, f: np.ndarray) -> np.ndarray:
        return sfft.rfftn(f, axes=(-3, -2, -1))

    def inverse(self, fh: np.ndarray) -> np.ndarray:
        return sfft.irfftn(fh, s=self.shape, axes=(-3, -2, -1))

    def inner_hat(self, ah: np.ndarray, bh: np.ndarray) -> float:
        """Mean of ``a . b`` over the torus from Fourier coefficients."""
        prod = (ah * np.conj(bh)).real
        return float(np.sum(prod * self.rfft_weights)) / self.n**6

    def energy_hat(self, uh: np.ndarray) -> float:
        """Kinetic energy ``0.5 * mean |u|^2``."""
        return 0.5 * self.inner_hat(uh, uh)

    @cached_property
    def inv_kd2(self) -> np.ndarray:
        kx, ky, kz = self.k_deriv
        kd2 = kx**2 + ky**2 + kz**2
        with np.errstate(divide="ignore"):
            out = np.where(kd2 > 0, 1.0 / np.where(kd2 > 0, kd2, 1.0), 0.0)
        return out

    def project_hat(self, uh: np.ndarray) -> np.ndarray:
        """Leray projection of a vector field given by its coefficients.

        Uses the derivative wavevector so that spectral gradients are removed
        exactly, including modes carrying a Nyquist component.
        """
        kx, ky, kz = self.k_deriv
        div = kx * uh[0] + ky * uh[1] + kz * uh[2]
        scale = div * self.inv_kd2
        return np.stack([uh[0] - kx * scale, uh[1] - ky * scale, uh[2] - kz * scale])

    def divergence_hat(self, uh: np.ndarray) -> np.ndarray:
        kx, ky, kz = self.k_deriv
        return 1j * (kx * uh[0] + ky * uh[1] + kz * uh[2])

    def gradient_hat(self, fh: np.ndarray) -> np.ndarray:
        kx, ky, kz = self.k_deriv
        return np.stack([1j * kx * fh, 1j * ky * fh, 1j * kz * fh])

    def curl_hat(self, uh: np.ndarray) -> np.ndarray:
        kx, ky, kz = self.k_deriv
        return 1j * np.stack(
            [ky * uh[2] - kz * uh[1], kz * uh[0] - kx * uh[2], kx * uh[1] - ky * uh[0]]
        )

    def divergence(self, u: np.ndarray) -> np.ndarray:
        return self.inverse(self.divergence_hat(self.forward(u)))

    def gradient(self, f: np.ndarray) -> np.ndarray:
        return self.inverse(self.gradient_hat(self.forward(f)))

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        """``J[i, j] = d u_i / d x_j``, shape ``(3, 3, n, n, n)``."""
        uh = self.forward(u)
        return np.stack([self.inverse(self.gradient_hat(uh[i])) for i in range(3)])

    def gradient_norm_sq_hat(self, uh: np.ndarray) -> float:
        """``mean |grad u|^2``."""
        return sum(self.inner_hat(uh[i] * np.sqrt(self.k2), uh[i] * np.sqrt(self.k2)) for i in range(3))

    def l2(self, f: np.ndarray, weight: np.ndarray | None = None) -> float:
        """Root of the mean of ``|f|^2`` over the unit torus (optionally masked)."""
        sq = np.sum(np.asarray(f) ** 2, axis=0) if np.ndim(f) == 4 else np.asarray(f) ** 2
        if weight is not None:
            sq = sq * weight
        return float(np.sqrt(np.mean(sq)))


def leray_project_array(u: np.ndarray, grid: SpectralGrid | None = None) -> np.ndarray:
    """Leray projection of a physical-space vector field ``(3, n, n, n)``."""
    grid = grid or SpectralGrid(u.shape[-1])
    return grid.inverse(grid.project_hat(grid.forward(u)))


def relative_divergence(u: np.ndarray, grid: SpectralGrid | None = None) -> float:
    """``||div u|| / ||grad u||`` in the discrete L2 sense (0 for a zero field)."""
    grid = grid or SpectralGrid(u.shape[-1])
    uh = grid.forward(u)
    div = grid.divergence_hat(uh)
    num = np.sqrt(grid.inner_hat(div, div))
    den = np.sqrt(grid.gradient_norm_sq_hat(uh))
    return float(num / den) if den > 0 else 0.0
