"""Per-bin Hermitian covariance estimation, EVD, matrix roots, whitening.

The eigendecomposition is a cyclic Jacobi iteration for complex Hermitian
matrices, vectorized across frequency bins: every bin applies the same
pivot schedule, with per-bin rotation angles. M <= 16 in all use cases, so
Jacobi is accurate and cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stft import ComplexSpectrogram

DEFAULT_LOADING = 1e-6
HERMITIAN_TOL = 1e-12


class CovarianceError(ValueError):
    pass


@dataclass
class HermitianMatrixField:
    """One M x M Hermitian matrix per frequency bin, shape (F, M, M)."""

    matrices: np.ndarray

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.complex128)
        if self.matrices.ndim != 3 or self.matrices.shape[1] != self.matrices.shape[2]:
            raise CovarianceError("field must have shape (F, M, M)")

    @property
    def num_bins(self) -> int:
        return self.matrices.shape[0]

    @property
    def num_channels(self) -> int:
        return self.matrices.shape[1]

    def hermitian_defect(self) -> float:
        return float(
            np.max(np.abs(self.matrices - self.matrices.conj().transpose(0, 2, 1)))
        )

    def check_hermitian(self, tol: float | None = None) -> None:
        scale = max(1.0, float(np.max(np.abs(self.matrices))))
        limit = (tol if tol is not None else HERMITIAN_TOL) * scale
        defect = self.hermitian_defect()
        if defect > max(limit, 1e-9):
            raise CovarianceError(f"matrices not Hermitian (defect {defect:.3e})")


@dataclass
class EigenDecomposition:
    """Per-bin eigenpairs: eigenvalues (F, M) real descending,
    eigenvectors (F, M, M) with orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def principal_vectors(self) -> np.ndarray:
        """Principal eigenvector per bin, shape (F, M)."""
        return self.eigenvectors[:, :, 0]


def _hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.conj().transpose(0, 2, 1))


def _frame_outer_average(spec: ComplexSpectrogram, frames: slice) -> HermitianMatrixField:
    y = spec.data[:, :, frames]  # (M, F, Lsel)
    if y.shape[2] == 0:
        raise CovarianceError("empty frame range")
    phi = np.einsum("ikl,jkl->kij", y, y.conj()) / y.shape[2]
    return HermitianMatrixField(_hermitize(phi))


def estimate_noise_covariance(
    spec: ComplexSpectrogram, noise_frames: int
) -> HermitianMatrixField:
    """Average outer products over the leading noise-only frames [0, L_n)."""
    if not (1 <= noise_frames <= spec.num_frames):
        raise CovarianceError(
            f"noise_frames {noise_frames} out of range [1, {spec.num_frames}]"
        )
    return _frame_outer_average(spec, slice(0, noise_frames))


def estimate_mixture_covariance(
    spec: ComplexSpectrogram, noise_frames: int
) -> HermitianMatrixField:
    """Average outer products over the speech-plus-noise frames [L_n, L)."""
    if not (0 <= noise_frames < spec.num_frames):
        raise CovarianceError(
            f"noise_frames {noise_frames} leaves no mixture frames "
            f"(L = {spec.num_frames})"
        )
    return _frame_outer_average(spec, slice(noise_frames, spec.num_frames))


def hermitian_evd(
    field: HermitianMatrixField,
    tol: float = 1e-12,
    max_sweeps: int = 100,
) -> EigenDecomposition:
    """Cyclic Jacobi EVD of every matrix in the field.

    Eigenvalues sorted descending; eigenvector columns orthonormal.
    """
    field.check_hermitian()
    a = _hermitize(field.matrices).copy()
    nbins, m, _ = a.shape
    v = np.broadcast_to(np.eye(m, dtype=np.complex128), a.shape).copy()

    norms = np.maximum(np.linalg.norm(a, axis=(1, 2)), 1e-300)
    # summed directly over off-diagonal entries: the total-minus-diagonal
    # shortcut cancels catastrophically near convergence
    off_mask = ~np.eye(m, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.abs(a[:, off_mask]) ** 2, axis=1))
        if np.all(off <= tol * norms):
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[:, p, q]
                r = np.abs(apq)
                active = r > 1e-300
                # unit phase of the pivot; identity rotation where inactive
                u = np.where(active, apq / np.where(active, r, 1.0), 1.0)
                app = a[:, p, p].real
                aqq = a[:, q, q].real
                tau = np.where(active, (aqq - app) / np.maximum(2.0 * r, 1e-300), 0.0)
                big = np.abs(tau) > 1e150  # 1/(2 tau) asymptote avoids tau^2 overflow
                tau_safe = np.where(big, 1.0, tau)
                t = np.sign(tau_safe) / (
                    np.abs(tau_safe) + np.sqrt(1.0 + tau_safe * tau_safe)
                )
                t = np.where(big, 0.5 / np.where(big, tau, 1.0), t)
                t = np.where(tau == 0.0, np.where(active, 1.0, 0.0), t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = np.where(active, t * c, 0.0)
                c = np.where(active, c, 1.0)

                # A <- J^H A J with J[p,p]=c, J[p,q]=s*u, J[q,p]=-s*conj(u)
                cp = c[:, None]
                sp = s[:, None]
                up = u[:, None]
                row_p = a[:, p, :].copy()
                row_q = a[:, q, :].copy()
                a[:, p, :] = cp * row_p - sp * up * row_q
                a[:, q, :] = sp * np.conj(up) * row_p + cp * row_q
                col_p = a[:, :, p].copy()
                col_q = a[:, :, q].copy()
                a[:, :, p] = cp * col_p - sp * np.conj(up) * col_q
                a[:, :, q] = sp * up * col_p + cp * col_q
                vcol_p = v[:, :, p].copy()
                vcol_q = v[:, :, q].copy()
                v[:, :, p] = cp * vcol_p - sp * np.conj(up) * vcol_q
                v[:, :, q] = sp * up * vcol_p + cp * vcol_q

    eigvals = np.diagonal(a, axis1=1, axis2=2).real.copy()
    order = np.argsort(-eigvals, axis=1, kind="stable")
    eigvals = np.take_along_axis(eigvals, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return EigenDecomposition(eigvals, v)


def _loaded_eigenvalues(evd: EigenDecomposition, loading: float) -> np.ndarray:
    if loading < 0:
        raise CovarianceError("loading must be >= 0")
    mean_mag = np.mean(np.abs(evd.eigenvalues), axis=1, keepdims=True)
    return evd.eigenvalues + loading * mean_mag


def _rebuild(evd: EigenDecomposition, diag: np.ndarray) -> HermitianMatrixField:
    v = evd.eigenvectors
    out = np.einsum("kij,kj,klj->kil", v, diag, v.conj())
    return HermitianMatrixField(_hermitize(out))


def inverse_sqrt(
    field: HermitianMatrixField, loading: float = DEFAULT_LOADING
) -> HermitianMatrixField:
    """(Phi + loading*(trace/M)*I)^(-1/2) via EVD; Hermitian PSD output."""
    evd = hermitian_evd(field)
    lam = _loaded_eigenvalues(evd, loading)
    if np.any(lam <= 0):
        raise CovarianceError(
            "non-positive eigenvalue after loading; raise loading or use more "
            "noise frames"
        )
    return _rebuild(evd, 1.0 / np.sqrt(lam))


def sqrt_hermitian(
    field: HermitianMatrixField, loading: float = 0.0
) -> HermitianMatrixField:
    """Hermitian square root V diag(sqrt(lambda)) V^H (so Phi^{H/2} = Phi^{1/2})."""
    evd = hermitian_evd(field)
    lam = _loaded_eigenvalues(evd, loading)
    if np.any(lam < 0):
        raise CovarianceError("negative eigenvalue; matrix not PSD after loading")
    return _rebuild(evd, np.sqrt(lam))


def sqrt_pair(
    field: HermitianMatrixField, loading: float = DEFAULT_LOADING
) -> tuple[HermitianMatrixField, HermitianMatrixField]:
    """(Phi^{1/2}, Phi^{-1/2}) with shared EVD and identical loading."""
    evd = hermitian_evd(field)
    lam = _loaded_eigenvalues(evd, loading)
    if np.any(lam <= 0):
        raise CovarianceError(
            "non-positive eigenvalue after loading; raise loading or use more "
            "noise frames"
        )
    return _rebuild(evd, np.sqrt(lam)), _rebuild(evd, 1.0 / np.sqrt(lam))


def whiten(spec: ComplexSpectrogram, w: HermitianMatrixField) -> ComplexSpectrogram:
    """Apply the per-bin whitening matrix: y_w(l,k) = W(k) y(l,k)."""
    if w.num_bins != spec.num_bins or w.num_channels != spec.num_channels:
        raise CovarianceError(
            f"whitener shape {w.matrices.shape} does not match spectrogram "
            f"({spec.num_channels} ch, {spec.num_bins} bins)"
        )
    out = np.einsum("kij,jkl->ikl", w.matrices, spec.data)
    return ComplexSpectrogram(out, spec.config)


def whitened_mixture_covariance(
    phi_yy: HermitianMatrixField, phi_nn_invsqrt: HermitianMatrixField
) -> HermitianMatrixField:
    """Phi_ww = Phi_nn^{-1/2} Phi_yy Phi_nn^{-H/2}."""
    w = phi_nn_invsqrt.matrices
    out = np.einsum("kij,kjl,kml->kim", w, phi_yy.matrices, w.conj())
    return HermitianMatrixField(_hermitize(out))
