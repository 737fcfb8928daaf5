"""Maps between raw network output, physical densities and network inputs."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .fem import Discretization

AMPLIFICATION = 10.0
ENERGY_FLOOR = 1e-300


class DegenerateFieldError(ValueError):
    """Strain-energy field has no dynamic range after the log transform."""


class BisectionError(RuntimeError):
    pass


def default_filter_radius(disc: Discretization) -> float:
    return disc.nelx / 32.0


class DensityFilter:
    """Cone-weighted density filter as a row-normalized sparse operator.

    Weights are ``max(0, radius - d_ij)`` with ``d_ij`` the centroid distance
    in element units. Immutable after construction.
    """

    def __init__(self, disc: Discretization, radius: float):
        if radius <= 0:
            raise ValueError("filter radius must be positive")
        self.disc = disc
        self.radius = float(radius)
        reach = int(np.ceil(radius)) - 1
        ex, ey = np.divmod(np.arange(disc.n_elem), disc.nely)
        rows, cols, vals = [], [], []
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                w = radius - np.hypot(dx, dy)
                if w <= 0:
                    continue
                nx, ny = ex + dx, ey + dy
                ok = (nx >= 0) & (nx < disc.nelx) & (ny >= 0) & (ny < disc.nely)
                rows.append(np.flatnonzero(ok))
                cols.append(nx[ok] * disc.nely + ny[ok])
                vals.append(np.full(ok.sum(), w))
        H = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(disc.n_elem, disc.n_elem),
        )
        row_sum = np.asarray(H.sum(axis=1)).ravel()
        self.matrix = sp.diags(1.0 / row_sum) @ H
        self.matrix_t = self.matrix.T.tocsr()

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        return self.matrix @ rho

    def transpose(self, g: np.ndarray) -> np.ndarray:
        return self.matrix_t @ g


@lru_cache(maxsize=32)
def density_filter_operator(disc: Discretization, radius: float | None = None) -> DensityFilter:
    return DensityFilter(disc, default_filter_radius(disc) if radius is None else radius)


def density_filter(rho: np.ndarray, disc: Discretization, radius: float | None = None) -> np.ndarray:
    return density_filter_operator(disc, radius)(rho)


def _volume(rho_bar: np.ndarray, b: float, a: float) -> float:
    return float(np.mean(expit(a * rho_bar - b)))


def sigmoid_volume_project(
    rho_bar: np.ndarray,
    vstar: float,
    amplification: float = AMPLIFICATION,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> tuple[np.ndarray, float]:
    """Return ``sigmoid(a * rho_bar - b)`` with ``b`` bisected so the mean is ``vstar``.

    ``tol`` bounds the volume error; bisection also stops once the bracket on
    ``b`` collapses to floating-point resolution.
    """
    if not 0 < vstar < 1:
        raise ValueError(f"target volume fraction {vstar} outside (0, 1)")
    rho_bar = np.asarray(rho_bar, dtype=float)
    a = amplification
    z = a * rho_bar
    lo, hi = float(z.min()) - 40.0, float(z.max()) + 40.0
    # volume is decreasing in b: need vol(lo) >= vstar >= vol(hi)
    width = hi - lo
    for _ in range(60):
        if _volume(rho_bar, lo, a) >= vstar and _volume(rho_bar, hi, a) <= vstar:
            break
        lo, hi = lo - width, hi + width
        width *= 2
    else:
        raise BisectionError("could not bracket the sigmoid shift")

    b = 0.5 * (lo + hi)
    for _ in range(max_iter):
        b = 0.5 * (lo + hi)
        vol = _volume(rho_bar, b, a)
        if abs(vol - vstar) <= tol or not lo < b < hi:
            break
        if vol > vstar:
            lo = b
        else:
            hi = b
    return expit(z - b), b


def project_backward(
    rho_bar: np.ndarray,
    rho_tilde: np.ndarray,
    b: float,
    cotangent: np.ndarray,
    amplification: float = AMPLIFICATION,
) -> np.ndarray:
    """Vector-Jacobian product of the projection, with the shift differentiated implicitly."""
    a = amplification
    s = rho_tilde * (1.0 - rho_tilde)
    total = s.sum()
    if total == 0.0:
        return np.zeros_like(rho_bar)
    return a * s * (cotangent - np.dot(cotangent, s) / total)


def preprocess_strain_energy(e_raw: np.ndarray) -> np.ndarray:
    """Log-transform and rescale element energies onto [-1, 1]."""
    log_e = np.log(np.maximum(np.asarray(e_raw, dtype=float), ENERGY_FLOOR))
    lo, hi = log_e.min(), log_e.max()
    if hi - lo < 1e-12:
        raise DegenerateFieldError("strain energy field is constant in log space")
    return 2.0 * (log_e - lo) / (hi - lo) - 1.0


def solid_count(vstar: float, n: int) -> int:
    # half-up rounding, not Python's banker's rounding
    return int(np.floor(vstar * n + 0.5))


def threshold_volume_preserving(rho: np.ndarray, vstar: float) -> np.ndarray:
    """Set the ``round(vstar * N)`` densest elements to 1, ties to lower index."""
    rho = np.asarray(rho, dtype=float)
    k = solid_count(vstar, rho.size)
    order = np.argsort(-rho, kind="stable")
    out = np.zeros_like(rho)
    out[order[:k]] = 1.0
    return out
