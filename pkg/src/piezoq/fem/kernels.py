"""Element kernels for bilinear quadrilaterals with 2x2 Gauss quadrature.

Plane of analysis is (x, z) with d/dy = 0; every node carries (u_x, u_y, u_z)
and, in the piezoelectric region, a potential. Voigt strain order is
(S1, S2, S3, S4, S5, S6) = (du_x/dx, 0, du_z/dz, du_y/dz, du_x/dz + du_z/dx,
du_y/dx).

Two interchangeable implementations exist: numba loops and vectorised numpy.
``element_matrices`` / ``element_energies`` dispatch on ``piezoq._accel``.
"""

import numpy as np

from .._accel import HAVE_NUMBA, njit

_G = 1.0 / np.sqrt(3.0)
GAUSS_XI = np.array([-_G, _G, _G, -_G])
GAUSS_ETA = np.array([-_G, -_G, _G, _G])
NODE_XI = np.array([-1.0, 1.0, 1.0, -1.0])
NODE_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


def _reference_shapes():
    """N, dN/dxi, dN/deta at the four Gauss points, each shaped (4 gp, 4 nodes)."""
    n = 0.25 * (1 + np.outer(GAUSS_XI, NODE_XI)) * (1 + np.outer(GAUSS_ETA, NODE_ETA))
    dxi = 0.25 * NODE_XI[None, :] * (1 + np.outer(GAUSS_ETA, NODE_ETA))
    deta = 0.25 * NODE_ETA[None, :] * (1 + np.outer(GAUSS_XI, NODE_XI))
    return n, dxi, deta


SHAPE_N, SHAPE_DXI, SHAPE_DETA = _reference_shapes()


# ------------------------------------------------------------------ numba

@njit(cache=True, nogil=True)
def _gradients_nb(xy, gp, dxi, deta, dndx, dndz):
    j11 = 0.0
    j12 = 0.0
    j21 = 0.0
    j22 = 0.0
    for a in range(4):
        j11 += dxi[gp, a] * xy[a, 0]
        j12 += dxi[gp, a] * xy[a, 1]
        j21 += deta[gp, a] * xy[a, 0]
        j22 += deta[gp, a] * xy[a, 1]
    det = j11 * j22 - j12 * j21
    for a in range(4):
        dndx[a] = (j22 * dxi[gp, a] - j12 * deta[gp, a]) / det
        dndz[a] = (-j21 * dxi[gp, a] + j11 * deta[gp, a]) / det
    return det


@njit(cache=True, nogil=True)
def _fill_b_nb(dndx, dndz, bu, bp):
    for i in range(6):
        for k in range(12):
            bu[i, k] = 0.0
    for a in range(4):
        bu[0, 3 * a] = dndx[a]
        bu[2, 3 * a + 2] = dndz[a]
        bu[3, 3 * a + 1] = dndz[a]
        bu[4, 3 * a] = dndz[a]
        bu[4, 3 * a + 2] = dndx[a]
        bu[5, 3 * a + 1] = dndx[a]
        bp[0, a] = dndx[a]
        bp[1, a] = 0.0
        bp[2, a] = dndz[a]


@njit(cache=True, nogil=True)
def _element_matrices_nb(xy, region, stiff, piezo, perm, rho, shp, dxi, deta):
    ne = xy.shape[0]
    kuu = np.zeros((ne, 12, 12))
    kup = np.zeros((ne, 12, 4))
    kpp = np.zeros((ne, 4, 4))
    mass = np.zeros((ne, 12, 12))
    dndx = np.empty(4)
    dndz = np.empty(4)
    bu = np.empty((6, 12))
    bp = np.empty((3, 4))
    cb = np.empty((6, 12))
    eb = np.empty((3, 12))
    pb = np.empty((3, 4))
    for el in range(ne):
        r = region[el]
        c = stiff[r]
        e = piezo[r]
        eps = perm[r]
        for gp in range(4):
            det = _gradients_nb(xy[el], gp, dxi, deta, dndx, dndz)
            if det <= 0.0:
                raise ValueError("non-positive element Jacobian")
            _fill_b_nb(dndx, dndz, bu, bp)
            for i in range(6):
                for k in range(12):
                    s = 0.0
                    for j in range(6):
                        s += c[i, j] * bu[j, k]
                    cb[i, k] = s
            for i in range(3):
                for k in range(12):
                    s = 0.0
                    for j in range(6):
                        s += e[i, j] * bu[j, k]
                    eb[i, k] = s
                for k in range(4):
                    s = 0.0
                    for j in range(3):
                        s += eps[i, j] * bp[j, k]
                    pb[i, k] = s
            for p in range(12):
                for q in range(12):
                    s = 0.0
                    for i in range(6):
                        s += bu[i, p] * cb[i, q]
                    kuu[el, p, q] += det * s
                for q in range(4):
                    s = 0.0
                    for i in range(3):
                        s += eb[i, p] * bp[i, q]
                    kup[el, p, q] += det * s
            for p in range(4):
                for q in range(4):
                    s = 0.0
                    for i in range(3):
                        s += bp[i, p] * pb[i, q]
                    kpp[el, p, q] -= det * s
            for a in range(4):
                for b in range(4):
                    m = det * rho[r] * shp[gp, a] * shp[gp, b]
                    for comp in range(3):
                        mass[el, 3 * a + comp, 3 * b + comp] += m
    return kuu, kup, kpp, mass


@njit(cache=True, nogil=True)
def _element_energies_nb(xy, region, stiff, ue, dxi, deta):
    ne = xy.shape[0]
    out = np.zeros(ne)
    dndx = np.empty(4)
    dndz = np.empty(4)
    bu = np.empty((6, 12))
    bp = np.empty((3, 4))
    strain = np.empty(6)
    for el in range(ne):
        c = stiff[region[el]]
        w = 0.0
        for gp in range(4):
            det = _gradients_nb(xy[el], gp, dxi, deta, dndx, dndz)
            _fill_b_nb(dndx, dndz, bu, bp)
            for i in range(6):
                s = 0.0
                for k in range(12):
                    s += bu[i, k] * ue[el, k]
                strain[i] = s
            q = 0.0
            for i in range(6):
                for j in range(6):
                    q += strain[i] * c[i, j] * strain[j]
            w += 0.5 * det * q
        out[el] = w
    return out


# ------------------------------------------------------------------ numpy

def _gradients_np(xy):
    """Physical shape gradients, shapes (ne, 4gp, 4) and det (ne, 4gp)."""
    j11 = np.einsum("ga,ea->eg", SHAPE_DXI, xy[:, :, 0])
    j12 = np.einsum("ga,ea->eg", SHAPE_DXI, xy[:, :, 1])
    j21 = np.einsum("ga,ea->eg", SHAPE_DETA, xy[:, :, 0])
    j22 = np.einsum("ga,ea->eg", SHAPE_DETA, xy[:, :, 1])
    det = j11 * j22 - j12 * j21
    if np.any(det <= 0.0):
        raise ValueError("non-positive element Jacobian")
    dndx = (j22[..., None] * SHAPE_DXI - j12[..., None] * SHAPE_DETA) / det[..., None]
    dndz = (-j21[..., None] * SHAPE_DXI + j11[..., None] * SHAPE_DETA) / det[..., None]
    return dndx, dndz, det


def _b_matrices_np(dndx, dndz):
    ne = dndx.shape[0]
    bu = np.zeros((ne, 4, 6, 12))
    bp = np.zeros((ne, 4, 3, 4))
    bu[:, :, 0, 0::3] = dndx
    bu[:, :, 2, 2::3] = dndz
    bu[:, :, 3, 1::3] = dndz
    bu[:, :, 4, 0::3] = dndz
    bu[:, :, 4, 2::3] = dndx
    bu[:, :, 5, 1::3] = dndx
    bp[:, :, 0, :] = dndx
    bp[:, :, 2, :] = dndz
    return bu, bp


def _element_matrices_np(xy, region, stiff, piezo, perm, rho):
    dndx, dndz, det = _gradients_np(xy)
    bu, bp = _b_matrices_np(dndx, dndz)
    c = stiff[region]
    e = piezo[region]
    eps = perm[region]
    kuu = np.einsum("eg,egip,eij,egjq->epq", det, bu, c, bu)
    kup = np.einsum("eg,egip,eji,egjq->epq", det, bu, e, bp)
    kpp = -np.einsum("eg,egip,eij,egjq->epq", det, bp, eps, bp)
    nn = np.einsum("eg,ga,gb->eab", det * rho[region][:, None], SHAPE_N, SHAPE_N)
    mass = np.zeros((xy.shape[0], 12, 12))
    for comp in range(3):
        mass[:, comp::3, comp::3] = nn
    return kuu, kup, kpp, mass


def _element_energies_np(xy, region, stiff, ue):
    dndx, dndz, det = _gradients_np(xy)
    bu, _ = _b_matrices_np(dndx, dndz)
    strain = np.einsum("egik,ek->egi", bu, ue)
    return 0.5 * np.einsum("eg,egi,eij,egj->e", det, strain, stiff[region], strain)


# ------------------------------------------------------------------ dispatch

def element_matrices(xy, region, stiff, piezo, perm, rho, use_numba=None):
    """Per-element (Kuu, Kup, Kpp, M) for all elements.

    ``stiff``/``piezo``/``perm``/``rho`` are stacked per region and indexed by
    ``region``. Kpp carries the negative-definite dielectric sign.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    region = np.ascontiguousarray(region, dtype=np.int64)
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (stiff, piezo, perm, rho)]
    if HAVE_NUMBA if use_numba is None else use_numba:
        return _element_matrices_nb(xy, region, *args, SHAPE_N, SHAPE_DXI, SHAPE_DETA)
    return _element_matrices_np(xy, region, *args)


def element_energies(xy, region, stiff, ue, use_numba=None):
    """Strain energy 1/2 S.cE.S integrated over each element."""
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    region = np.ascontiguousarray(region, dtype=np.int64)
    stiff = np.ascontiguousarray(stiff, dtype=np.float64)
    ue = np.ascontiguousarray(ue, dtype=np.float64)
    if HAVE_NUMBA if use_numba is None else use_numba:
        return _element_energies_nb(xy, region, stiff, ue, SHAPE_DXI, SHAPE_DETA)
    return _element_energies_np(xy, region, stiff, ue)
