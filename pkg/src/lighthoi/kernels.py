"""Hot geometric kernels: nearest-point distances and sphere/capsule SDFs.

Every kernel has a numba-compiled version and a pure-numpy version with the
same signature. The numba path is used unless ``LIGHTHOI_NUMBA=0`` is set in
the environment or numba fails to import. Both paths are always importable
through :data:`NUMBA` / :data:`NUMPY` so they can be compared directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("LIGHTHOI_NUMBA", "1") != "0"

# numpy path works on blocks of queries to bound the Q x V temporary
_BLOCK = 4096


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------


def _np_min_dist(queries, points):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    out = np.empty(queries.shape[0])
    for s in range(0, queries.shape[0], _BLOCK):
        q = queries[s : s + _BLOCK]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        out[s : s + _BLOCK] = np.sqrt(d2.min(axis=1))
    return out


def _np_min_dist_argmin(queries, points):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    dist = np.empty(queries.shape[0])
    idx = np.empty(queries.shape[0], dtype=np.int64)
    for s in range(0, queries.shape[0], _BLOCK):
        q = queries[s : s + _BLOCK]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        i = d2.argmin(axis=1)
        idx[s : s + _BLOCK] = i
        dist[s : s + _BLOCK] = np.sqrt(d2[np.arange(len(q)), i])
    return dist, idx


def _np_frame_min_dist(joints, verts):
    # joints (T, J, 3), verts (T, V, 3) -> (T, J)
    joints = np.asarray(joints, dtype=np.float64)
    verts = np.asarray(verts, dtype=np.float64)
    out = np.empty(joints.shape[:2])
    for t in range(joints.shape[0]):
        d2 = ((joints[t][:, None, :] - verts[t][None, :, :]) ** 2).sum(-1)
        out[t] = np.sqrt(d2.min(axis=1))
    return out


def _np_spheres_sdf(queries, centers, radii):
    queries = np.asarray(queries, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    out = np.empty(queries.shape[0])
    for s in range(0, queries.shape[0], _BLOCK):
        q = queries[s : s + _BLOCK]
        d = np.sqrt(((q[:, None, :] - centers[None, :, :]) ** 2).sum(-1)) - radii[None, :]
        out[s : s + _BLOCK] = d.min(axis=1)
    return out


def _np_capsules_sdf(queries, a, b, radii):
    queries = np.asarray(queries, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    pa = queries[:, None, :] - a[None, :, :]
    h = np.clip((pa * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
    d = np.sqrt(((pa - h[..., None] * ab[None]) ** 2).sum(-1)) - radii[None, :]
    return d.min(axis=1)


def _np_frame_spheres_sdf(verts, centers, radii):
    # verts (T, V, 3), centers (T, S, 3), radii (S,) -> (T, V)
    verts = np.asarray(verts, dtype=np.float64)
    out = np.empty(verts.shape[:2])
    for t in range(verts.shape[0]):
        out[t] = _np_spheres_sdf(verts[t], centers[t], radii)
    return out


NUMPY = {
    "min_dist": _np_min_dist,
    "min_dist_argmin": _np_min_dist_argmin,
    "frame_min_dist": _np_frame_min_dist,
    "spheres_sdf": _np_spheres_sdf,
    "capsules_sdf": _np_capsules_sdf,
    "frame_spheres_sdf": _np_frame_spheres_sdf,
}


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _nb_min_dist_impl(queries, points):
        nq = queries.shape[0]
        nv = points.shape[0]
        out = np.empty(nq)
        for i in range(nq):
            best = np.inf
            qx, qy, qz = queries[i, 0], queries[i, 1], queries[i, 2]
            for j in range(nv):
                dx = qx - points[j, 0]
                dy = qy - points[j, 1]
                dz = qz - points[j, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best:
                    best = d2
            out[i] = np.sqrt(best)
        return out

    @njit(cache=True)
    def _nb_min_dist_argmin_impl(queries, points):
        nq = queries.shape[0]
        nv = points.shape[0]
        dist = np.empty(nq)
        idx = np.empty(nq, dtype=np.int64)
        for i in range(nq):
            best = np.inf
            bi = 0
            for j in range(nv):
                dx = queries[i, 0] - points[j, 0]
                dy = queries[i, 1] - points[j, 1]
                dz = queries[i, 2] - points[j, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best:
                    best = d2
                    bi = j
            dist[i] = np.sqrt(best)
            idx[i] = bi
        return dist, idx

    @njit(cache=True)
    def _nb_frame_min_dist_impl(joints, verts):
        nt, nj = joints.shape[0], joints.shape[1]
        out = np.empty((nt, nj))
        for t in range(nt):
            out[t] = _nb_min_dist_impl(joints[t], verts[t])
        return out

    @njit(cache=True)
    def _nb_spheres_sdf_impl(queries, centers, radii):
        nq = queries.shape[0]
        ns = centers.shape[0]
        out = np.empty(nq)
        for i in range(nq):
            best = np.inf
            for s in range(ns):
                dx = queries[i, 0] - centers[s, 0]
                dy = queries[i, 1] - centers[s, 1]
                dz = queries[i, 2] - centers[s, 2]
                d = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[s]
                if d < best:
                    best = d
            out[i] = best
        return out

    @njit(cache=True)
    def _nb_capsules_sdf_impl(queries, a, b, radii):
        nq = queries.shape[0]
        nc = a.shape[0]
        out = np.empty(nq)
        for i in range(nq):
            best = np.inf
            for c in range(nc):
                abx = b[c, 0] - a[c, 0]
                aby = b[c, 1] - a[c, 1]
                abz = b[c, 2] - a[c, 2]
                pax = queries[i, 0] - a[c, 0]
                pay = queries[i, 1] - a[c, 1]
                paz = queries[i, 2] - a[c, 2]
                denom = max(abx * abx + aby * aby + abz * abz, 1e-12)
                h = (pax * abx + pay * aby + paz * abz) / denom
                h = min(max(h, 0.0), 1.0)
                dx = pax - h * abx
                dy = pay - h * aby
                dz = paz - h * abz
                d = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[c]
                if d < best:
                    best = d
            out[i] = best
        return out

    @njit(cache=True)
    def _nb_frame_spheres_sdf_impl(verts, centers, radii):
        nt, nv = verts.shape[0], verts.shape[1]
        out = np.empty((nt, nv))
        for t in range(nt):
            out[t] = _nb_spheres_sdf_impl(verts[t], centers[t], radii)
        return out

    def _f64(a):
        return np.ascontiguousarray(a, dtype=np.float64)

    NUMBA = {
        "min_dist": lambda q, p: _nb_min_dist_impl(_f64(q), _f64(p)),
        "min_dist_argmin": lambda q, p: _nb_min_dist_argmin_impl(_f64(q), _f64(p)),
        "frame_min_dist": lambda j, v: _nb_frame_min_dist_impl(_f64(j), _f64(v)),
        "spheres_sdf": lambda q, c, r: _nb_spheres_sdf_impl(_f64(q), _f64(c), _f64(r)),
        "capsules_sdf": lambda q, a, b, r: _nb_capsules_sdf_impl(_f64(q), _f64(a), _f64(b), _f64(r)),
        "frame_spheres_sdf": lambda v, c, r: _nb_frame_spheres_sdf_impl(_f64(v), _f64(c), _f64(r)),
    }
else:  # pragma: no cover
    NUMBA = dict(NUMPY)

ACTIVE = NUMBA if USE_NUMBA else NUMPY
backend = "numba" if USE_NUMBA else "numpy"

min_dist = ACTIVE["min_dist"]
min_dist_argmin = ACTIVE["min_dist_argmin"]
frame_min_dist = ACTIVE["frame_min_dist"]
spheres_sdf = ACTIVE["spheres_sdf"]
capsules_sdf = ACTIVE["capsules_sdf"]
frame_spheres_sdf = ACTIVE["frame_spheres_sdf"]
