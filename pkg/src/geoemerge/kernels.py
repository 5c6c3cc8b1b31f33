"""Hot numeric kernels: z-buffer forward splatting and analytic ray casting.

Both kernels exist twice: a numba ``@njit`` loop and a pure-numpy fallback
with identical operation ordering, so the two backends produce bit-identical
outputs. The numba backend is used when numba imports cleanly unless the
environment variable ``GEOEMERGE_NO_NUMBA`` is set to ``1``/``true``/``yes``.

Conventions shared by every caller:
  - pixel (u, v) = (column, row), integer indices sample at pixel centers
  - continuous coordinates rasterize via floor(x + 0.5)
  - depth is z along the camera optical axis; rays are (rx, ry, 1) with
    rx = (u - cx) / fx and ry = (v - cy) / fy, so the ray parameter is z
"""

from __future__ import annotations

import os

import numpy as np


def _env_disables_numba() -> bool:
    return os.environ.get("GEOEMERGE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")


def _try_import_numba():
    try:
        from numba import njit
    except ImportError:
        return None
    return njit


_njit = None if _env_disables_numba() else _try_import_numba()
USE_NUMBA = _njit is not None


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# z-buffer forward splatting
# ---------------------------------------------------------------------------

def _splat_min_z_loop(depth, valid, ray_x, ray_y, rot, trans,
                      fx, fy, cx, cy, z_min, out_z, out_src):
    """Splat every valid source pixel into the target raster, keeping min z.

    out_z must be zero-initialized (0 marks "no splat yet"); out_src must be
    -1-initialized and receives the winning source linear index v*W + u.
    Ties in z keep the smallest source index (first seen in row-major scan).
    """
    h, w = depth.shape
    for v in range(h):
        for u in range(w):
            if not valid[v, u]:
                continue
            d = depth[v, u]
            x = ray_x[v, u] * d
            y = ray_y[v, u] * d
            tx = rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * d + trans[0]
            ty = rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * d + trans[1]
            tz = rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * d + trans[2]
            if tz <= z_min:
                continue
            uu = fx * tx / tz + cx
            vv = fy * ty / tz + cy
            iu = int(np.floor(uu + 0.5))
            iv = int(np.floor(vv + 0.5))
            if iu < 0 or iu >= w or iv < 0 or iv >= h:
                continue
            best = out_z[iv, iu]
            if best <= 0.0 or tz < best:
                out_z[iv, iu] = tz
                out_src[iv, iu] = v * w + u


def _splat_min_z_numpy(depth, valid, ray_x, ray_y, rot, trans,
                       fx, fy, cx, cy, z_min, out_z, out_src):
    h, w = depth.shape
    vs, us = np.nonzero(valid)
    if vs.size == 0:
        return
    d = depth[vs, us]
    x = ray_x[vs, us] * d
    y = ray_y[vs, us] * d
    tx = rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * d + trans[0]
    ty = rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * d + trans[1]
    tz = rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * d + trans[2]
    keep = tz > z_min
    if not keep.any():
        return
    tx, ty, tz = tx[keep], ty[keep], tz[keep]
    vs, us = vs[keep], us[keep]
    uu = fx * tx / tz + cx
    vv = fy * ty / tz + cy
    iu = np.floor(uu + 0.5).astype(np.int64)
    iv = np.floor(vv + 0.5).astype(np.int64)
    inb = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    if not inb.any():
        return
    iu, iv, tz = iu[inb], iv[inb], tz[inb]
    src = (vs * w + us)[inb]
    # Last write wins in fancy assignment, so order splats by (z, src index)
    # descending: the final write per cell is the min z, ties -> min index,
    # matching the loop backend exactly.
    order = np.lexsort((src, tz))[::-1]
    iu, iv = iu[order], iv[order]
    out_z[iv, iu] = tz[order]
    out_src[iv, iu] = src[order]


# ---------------------------------------------------------------------------
# analytic ray casting (room interior + axis-aligned boxes + optional sphere)
# ---------------------------------------------------------------------------

def _raycast_loop(ray_x, ray_y, rot, origin, room_min, room_max, boxes, sphere,
                  z_min, out_depth, out_normal, out_prim):
    """Nearest-hit ray casting. The camera must be strictly inside the room.

    boxes is (n, 6) rows of (min x,y,z, max x,y,z); sphere is (4,) of
    (center x,y,z, radius), radius <= 0 meaning absent. Primitive ids:
    0 = room shell, 1..n = boxes, n+1 = sphere. Normals are world-frame unit
    vectors on the camera-facing side. out_depth receives the ray parameter,
    which equals camera-frame z because rays are (rx, ry, 1).
    """
    h, w = ray_x.shape
    n_boxes = boxes.shape[0]
    has_sphere = sphere[3] > 0.0
    ox, oy, oz = origin[0], origin[1], origin[2]
    for v in range(h):
        for u in range(w):
            rx = ray_x[v, u]
            ry = ray_y[v, u]
            dx = rot[0, 0] * rx + rot[0, 1] * ry + rot[0, 2]
            dy = rot[1, 0] * rx + rot[1, 1] * ry + rot[1, 2]
            dz = rot[2, 0] * rx + rot[2, 1] * ry + rot[2, 2]

            # Room exit: camera inside a closed box, exactly one exit per axis
            # direction; nearest positive exit wins.
            if dx > 0.0:
                sx = (room_max[0] - ox) / dx
            elif dx < 0.0:
                sx = (room_min[0] - ox) / dx
            else:
                sx = np.inf
            if dy > 0.0:
                sy = (room_max[1] - oy) / dy
            elif dy < 0.0:
                sy = (room_min[1] - oy) / dy
            else:
                sy = np.inf
            if dz > 0.0:
                sz = (room_max[2] - oz) / dz
            elif dz < 0.0:
                sz = (room_min[2] - oz) / dz
            else:
                sz = np.inf
            best = sx
            axis = 0
            if sy < best:
                best = sy
                axis = 1
            if sz < best:
                best = sz
                axis = 2
            nx = 0.0
            ny = 0.0
            nz = 0.0
            if axis == 0:
                nx = -1.0 if dx > 0.0 else 1.0
            elif axis == 1:
                ny = -1.0 if dy > 0.0 else 1.0
            else:
                nz = -1.0 if dz > 0.0 else 1.0
            prim = 0

            for k in range(n_boxes):
                # Slab test; the camera is outside every object box.
                if dx != 0.0:
                    t1 = (boxes[k, 0] - ox) / dx
                    t2 = (boxes[k, 3] - ox) / dx
                    near_x = min(t1, t2)
                    far_x = max(t1, t2)
                elif boxes[k, 0] <= ox <= boxes[k, 3]:
                    near_x = -np.inf
                    far_x = np.inf
                else:
                    near_x = np.inf
                    far_x = -np.inf
                if dy != 0.0:
                    t1 = (boxes[k, 1] - oy) / dy
                    t2 = (boxes[k, 4] - oy) / dy
                    near_y = min(t1, t2)
                    far_y = max(t1, t2)
                elif boxes[k, 1] <= oy <= boxes[k, 4]:
                    near_y = -np.inf
                    far_y = np.inf
                else:
                    near_y = np.inf
                    far_y = -np.inf
                if dz != 0.0:
                    t1 = (boxes[k, 2] - oz) / dz
                    t2 = (boxes[k, 5] - oz) / dz
                    near_z = min(t1, t2)
                    far_z = max(t1, t2)
                elif boxes[k, 2] <= oz <= boxes[k, 5]:
                    near_z = -np.inf
                    far_z = np.inf
                else:
                    near_z = np.inf
                    far_z = -np.inf
                t_near = near_x
                e_axis = 0
                if near_y > t_near:
                    t_near = near_y
                    e_axis = 1
                if near_z > t_near:
                    t_near = near_z
                    e_axis = 2
                t_far = min(min(far_x, far_y), far_z)
                if t_near <= t_far and t_near > z_min and t_near < best:
                    best = t_near
                    prim = k + 1
                    nx = 0.0
                    ny = 0.0
                    nz = 0.0
                    if e_axis == 0:
                        nx = -1.0 if dx > 0.0 else 1.0
                    elif e_axis == 1:
                        ny = -1.0 if dy > 0.0 else 1.0
                    else:
                        nz = -1.0 if dz > 0.0 else 1.0

            if has_sphere:
                ocx = ox - sphere[0]
                ocy = oy - sphere[1]
                ocz = oz - sphere[2]
                a = dx * dx + dy * dy + dz * dz
                b = 2.0 * (ocx * dx + ocy * dy + ocz * dz)
                c = ocx * ocx + ocy * ocy + ocz * ocz - sphere[3] * sphere[3]
                disc = b * b - 4.0 * a * c
                if disc >= 0.0:
                    sq = np.sqrt(disc)
                    s1 = (-b - sq) / (2.0 * a)
                    s2 = (-b + sq) / (2.0 * a)
                    s_hit = s1 if s1 > z_min else s2
                    if s_hit > z_min and s_hit < best:
                        best = s_hit
                        prim = n_boxes + 1
                        px = ox + s_hit * dx - sphere[0]
                        py = oy + s_hit * dy - sphere[1]
                        pz = oz + s_hit * dz - sphere[2]
                        nx = px / sphere[3]
                        ny = py / sphere[3]
                        nz = pz / sphere[3]

            out_depth[v, u] = best
            out_normal[v, u, 0] = nx
            out_normal[v, u, 1] = ny
            out_normal[v, u, 2] = nz
            out_prim[v, u] = prim


def _raycast_numpy(ray_x, ray_y, rot, origin, room_min, room_max, boxes, sphere,
                   z_min, out_depth, out_normal, out_prim):
    h, w = ray_x.shape
    n_boxes = boxes.shape[0]
    ox, oy, oz = origin[0], origin[1], origin[2]
    dx = rot[0, 0] * ray_x + rot[0, 1] * ray_y + rot[0, 2]
    dy = rot[1, 0] * ray_x + rot[1, 1] * ray_y + rot[1, 2]
    dz = rot[2, 0] * ray_x + rot[2, 1] * ray_y + rot[2, 2]
    dirs = (dx, dy, dz)
    inf = np.inf

    def _room_exit(d, lo, hi, o):
        safe = np.where(d == 0.0, 1.0, d)
        t_pos = (hi - o) / safe
        t_neg = (lo - o) / safe
        return np.where(d > 0.0, t_pos, np.where(d < 0.0, t_neg, inf))

    sx = _room_exit(dx, room_min[0], room_max[0], ox)
    sy = _room_exit(dy, room_min[1], room_max[1], oy)
    sz = _room_exit(dz, room_min[2], room_max[2], oz)
    best = sx.copy()
    axis = np.zeros((h, w), dtype=np.int64)
    hit = sy < best
    best[hit] = sy[hit]
    axis[hit] = 1
    hit = sz < best
    best[hit] = sz[hit]
    axis[hit] = 2
    normal = np.zeros((h, w, 3))
    for a in range(3):
        sel = axis == a
        normal[sel, a] = np.where(dirs[a][sel] > 0.0, -1.0, 1.0)
    prim = np.zeros((h, w), dtype=np.int64)

    origin_axes = (ox, oy, oz)
    for k in range(n_boxes):
        nears = []
        fars = []
        for a in range(3):
            d = dirs[a]
            o = origin_axes[a]
            lo = boxes[k, a]
            hi = boxes[k, a + 3]
            safe = np.where(d == 0.0, 1.0, d)
            t1 = (lo - o) / safe
            t2 = (hi - o) / safe
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            inside = (lo <= o) & (o <= hi)
            zero = d == 0.0
            near = np.where(zero, np.where(inside, -inf, inf), near)
            far = np.where(zero, np.where(inside, inf, -inf), far)
            nears.append(near)
            fars.append(far)
        t_near = nears[0].copy()
        e_axis = np.zeros((h, w), dtype=np.int64)
        upd = nears[1] > t_near
        t_near[upd] = nears[1][upd]
        e_axis[upd] = 1
        upd = nears[2] > t_near
        t_near[upd] = nears[2][upd]
        e_axis[upd] = 2
        t_far = np.minimum(np.minimum(fars[0], fars[1]), fars[2])
        box_hit = (t_near <= t_far) & (t_near > z_min) & (t_near < best)
        best[box_hit] = t_near[box_hit]
        prim[box_hit] = k + 1
        normal[box_hit] = 0.0
        for a in range(3):
            sel = box_hit & (e_axis == a)
            normal[sel, a] = np.where(dirs[a][sel] > 0.0, -1.0, 1.0)

    if sphere[3] > 0.0:
        ocx, ocy, ocz = ox - sphere[0], oy - sphere[1], oz - sphere[2]
        a_q = dx * dx + dy * dy + dz * dz
        b_q = 2.0 * (ocx * dx + ocy * dy + ocz * dz)
        c_q = ocx * ocx + ocy * ocy + ocz * ocz - sphere[3] * sphere[3]
        disc = b_q * b_q - 4.0 * a_q * c_q
        has_root = disc >= 0.0
        sq = np.sqrt(np.where(has_root, disc, 0.0))
        s1 = (-b_q - sq) / (2.0 * a_q)
        s2 = (-b_q + sq) / (2.0 * a_q)
        s_hit = np.where(s1 > z_min, s1, s2)
        sp_hit = has_root & (s_hit > z_min) & (s_hit < best)
        best[sp_hit] = s_hit[sp_hit]
        prim[sp_hit] = n_boxes + 1
        px = ox + s_hit * dx - sphere[0]
        py = oy + s_hit * dy - sphere[1]
        pz = oz + s_hit * dz - sphere[2]
        normal[sp_hit, 0] = px[sp_hit] / sphere[3]
        normal[sp_hit, 1] = py[sp_hit] / sphere[3]
        normal[sp_hit, 2] = pz[sp_hit] / sphere[3]

    out_depth[...] = best
    out_normal[...] = normal
    out_prim[...] = prim


if USE_NUMBA:
    _splat_min_z_jit = _njit(cache=True)(_splat_min_z_loop)
    _raycast_jit = _njit(cache=True)(_raycast_loop)
else:
    _splat_min_z_jit = None
    _raycast_jit = None


def _resolve(backend: str | None) -> str:
    chosen = backend or backend_name()
    if chosen == "numba" and _splat_min_z_jit is None:
        raise RuntimeError("numba backend requested but unavailable "
                           "(numba not importable or GEOEMERGE_NO_NUMBA set)")
    return chosen


def splat_min_z(depth, valid, ray_x, ray_y, rot, trans, fx, fy, cx, cy, z_min,
                backend: str | None = None):
    """Forward-splat a source depth map through a rigid transform.

    Returns (out_z, out_src): target-frame z per covered target pixel (0.0
    where uncovered) and the winning source linear index (-1 where uncovered).
    """
    h, w = depth.shape
    out_z = np.zeros((h, w), dtype=np.float64)
    out_src = np.full((h, w), -1, dtype=np.int64)
    args = (np.ascontiguousarray(depth, dtype=np.float64), np.ascontiguousarray(valid),
            ray_x, ray_y, np.ascontiguousarray(rot, dtype=np.float64),
            np.ascontiguousarray(trans, dtype=np.float64),
            float(fx), float(fy), float(cx), float(cy), float(z_min), out_z, out_src)
    chosen = _resolve(backend)
    if chosen == "numba":
        _splat_min_z_jit(*args)
    else:
        _splat_min_z_numpy(*args)
    return out_z, out_src


def raycast_scene(ray_x, ray_y, rot, origin, room_min, room_max, boxes, sphere,
                  z_min=1e-6, backend: str | None = None):
    """Cast one ray per pixel against room shell, boxes, and optional sphere.

    Returns (depth, normal_world, prim_id); see _raycast_loop for semantics.
    """
    h, w = ray_x.shape
    out_depth = np.empty((h, w), dtype=np.float64)
    out_normal = np.empty((h, w, 3), dtype=np.float64)
    out_prim = np.empty((h, w), dtype=np.int64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
    sphere = np.ascontiguousarray(sphere, dtype=np.float64)
    args = (ray_x, ray_y, np.ascontiguousarray(rot, dtype=np.float64),
            np.ascontiguousarray(origin, dtype=np.float64),
            np.ascontiguousarray(room_min, dtype=np.float64),
            np.ascontiguousarray(room_max, dtype=np.float64),
            boxes, sphere, float(z_min), out_depth, out_normal, out_prim)
    chosen = _resolve(backend)
    if chosen == "numba":
        _raycast_jit(*args)
    else:
        _raycast_numpy(*args)
    return out_depth, out_normal, out_prim
