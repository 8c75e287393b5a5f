"""Serial numba kernels for per-pixel chord rendering and the voxel projector.

Everything here is deliberately single-threaded scalar code: per-pixel work
is independent, accumulation orders are fixed, and no BLAS reductions are
involved, so results are bit-reproducible regardless of thread settings and
of which (conservative) culling mode selected the candidates.

Render modes: 0 = full correction, 1 = raw lengths (correction disabled),
2 = constant unit lengths (geometry gradients vanish).

Slot case codes record which branch of the correction produced each segment:
0 first-kept / raw (d l~ / d l = 1), 1 exit-difference form, 2 zeroed,
3 kept whole by the min clamp, 4 unit-length mode.
"""

import math

import numpy as np
from numba import njit

MODE_FULL = 0
MODE_NO_CORRECTION = 1
MODE_UNIT_LENGTH = 2


@njit(cache=True)
def chord_render(origin, dirs, centers, minvs, sigmas, tile_of, indptr, indices,
                 max_slots, mode):
    """Forward render of all pixels of one view.

    Returns (image, n_slots, slot_idx, slot_case, slot_pred, slot_lt, hit_counts).
    Slots hold the depth-sorted retained hits per pixel, in the exact order
    used for accumulation; `slot_pred` is the in-pixel slot position of the
    retained predecessor for exit-difference segments (-1 otherwise).
    """
    n_pix = dirs.shape[0]
    image = np.zeros(n_pix)
    n_slots = np.zeros(n_pix, dtype=np.int32)
    slot_idx = np.full((n_pix, max_slots), -1, dtype=np.int32)
    slot_case = np.zeros((n_pix, max_slots), dtype=np.int8)
    slot_pred = np.full((n_pix, max_slots), -1, dtype=np.int32)
    slot_lt = np.zeros((n_pix, max_slots))
    hit_counts = np.zeros(centers.shape[0], dtype=np.int64)

    ent = np.empty(max_slots)
    zs = np.empty(max_slots)
    ls = np.empty(max_slots)
    ids = np.empty(max_slots, dtype=np.int32)

    ox, oy, oz = origin[0], origin[1], origin[2]
    for p in range(n_pix):
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        t = tile_of[p]
        base = indptr[t]
        count = indptr[t + 1] - base
        m = 0
        for ci in range(count):
            e = indices[base + ci]
            cx, cy, cz = centers[e, 0], centers[e, 1], centers[e, 2]
            wx, wy, wz = cx - ox, cy - oy, cz - oz
            t_u = dx * wx + dy * wy + dz * wz
            ax = ox + t_u * dx - cx
            ay = oy + t_u * dy - cy
            az = oz + t_u * dz - cz
            m00, m01, m02 = minvs[e, 0, 0], minvs[e, 0, 1], minvs[e, 0, 2]
            m11, m12, m22 = minvs[e, 1, 1], minvs[e, 1, 2], minvs[e, 2, 2]
            mdx = m00 * dx + m01 * dy + m02 * dz
            mdy = m01 * dx + m11 * dy + m12 * dz
            mdz = m02 * dx + m12 * dy + m22 * dz
            A = dx * mdx + dy * mdy + dz * mdz
            B = ax * mdx + ay * mdy + az * mdz
            max_ = m00 * ax + m01 * ay + m02 * az
            may_ = m01 * ax + m11 * ay + m12 * az
            maz_ = m02 * ax + m12 * ay + m22 * az
            C = ax * max_ + ay * may_ + az * maz_
            rho = 1.0 - C + B * B / A
            if rho > 0.0:
                length = 2.0 / math.sqrt(A) * math.sqrt(rho)
                if mode == MODE_UNIT_LENGTH:
                    length = 1.0
                depth = t_u - B / A
                zs[m] = depth
                ls[m] = length
                ent[m] = depth - 0.5 * length
                ids[m] = e
                m += 1
        # Insertion sort by (entry depth, ellipsoid index); candidates arrive in
        # ascending index order, so a stable strict-< sort breaks ties by index.
        for i in range(1, m):
            ke, kz, kl, ki = ent[i], zs[i], ls[i], ids[i]
            j = i - 1
            while j >= 0 and ent[j] > ke:
                ent[j + 1] = ent[j]
                zs[j + 1] = zs[j]
                ls[j + 1] = ls[j]
                ids[j + 1] = ids[j]
                j -= 1
            ent[j + 1] = ke
            zs[j + 1] = kz
            ls[j + 1] = kl
            ids[j + 1] = ki

        acc = 0.0
        z_run = 0.0
        l_run = 0.0
        last_kept = -1
        for k in range(m):
            e = ids[k]
            if mode == MODE_UNIT_LENGTH:
                lt = 1.0
                case = 4
                pred = -1
            elif mode == MODE_NO_CORRECTION or k == 0:
                lt = ls[k]
                case = 0
                pred = -1
            else:
                exit_i = zs[k] + 0.5 * ls[k]
                exit_run = z_run + 0.5 * l_run
                val = exit_i - exit_run
                if zs[k] < exit_run:
                    if val >= 0.0:
                        lt = val
                        case = 1
                        pred = last_kept
                    else:
                        lt = 0.0
                        case = 2
                        pred = -1
                else:
                    if val <= ls[k]:
                        lt = val
                        case = 1
                        pred = last_kept
                    else:
                        lt = ls[k]
                        case = 3
                        pred = -1
            if mode != MODE_UNIT_LENGTH and (k == 0 or lt != 0.0):
                z_run = zs[k]
                l_run = ls[k]
                last_kept = k
            acc += sigmas[e] * lt
            slot_idx[p, k] = e
            slot_case[p, k] = case
            slot_pred[p, k] = pred
            slot_lt[p, k] = lt
            hit_counts[e] += 1
        n_slots[p] = m
        image[p] = acc
    return image, n_slots, slot_idx, slot_case, slot_pred, slot_lt, hit_counts


@njit(cache=True)
def chord_backward(origin, dirs, centers, minvs, sigmas, n_slots, slot_idx,
                   slot_case, slot_pred, slot_lt, grad_image, mode):
    """Backward pass of `chord_render` for a per-pixel image gradient.

    Returns (g_sigma (N,), g_center (N,3), g_msym (N,6)) where g_msym holds
    the symmetrized gradient S = G + G^T w.r.t. the inverse covariance in
    component order (00, 11, 22, 01, 02, 12). Accumulation is serial over
    pixels in raster order, so results are reproducible bit-for-bit.
    """
    n_ell = centers.shape[0]
    n_pix = dirs.shape[0]
    max_slots = slot_idx.shape[1]
    g_sigma = np.zeros(n_ell)
    g_center = np.zeros((n_ell, 3))
    g_msym = np.zeros((n_ell, 6))
    gz = np.zeros(max_slots)
    gl = np.zeros(max_slots)

    ox, oy, oz = origin[0], origin[1], origin[2]
    for p in range(n_pix):
        m = n_slots[p]
        gp = grad_image[p]
        if m == 0 or gp == 0.0:
            continue
        for k in range(m):
            gz[k] = 0.0
            gl[k] = 0.0
        for k in range(m):
            e = slot_idx[p, k]
            g_sigma[e] += gp * slot_lt[p, k]
            glt = gp * sigmas[e]
            case = slot_case[p, k]
            if case == 0 or case == 3:
                gl[k] += glt
            elif case == 1:
                gz[k] += glt
                gl[k] += 0.5 * glt
                pk = slot_pred[p, k]
                gz[pk] -= glt
                gl[pk] -= 0.5 * glt
            # case 2 (zeroed) and case 4 (unit length): no geometry flow.
        if mode == MODE_UNIT_LENGTH:
            continue
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        for k in range(m):
            if gz[k] == 0.0 and gl[k] == 0.0:
                continue
            e = slot_idx[p, k]
            cx, cy, cz = centers[e, 0], centers[e, 1], centers[e, 2]
            wx, wy, wz = cx - ox, cy - oy, cz - oz
            t_u = dx * wx + dy * wy + dz * wz
            ax = ox + t_u * dx - cx
            ay = oy + t_u * dy - cy
            az = oz + t_u * dz - cz
            m00, m01, m02 = minvs[e, 0, 0], minvs[e, 0, 1], minvs[e, 0, 2]
            m11, m12, m22 = minvs[e, 1, 1], minvs[e, 1, 2], minvs[e, 2, 2]
            mdx = m00 * dx + m01 * dy + m02 * dz
            mdy = m01 * dx + m11 * dy + m12 * dz
            mdz = m02 * dx + m12 * dy + m22 * dz
            A = dx * mdx + dy * mdy + dz * mdz
            B = ax * mdx + ay * mdy + az * mdz
            max_ = m00 * ax + m01 * ay + m02 * az
            may_ = m01 * ax + m11 * ay + m12 * az
            maz_ = m02 * ax + m12 * ay + m22 * az
            C = ax * max_ + ay * may_ + az * maz_
            rho = 1.0 - C + B * B / A
            if rho <= 0.0:
                continue
            s_a = math.sqrt(A)
            s_r = math.sqrt(rho)
            dl_dA = -s_r / (A * s_a) - (B * B) / (A * A * s_a * s_r)
            dl_dB = 2.0 * B / (A * s_a * s_r)
            dl_dC = -1.0 / (s_a * s_r)
            gA = gl[k] * dl_dA + gz[k] * (B / (A * A))
            gB = gl[k] * dl_dB - gz[k] / A
            gC = gl[k] * dl_dC
            # a-gradient, then chain a = (d.w) d - w, t_u = d.w through the center.
            gax = gB * mdx + 2.0 * gC * max_
            gay = gB * mdy + 2.0 * gC * may_
            gaz = gB * mdz + 2.0 * gC * maz_
            dot = dx * gax + dy * gay + dz * gaz
            g_center[e, 0] += dot * dx - gax + gz[k] * dx
            g_center[e, 1] += dot * dy - gay + gz[k] * dy
            g_center[e, 2] += dot * dz - gaz + gz[k] * dz
            # S = G + G^T for G = gA d d^T + gB a d^T + gC a a^T.
            g_msym[e, 0] += 2.0 * (gA * dx * dx + gB * ax * dx + gC * ax * ax)
            g_msym[e, 1] += 2.0 * (gA * dy * dy + gB * ay * dy + gC * ay * ay)
            g_msym[e, 2] += 2.0 * (gA * dz * dz + gB * az * dz + gC * az * az)
            g_msym[e, 3] += 2.0 * gA * dx * dy + gB * (ax * dy + ay * dx) + 2.0 * gC * ax * ay
            g_msym[e, 4] += 2.0 * gA * dx * dz + gB * (ax * dz + az * dx) + 2.0 * gC * ax * az
            g_msym[e, 5] += 2.0 * gA * dy * dz + gB * (ay * dz + az * dy) + 2.0 * gC * ay * az
    return g_sigma, g_center, g_msym


# ---------------------------------------------------------------------------
# Trilinear ray-driven voxel projector (forward and exact adjoint)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _slab_range(o, d, lo, hi):
    """Entry/exit parameters of a ray against [lo, hi]^3; (0, -1) on miss."""
    t0 = 0.0
    t1 = 1e300
    for k in range(3):
        dk = d[k]
        if abs(dk) < 1e-300:
            if o[k] < lo[k] or o[k] > hi[k]:
                return 0.0, -1.0
        else:
            ta = (lo[k] - o[k]) / dk
            tb = (hi[k] - o[k]) / dk
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def voxel_forward(values, origin, spacing, src, dirs, step):
    """Line integrals through a trilinear field sampled at fixed `step`."""
    n_pix = dirs.shape[0]
    nx, ny, nz = values.shape
    lo = origin
    hi = np.empty(3)
    hi[0] = origin[0] + (nx - 1) * spacing[0]
    hi[1] = origin[1] + (ny - 1) * spacing[1]
    hi[2] = origin[2] + (nz - 1) * spacing[2]
    out = np.zeros(n_pix)
    for p in range(n_pix):
        d = dirs[p]
        t0, t1 = _slab_range(src, d, lo, hi)
        if t1 <= t0:
            continue
        n = int((t1 - t0) / step)
        acc = 0.0
        for k in range(n):
            t = t0 + (k + 0.5) * step
            fx = (src[0] + t * d[0] - origin[0]) / spacing[0]
            fy = (src[1] + t * d[1] - origin[1]) / spacing[1]
            fz = (src[2] + t * d[2] - origin[2]) / spacing[2]
            ix = int(math.floor(fx))
            iy = int(math.floor(fy))
            iz = int(math.floor(fz))
            if ix < 0 or iy < 0 or iz < 0 or ix >= nx - 1 or iy >= ny - 1 or iz >= nz - 1:
                if ix == nx - 1 and fx == nx - 1.0:
                    ix = nx - 2
                elif ix < 0 or ix >= nx - 1:
                    continue
                if iy == ny - 1 and fy == ny - 1.0:
                    iy = ny - 2
                elif iy < 0 or iy >= ny - 1:
                    continue
                if iz == nz - 1 and fz == nz - 1.0:
                    iz = nz - 2
                elif iz < 0 or iz >= nz - 1:
                    continue
            tx = fx - ix
            ty = fy - iy
            tz = fz - iz
            acc += ((values[ix, iy, iz] * (1 - tx) + values[ix + 1, iy, iz] * tx) * (1 - ty)
                    + (values[ix, iy + 1, iz] * (1 - tx) + values[ix + 1, iy + 1, iz] * tx) * ty) * (1 - tz) \
                + ((values[ix, iy, iz + 1] * (1 - tx) + values[ix + 1, iy, iz + 1] * tx) * (1 - ty)
                   + (values[ix, iy + 1, iz + 1] * (1 - tx) + values[ix + 1, iy + 1, iz + 1] * tx) * ty) * tz
        out[p] = acc * step
    return out


@njit(cache=True)
def voxel_adjoint(img, vol_out, origin, spacing, src, dirs, step):
    """Exact transpose of `voxel_forward`: scatters into `vol_out` in place."""
    n_pix = dirs.shape[0]
    nx, ny, nz = vol_out.shape
    lo = origin
    hi = np.empty(3)
    hi[0] = origin[0] + (nx - 1) * spacing[0]
    hi[1] = origin[1] + (ny - 1) * spacing[1]
    hi[2] = origin[2] + (nz - 1) * spacing[2]
    for p in range(n_pix):
        w = img[p] * step
        if w == 0.0:
            continue
        d = dirs[p]
        t0, t1 = _slab_range(src, d, lo, hi)
        if t1 <= t0:
            continue
        n = int((t1 - t0) / step)
        for k in range(n):
            t = t0 + (k + 0.5) * step
            fx = (src[0] + t * d[0] - origin[0]) / spacing[0]
            fy = (src[1] + t * d[1] - origin[1]) / spacing[1]
            fz = (src[2] + t * d[2] - origin[2]) / spacing[2]
            ix = int(math.floor(fx))
            iy = int(math.floor(fy))
            iz = int(math.floor(fz))
            if ix < 0 or iy < 0 or iz < 0 or ix >= nx - 1 or iy >= ny - 1 or iz >= nz - 1:
                if ix == nx - 1 and fx == nx - 1.0:
                    ix = nx - 2
                elif ix < 0 or ix >= nx - 1:
                    continue
                if iy == ny - 1 and fy == ny - 1.0:
                    iy = ny - 2
                elif iy < 0 or iy >= ny - 1:
                    continue
                if iz == nz - 1 and fz == nz - 1.0:
                    iz = nz - 2
                elif iz < 0 or iz >= nz - 1:
                    continue
            tx = fx - ix
            ty = fy - iy
            tz = fz - iz
            vol_out[ix, iy, iz] += w * (1 - tx) * (1 - ty) * (1 - tz)
            vol_out[ix + 1, iy, iz] += w * tx * (1 - ty) * (1 - tz)
            vol_out[ix, iy + 1, iz] += w * (1 - tx) * ty * (1 - tz)
            vol_out[ix + 1, iy + 1, iz] += w * tx * ty * (1 - tz)
            vol_out[ix, iy, iz + 1] += w * (1 - tx) * (1 - ty) * tz
            vol_out[ix + 1, iy, iz + 1] += w * tx * (1 - ty) * tz
            vol_out[ix, iy + 1, iz + 1] += w * (1 - tx) * ty * tz
            vol_out[ix + 1, iy + 1, iz + 1] += w * tx * ty * tz
