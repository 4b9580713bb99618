"""Inner loops that dominate encode, pooling, ring recovery and ray casting.

Every kernel comes as a numpy implementation (``*_np``) and a loop
implementation (``*_jit``) compiled by numba. The public name is bound to one
of them according to ``LIDARODOM_NUMBA``; both are importable for
equivalence tests and benchmarks.
"""
import numpy as np

from ._accel import njit, pick

# --------------------------------------------------------------------------
# polar-bin accumulation


def bin_accumulate_np(flat_index, feats, n_bins):
    counts = np.bincount(flat_index, minlength=n_bins).astype(np.float64)
    sums = np.empty((n_bins, feats.shape[1]))
    for c in range(feats.shape[1]):
        sums[:, c] = np.bincount(flat_index, weights=feats[:, c], minlength=n_bins)
    return sums, counts


@njit
def bin_accumulate_jit(flat_index, feats, n_bins):
    n, nc = feats.shape
    sums = np.zeros((n_bins, nc))
    counts = np.zeros(n_bins)
    for i in range(n):
        b = flat_index[i]
        counts[b] += 1.0
        for c in range(nc):
            sums[b, c] += feats[i, c]
    return sums, counts


# --------------------------------------------------------------------------
# empty-cell interpolation: circular linear along rows, nearest row fallback


def _fill_empty_rows(out, occupied_rows):
    rows = out.shape[0]
    occ = np.flatnonzero(occupied_rows)
    for r in range(rows):
        if occupied_rows[r]:
            continue
        # nearest occupied row; ties go to the row above
        src = occ[np.argmin(np.abs(occ - r) * 2 + (occ > r))]
        out[r] = out[src]
    return out


def interpolate_rows_np(values, mask):
    rows, cols, nch = values.shape
    out = np.array(values, dtype=np.float64, copy=True)
    occupied_rows = mask.any(axis=1)
    grid = np.arange(cols, dtype=np.float64)
    for r in np.flatnonzero(occupied_rows):
        idx = np.flatnonzero(mask[r])
        if len(idx) == cols:
            continue
        empty = ~mask[r]
        if len(idx) == 1:
            out[r, empty] = out[r, idx[0]]
            continue
        for c in range(nch):
            out[r, empty, c] = np.interp(grid[empty], idx.astype(np.float64), out[r, idx, c], period=cols)
    return _fill_empty_rows(out, occupied_rows)


@njit
def _interp_row_jit(row, occ, cols):
    n_occ = occ.shape[0]
    nch = row.shape[1]
    if n_occ == 1:
        for c in range(cols):
            if c != occ[0]:
                for k in range(nch):
                    row[c, k] = row[occ[0], k]
        return
    for j in range(n_occ):
        a = occ[j]
        b = occ[(j + 1) % n_occ]
        gap = (b - a) % cols
        if gap == 0:
            gap = cols
        for s in range(1, gap):
            w = s / gap
            c = (a + s) % cols
            for k in range(nch):
                row[c, k] = (1.0 - w) * row[a, k] + w * row[b, k]


@njit
def interpolate_rows_jit(values, mask):
    rows, cols, nch = values.shape
    out = values.astype(np.float64).copy()
    occupied = np.zeros(rows, dtype=np.bool_)
    for r in range(rows):
        occ = np.flatnonzero(mask[r])
        if occ.shape[0] > 0:
            occupied[r] = True
            if occ.shape[0] < cols:
                _interp_row_jit(out[r], occ, cols)
    for r in range(rows):
        if occupied[r]:
            continue
        best = -1
        best_d = rows + 1
        for q in range(rows):
            if occupied[q]:
                d = abs(q - r)
                if d < best_d:
                    best_d = d
                    best = q
        out[r] = out[best]
    return out


# --------------------------------------------------------------------------
# 2x2 / stride 2 max pooling on (B, C, H, W)


def maxpool_forward_np(x):
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xt = x[:, :, : ho * 2, : wo * 2].reshape(b, c, ho, 2, wo, 2)
    xt = xt.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    arg = np.argmax(xt, axis=-1).astype(np.int8)
    out = np.take_along_axis(xt, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool_backward_np(grad, arg, in_shape):
    b, c, h, w = in_shape
    ho, wo = grad.shape[2], grad.shape[3]
    g4 = np.zeros((b, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(g4, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    g = g4.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * 2, wo * 2)
    if (ho * 2, wo * 2) == (h, w):
        return g
    out = np.zeros(in_shape, dtype=grad.dtype)
    out[:, :, : ho * 2, : wo * 2] = g
    return out


@njit
def maxpool_forward_jit(x):
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    arg = np.empty((b, c, ho, wo), dtype=np.int8)
    for n in range(b):
        for k in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, k, 2 * i, 2 * j]
                    bi = 0
                    for q in range(1, 4):
                        v = x[n, k, 2 * i + q // 2, 2 * j + q % 2]
                        if v > best:
                            best = v
                            bi = q
                    out[n, k, i, j] = best
                    arg[n, k, i, j] = bi
    return out, arg


@njit
def _maxpool_backward_jit(grad, arg, out):
    b, c, ho, wo = grad.shape
    for n in range(b):
        for k in range(c):
            for i in range(ho):
                for j in range(wo):
                    q = arg[n, k, i, j]
                    out[n, k, 2 * i + q // 2, 2 * j + q % 2] = grad[n, k, i, j]
    return out


def maxpool_backward_jit(grad, arg, in_shape):
    return _maxpool_backward_jit(grad, arg, np.zeros(in_shape, dtype=grad.dtype))


# --------------------------------------------------------------------------
# ring recovery from emission order


def ring_scan_np(azimuth_deg, threshold_deg):
    if len(azimuth_deg) < 2:
        return np.zeros(len(azimuth_deg), dtype=np.int64)
    d = np.diff(azimuth_deg)
    wrapped = (d + 180.0) % 360.0 - 180.0
    direction = 1.0 if np.median(wrapped) >= 0 else -1.0
    jumps = (d * direction) < -threshold_deg
    return np.concatenate([[0], np.cumsum(jumps)]).astype(np.int64)


@njit
def ring_scan_jit(azimuth_deg, threshold_deg):
    n = azimuth_deg.shape[0]
    rings = np.zeros(n, dtype=np.int64)
    if n < 2:
        return rings
    d = np.diff(azimuth_deg)
    wrapped = (d + 180.0) % 360.0 - 180.0
    direction = 1.0 if np.median(wrapped) >= 0 else -1.0
    ring = 0
    for i in range(1, n):
        if d[i - 1] * direction < -threshold_deg:
            ring += 1
        rings[i] = ring
    return rings


# --------------------------------------------------------------------------
# ray casting against axis-aligned boxes and a horizontal ground plane


def ray_cast_np(origin, dirs, box_lo, box_hi, ground_y, max_range):
    """Nearest hit distance per ray and primitive id (-1 miss, len(boxes) ground)."""
    n = len(dirs)
    best = np.full(n, np.inf)
    hit = np.full(n, -1, dtype=np.int64)
    if len(box_lo):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (box_lo[None, :, :] - origin) * inv[:, None, :]
            t2 = (box_hi[None, :, :] - origin) * inv[:, None, :]
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        tmin = np.minimum(t1, t2).max(axis=2)
        tmax = np.maximum(t1, t2).min(axis=2)
        valid = (tmax >= tmin) & (tmax > 0)
        # rays starting inside a box hit its far face
        t = np.where(tmin > 0, tmin, tmax)
        t = np.where(valid, t, np.inf)
        j = np.argmin(t, axis=1)
        best = t[np.arange(n), j]
        hit = np.where(np.isfinite(best), j, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (ground_y - origin[1]) / dirs[:, 1]
    tg = np.where((dirs[:, 1] > 0) & (tg > 0), tg, np.inf)
    ground = tg < best
    best = np.where(ground, tg, best)
    hit = np.where(ground, len(box_lo), hit)
    miss = best > max_range
    best[miss] = np.inf
    hit[miss] = -1
    return best, hit


@njit
def ray_cast_jit(origin, dirs, box_lo, box_hi, ground_y, max_range):
    n = dirs.shape[0]
    m = box_lo.shape[0]
    best = np.full(n, np.inf)
    hit = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for j in range(m):
            tmin = -np.inf
            tmax = np.inf
            ok = True
            for a in range(3):
                da = dirs[i, a]
                if da == 0.0:
                    if origin[a] < box_lo[j, a] or origin[a] > box_hi[j, a]:
                        ok = False
                        break
                    continue
                t1 = (box_lo[j, a] - origin[a]) / da
                t2 = (box_hi[j, a] - origin[a]) / da
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
            if not ok or tmax < tmin or tmax <= 0:
                continue
            t = tmin if tmin > 0 else tmax
            if t < best[i]:
                best[i] = t
                hit[i] = j
        if dirs[i, 1] > 0:
            tg = (ground_y - origin[1]) / dirs[i, 1]
            if tg > 0 and tg < best[i]:
                best[i] = tg
                hit[i] = m
        if best[i] > max_range:
            best[i] = np.inf
            hit[i] = -1
    return best, hit


bin_accumulate = pick(bin_accumulate_jit, bin_accumulate_np)
interpolate_rows = pick(interpolate_rows_jit, interpolate_rows_np)
maxpool_forward = pick(maxpool_forward_jit, maxpool_forward_np)
maxpool_backward = pick(maxpool_backward_jit, maxpool_backward_np)
ring_scan = pick(ring_scan_jit, ring_scan_np)
ray_cast = pick(ray_cast_jit, ray_cast_np)
