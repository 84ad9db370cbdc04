"""Independent reference implementations used by the tests.

Everything here is written as plain loops over Python floats and avoids the
package's own helpers (no spatial index, no vectorised projection), so that
agreement with the library is evidence rather than tautology.
"""

import math

import numpy as np


def scalar_spherical(x, y, z):
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        return 0.0, 0.0, 0.0
    az = math.atan2(y, x)
    if az >= math.pi:
        az -= 2 * math.pi
    el = math.asin(max(-1.0, min(1.0, z / r)))
    return r, az, el


def pixel_of(x, y, z, meta, height, width):
    _, az, el = scalar_spherical(x, y, z)
    up = math.radians(meta.fov_up_deg)
    fov = up - math.radians(meta.fov_down_deg)
    row = math.floor((up - el) / fov * height)
    col = math.floor((az + math.pi) / (2 * math.pi) * width)
    return min(max(row, 0), height - 1), min(max(col, 0), width - 1)


def project_loops(cloud, height=None, width=None):
    """Nearest-wins projection; returns (owner dict pixel -> index, pixel of each point)."""
    meta = cloud.meta
    height = height or meta.channels
    width = width or meta.horiz_steps
    owner, pix = {}, []
    for i in range(len(cloud)):
        x, y, z = (float(v) for v in cloud.xyz[i])
        r = scalar_spherical(x, y, z)[0]
        px = pixel_of(x, y, z, meta, height, width)
        pix.append(px)
        if r == 0.0:
            continue
        cur = owner.get(px)
        if cur is None or (r, i) < (cur[0], cur[1]):
            owner[px] = (r, i)
    return {k: v[1] for k, v in owner.items()}, pix


def sobel_edges_loops(range_img, valid, base, gain, dilation):
    """Pairwise-valid Sobel on the range image, thresholded then dilated."""
    h, w = len(range_img), len(range_img[0])

    def ok(r, c):
        return 0 <= r < h and 0 <= c < w and valid[r][c]

    edges = [[False] * w for _ in range(h)]
    for r in range(h):
        for c in range(w):
            if not valid[r][c]:
                continue
            gx = gy = 0.0
            for off, wgt in ((-1, 1.0), (0, 2.0), (1, 1.0)):
                if ok(r + off, c + 1) and ok(r + off, c - 1):
                    gx += wgt * (range_img[r + off][c + 1] - range_img[r + off][c - 1])
                if ok(r + 1, c + off) and ok(r - 1, c + off):
                    gy += wgt * (range_img[r + 1][c + off] - range_img[r - 1][c + off])
            if math.hypot(gx, gy) > base * (1.0 + gain * range_img[r][c]):
                edges[r][c] = True
    if dilation > 0:
        grown = [[False] * w for _ in range(h)]
        for r in range(h):
            for c in range(w):
                if edges[r][c]:
                    for dr in range(-dilation, dilation + 1):
                        for dc in range(-dilation, dilation + 1):
                            if 0 <= r + dr < h and 0 <= c + dc < w:
                                grown[r + dr][c + dc] = True
        edges = grown
    return edges


def algorithm1(cloud, cfg):
    """Straight-line pseudo-labelling; returns (snow set, dict of stage sets)."""
    meta = cloud.meta
    h, w = meta.channels, meta.horiz_steps
    limit = meta.snow_sense_limit_m if cfg.snow_sense_limit_m is None else cfg.snow_sense_limit_m
    ground = -(meta.mount_height_m - cfg.ground_margin_m)
    n = len(cloud)
    pts = [tuple(float(v) for v in cloud.xyz[i]) for i in range(n)]
    inten = [float(v) for v in cloud.intensity]
    refl = [float(v) for v in cloud.reflectivity]
    rng = [scalar_spherical(*p)[0] for p in pts]

    owner, pix = project_loops(cloud)
    range_img = [[0.0] * w for _ in range(h)]
    valid = [[False] * w for _ in range(h)]
    for (r, c), i in owner.items():
        range_img[r][c] = rng[i]
        valid[r][c] = True
    edges = sobel_edges_loops(range_img, valid, cfg.grad_threshold_base,
                              cfg.range_weighting_gain, cfg.dilation_px)

    c1 = set()
    for i in range(n):
        # the limit is compared at float32 storage precision
        if float(np.float32(rng[i])) > float(np.float32(limit)) or float(np.float32(pts[i][2])) <= float(np.float32(ground)):
            continue
        d = max(rng[i], 1e-9)
        if inten[i] <= max(cfg.I_min, cfg.I0 * (cfg.d0 / d) ** cfg.exponent):
            c1.add(i)
    c2 = {i for i in c1 if abs(refl[i]) <= cfg.reflectivity_eps}
    c3 = {i for i in c2 if not edges[pix[i][0]][pix[i][1]]}
    c4 = set()
    for i in c3:
        d = max(rng[i], 1e-9)
        rad = max(cfg.r_min, cfg.radius_gain * rng[i])
        need = max(cfg.n_min, math.floor(cfg.density_a / d + 0.5))
        xi, yi, zi = pts[i]
        count = 0
        for j in range(n):
            if j == i:
                continue
            dx, dy, dz = pts[j][0] - xi, pts[j][1] - yi, pts[j][2] - zi
            if dx * dx + dy * dy + dz * dz <= rad * rad:
                count += 1
        if count < need:
            c4.add(i)
    return c4, {"cond1": c1, "cond2": c2, "cond3": c3, "cond4": c4}


def brute_radius_count(xyz, q, r, exclude=-1):
    xyz = np.asarray(xyz, dtype=np.float64)
    count = 0
    for j, p in enumerate(xyz):
        if j == exclude:
            continue
        dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
        if dx * dx + dy * dy + dz * dz <= r * r:
            count += 1
    return count


def brute_knn(xyz, q, k, exclude=-1):
    """k nearest (index, distance) pairs ordered by (distance, index)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    items = []
    for j, p in enumerate(xyz):
        if j == exclude:
            continue
        dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
        items.append((dx * dx + dy * dy + dz * dz, j))
    items.sort()
    return [j for _, j in items[:k]], [math.sqrt(d2) for d2, _ in items[:k]]


def finite_difference(f, arrays, eps=1e-6, max_coords=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. entries of each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.full(a.shape, np.nan)
        flat = a.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        gflat = g.reshape(-1)
        for c in coords:
            old = flat[c]
            flat[c] = old + eps
            up = f()
            flat[c] = old - eps
            down = f()
            flat[c] = old
            gflat[c] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    """Relative error over the coordinates the numeric gradient covers."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / scale)


def confusion_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred, gt):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def two_pass_mean_std(values):
    n = len(values)
    m = sum(values) / n
    return m, math.sqrt(sum((v - m) ** 2 for v in values) / n)
