"""Independent per-pixel reference for ETDRS sector statistics."""

import math


def pixel_sector(x, z, center, scales, diameters, eye):
    dx = (x - center[0]) * scales[0]
    dz = (z - center[1]) * scales[1]
    r = math.hypot(dx, dz)
    d1, d2, d3 = diameters
    # compare squared radii like the implementation would on the boundary
    r2 = dx * dx + dz * dz
    if r2 <= (d1 / 2) ** 2:
        return 1
    if r2 > (d3 / 2) ** 2:
        return 0
    base = 2 if r2 <= (d2 / 2) ** 2 else 6
    if abs(dz) >= abs(dx):
        q = 0 if dz > 0 else 2
    else:
        nasal = dx if eye == "right" else -dx
        q = 1 if nasal > 0 else 3
    assert r >= 0
    return base + q


def brute_force_stats(values, center, scales, diameters, eye):
    nx, nz = values.shape
    groups = {s: [] for s in range(1, 10)}
    for x in range(nx):
        for z in range(nz):
            s = pixel_sector(x, z, center, scales, diameters, eye)
            if s:
                groups[s].append(float(values[x, z]))
    out = {}
    for s, g in groups.items():
        if not g:
            out[s] = (None, None, 0)
            continue
        mean = math.fsum(g) / len(g)
        mean += math.fsum(v - mean for v in g) / len(g)
        sd = math.sqrt(math.fsum((v - mean) * (v - mean) for v in g) / len(g))
        out[s] = (mean, sd, len(g))
    return out
