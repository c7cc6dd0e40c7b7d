"""Independent reference implementations and case generators shared by the tests."""
import itertools

import numpy as np

from gelhand.core import rest_positions
from gelhand.photometric import central_gradient
from gelhand.tracking import NONE, fill_missing, flow_cost


def brute_force(points, layout, lam=0.01):
    """Every feasible maximal assignment, scored; returns (best cost, best assignments)."""
    rows, cols = layout.shape
    rest = rest_positions(layout)
    max_disp = 0.5 * layout.pitch_px
    n = rows * cols
    cands = []
    for p in range(n):
        r, c = divmod(p, cols)
        d = np.linalg.norm(points - rest[r, c], axis=1) if len(points) else np.zeros(0)
        cands.append([b for b in range(len(points)) if d[b] <= max_disp])

    def order_ok(assign, p, b):
        r, c = divmod(p, cols)
        x, y = points[b]
        for (rr, cc), test in (((r, c - 1), lambda o: x > o[0]), ((r, c + 1), lambda o: x < o[0]),
                               ((r - 1, c), lambda o: y > o[1]), ((r + 1, c), lambda o: y < o[1])):
            if 0 <= rr < rows and 0 <= cc < cols and assign[rr * cols + cc] != NONE:
                if not test(points[assign[rr * cols + cc]]):
                    return False
        return True

    best, winners = np.inf, []
    for combo in itertools.product(*[[NONE] + c for c in cands]):
        used = [b for b in combo if b != NONE]
        if len(used) != len(set(used)):
            continue
        assign = np.array(combo)
        if not all(order_ok(assign, p, b) for p, b in enumerate(combo) if b != NONE):
            continue
        free = set(range(len(points))) - set(used)
        if any(combo[p] == NONE and any(b in free and order_ok(assign, p, b) for b in cands[p])
               for p in range(n)):
            continue  # not maximal
        grid = assign.reshape(rows, cols)
        disp = np.zeros((rows, cols, 2))
        ok = grid != NONE
        disp[ok] = (points[grid[ok]] - rest[ok]) / layout.px_per_mm
        cost = flow_cost(fill_missing(disp, ok), lam)
        if cost < best - 1e-12:
            best, winners = cost, [assign]
        elif abs(cost - best) <= 1e-12:
            winners.append(assign)
    return best, winners


def random_case(seed, layout, n_missing, n_spurious):
    rng = np.random.default_rng(seed)
    rest = rest_positions(layout)
    pitch = layout.pitch_px
    # smooth deformation: affine part plus a gentle bend
    a = rng.normal(0, 0.04, (2, 2))
    t = rng.normal(0, 0.12 * pitch, 2)
    center = rest.reshape(-1, 2).mean(axis=0)
    rel = rest - center
    disp = rel @ a.T + t + 0.05 * pitch * np.sin(rel[..., ::-1] / pitch)
    pts = (rest + disp).reshape(-1, 2)
    truth = np.arange(len(pts))
    keep = np.sort(rng.choice(len(pts), len(pts) - n_missing, replace=False))
    pts, truth = pts[keep], truth[keep]
    spur = rest.reshape(-1, 2)[rng.choice(layout.size, n_spurious)] + rng.uniform(-0.45, 0.45, (n_spurious, 2)) * pitch
    pts = np.vstack([pts, spur])
    perm = rng.permutation(len(pts))
    return pts[perm]


def smooth_map(seed, n=64, max_slope=1.0, mm_per_px=0.1):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:n, 0:n] * mm_per_px
    h = np.zeros((n, n))
    for _ in range(4):
        cx, cy = rng.uniform(0.2, 0.8, 2) * n * mm_per_px
        s = rng.uniform(0.08, 0.2) * n * mm_per_px
        h += rng.uniform(-1, 1) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    gx, gy = central_gradient(h, mm_per_px)
    return h * max_slope / np.hypot(gx, gy).max()
