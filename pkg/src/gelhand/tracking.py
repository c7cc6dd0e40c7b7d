"""Marker detection and layout-aware matching.

Matching uses only the current blobs and the fabricated rest grid, so an
error in one frame can never leak into the next.  The assignment is found
by depth-first search over grid positions in row-major order:

* a blob is a candidate for position (r, c) only if it lies within
  ``max_disp`` (half a marker interval) of the rest position;
* assigned blobs keep the grid order: (r, c) stays left of (r, c+1) and
  above (r+1, c);
* a position is interpolated only when no admissible blob is left for it,
  i.e. the assignment is maximal;
* among maximal assignments the one with the smoothest flow wins
  (see :func:`flow_cost`), ties going to the lexicographically smallest
  blob-index sequence.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import FlowField, GelHandError, MarkerLayout, TactileFrame, rest_positions

SMOOTH_LAMBDA = 0.01
MAX_DISP_FRACTION = 0.5
DEFAULT_MAX_MISSING = 8
DEFAULT_SPURIOUS_ALLOWANCE = 20
MIN_BLOB_AREA = 4

NONE = -1


class TooManyMissing(GelHandError):
    pass


class TooManyBlobs(GelHandError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BlobSet:
    """Detected blob centroids (x, y) in pixels with their areas."""

    centroids: np.ndarray
    areas: np.ndarray

    def __post_init__(self):
        c = np.array(self.centroids, float).reshape(-1, 2)
        a = np.array(self.areas, float).reshape(-1)
        if len(a) != len(c):
            raise ValueError("one area per centroid required")
        if (a <= 0).any():
            raise ValueError("blob areas must be positive")
        c.flags.writeable = False
        a.flags.writeable = False
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "areas", a)

    def __len__(self):
        return len(self.centroids)

    @classmethod
    def from_points(cls, points, area=12.0) -> "BlobSet":
        points = np.asarray(points, float).reshape(-1, 2)
        return cls(points, np.full(len(points), float(area)))


@dataclass(frozen=True, eq=False)
class MatchResult:
    flow: FlowField
    assignment: np.ndarray  # (rows, cols) blob index, -1 where interpolated
    cost: float
    detected: int
    interpolated: int
    spurious: int

    def positions_px(self) -> np.ndarray:
        return self.flow.positions_px


def detect_blobs(frame: TactileFrame, dark_threshold=0.35, min_area=MIN_BLOB_AREA) -> BlobSet:
    """Dark connected components with darkness-weighted sub-pixel centroids."""
    if not 0 < dark_threshold < 1:
        raise ValueError("dark_threshold must be in (0, 1)")
    gray = frame.as_float().mean(axis=-1)
    dark = gray < dark_threshold
    labels, n = ndimage.label(dark)
    if n == 0:
        return BlobSet(np.zeros((0, 2)), np.zeros(0))
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(dark, labels, idx)
    weights = np.where(dark, dark_threshold - gray, 0.0)
    com = np.array(ndimage.center_of_mass(weights, labels, idx)).reshape(-1, 2)
    keep = areas >= min_area
    return BlobSet(com[keep][:, ::-1], areas[keep])


def marker_mask(frame: TactileFrame, dark_threshold=0.35, grow=2) -> np.ndarray:
    """Boolean image of marker pixels, grown by ``grow`` px to cover dot rims."""
    dark = frame.as_float().mean(axis=-1) < dark_threshold
    if grow > 0 and dark.any():
        dark = ndimage.binary_dilation(dark, iterations=grow)
    return dark


def fill_missing(disp, assigned) -> np.ndarray:
    """Fill unassigned grid entries from assigned ones.

    Each missing entry averages a row estimate and a column estimate; each
    is linear between the nearest assigned neighbors on either side, or a
    copy of the nearest one at the grid edge.
    """
    disp = np.array(disp, float)
    assigned = np.asarray(assigned, bool)
    if assigned.all():
        return disp
    if not assigned.any():
        return np.zeros_like(disp)
    rows, cols = assigned.shape
    out = disp.copy()
    fallback = disp[assigned].mean(axis=0)
    for r, c in zip(*np.nonzero(~assigned)):
        row_est = _line_estimate(disp[r, :], assigned[r, :], c)
        col_est = _line_estimate(disp[:, c], assigned[:, c], r)
        if row_est is not None and col_est is not None:
            out[r, c] = 0.5 * (row_est + col_est)
        elif row_est is not None:
            out[r, c] = row_est
        elif col_est is not None:
            out[r, c] = col_est
        else:
            out[r, c] = fallback
    return out


def _line_estimate(values, known, i):
    idx = np.flatnonzero(known)
    if idx.size == 0:
        return None
    lo = idx[idx < i]
    hi = idx[idx > i]
    if lo.size and hi.size:
        a, b = lo[-1], hi[0]
        t = (i - a) / (b - a)
        return (1 - t) * values[a] + t * values[b]
    return values[lo[-1]] if lo.size else values[hi[0]]


def flow_cost(disp, lam=SMOOTH_LAMBDA) -> float:
    """Squared differences over 4-neighbor adjacencies plus ``lam`` * squared magnitudes."""
    disp = np.asarray(disp, float)
    dh = disp[:, 1:] - disp[:, :-1]
    dv = disp[1:] - disp[:-1]
    return float((dh * dh).sum() + (dv * dv).sum() + lam * (disp * disp).sum())


def _order_ok(x, y, r, c, assign_xy, assigned):
    """Left-of / top-of constraints against assigned 4-neighbors."""
    rows, cols = assigned.shape
    if c > 0 and assigned[r, c - 1] and not x > assign_xy[r, c - 1, 0]:
        return False
    if c + 1 < cols and assigned[r, c + 1] and not x < assign_xy[r, c + 1, 0]:
        return False
    if r > 0 and assigned[r - 1, c] and not y > assign_xy[r - 1, c, 1]:
        return False
    if r + 1 < rows and assigned[r + 1, c] and not y < assign_xy[r + 1, c, 1]:
        return False
    return True


def prune_admissible(blob, grid_pos, partial_assignment, layout: MarkerLayout, max_disp=None,
                     partial_cost=0.0, lower_bound=0.0, best_cost=np.inf) -> bool:
    """Whether ``blob`` (x, y) may be assigned to ``grid_pos`` (r, c).

    ``partial_assignment`` maps grid positions to the (x, y) of their
    assigned blobs.  The blob must keep the grid order with assigned
    neighbors, lie within ``max_disp`` pixels of its rest position, and the
    branch must still be able to beat ``best_cost``.
    """
    r, c = grid_pos
    x, y = float(blob[0]), float(blob[1])
    get = partial_assignment.get
    left, right, up, down = get((r, c - 1)), get((r, c + 1)), get((r - 1, c)), get((r + 1, c))
    if left is not None and not x > left[0]:
        return False
    if right is not None and not x < right[0]:
        return False
    if up is not None and not y > up[1]:
        return False
    if down is not None and not y < down[1]:
        return False
    if max_disp is None:
        max_disp = MAX_DISP_FRACTION * layout.pitch_px
    rest = rest_positions(layout)[r, c]
    if np.hypot(x - rest[0], y - rest[1]) > max_disp:
        return False
    return partial_cost + lower_bound < best_cost


def _candidates(points, rest, max_disp):
    """Candidate blob indices per grid position (sorted) and per blob."""
    rows, cols = rest.shape[:2]
    flat_rest = rest.reshape(-1, 2)
    pitch = np.hypot(*(rest[min(1, rows - 1), min(1, cols - 1)] - rest[0, 0])) / np.sqrt(2)
    pos_cands = [[] for _ in range(rows * cols)]
    blob_cands = [[] for _ in range(len(points))]
    if len(points) == 0:
        return pos_cands, blob_cands
    origin = rest[0, 0]
    gc = np.rint((points[:, 0] - origin[0]) / pitch).astype(int)
    gr = np.rint((points[:, 1] - origin[1]) / pitch).astype(int)
    for b in range(len(points)):
        for dr in (-1, 0, 1):
            r = gr[b] + dr
            if r < 0 or r >= rows:
                continue
            for dc in (-1, 0, 1):
                c = gc[b] + dc
                if c < 0 or c >= cols:
                    continue
                p = r * cols + c
                d = points[b] - flat_rest[p]
                if d[0] * d[0] + d[1] * d[1] <= max_disp * max_disp:
                    pos_cands[p].append(b)
                    blob_cands[b].append(p)
    for lst in pos_cands:
        lst.sort()
    return pos_cands, blob_cands


class _Search:
    def __init__(self, points, layout, lam, max_disp):
        self.points = points
        self.layout = layout
        self.lam = lam
        self.rows, self.cols = layout.shape
        self.rest = rest_positions(layout)
        self.scale = layout.px_per_mm
        self.pos_cands, self.blob_cands = _candidates(points, self.rest, max_disp)
        n = self.rows * self.cols
        self.last_pos = [max(pc) if pc else -1 for pc in self.blob_cands]
        self.assign = np.full(n, NONE, int)
        self.assigned = np.zeros((self.rows, self.cols), bool)
        self.assign_xy = np.zeros((self.rows, self.cols, 2))
        self.disp = np.zeros((self.rows, self.cols, 2))
        self.used = np.zeros(len(points), bool)
        self.best_cost = np.inf
        self.best = None
        self.none_ok = [self._none_possible(p) for p in range(n)]

    def _none_possible(self, p):
        """Per candidate: can it still end up blocked after position p is decided?"""
        r, c = divmod(p, self.cols)
        result = {}
        for b in self.pos_cands[p]:
            x, y = self.points[b]
            blocked = any(q != p for q in self.blob_cands[b])
            if not blocked and c + 1 < self.cols:
                blocked = any(self.points[o, 0] <= x for o in self.pos_cands[p + 1])
            if not blocked and r + 1 < self.rows:
                blocked = any(self.points[o, 1] <= y for o in self.pos_cands[p + self.cols])
            result[b] = blocked
        return result

    def _pair_cost(self, r, c):
        """Cost terms between (r, c) and its already-assigned left/up neighbors."""
        d = self.disp[r, c]
        total = self.lam * float(d @ d)
        if c > 0 and self.assigned[r, c - 1]:
            e = d - self.disp[r, c - 1]
            total += float(e @ e)
        if r > 0 and self.assigned[r - 1, c]:
            e = d - self.disp[r - 1, c]
            total += float(e @ e)
        return total

    def _maximal(self, p):
        """A None at p is only legal if none of its candidates is usable."""
        r, c = divmod(p, self.cols)
        for b in self.pos_cands[p]:
            if self.used[b]:
                continue
            x, y = self.points[b]
            if _order_ok(x, y, r, c, self.assign_xy, self.assigned):
                return False
        return True

    def run(self):
        self._dfs(0, 0.0)
        return self.best, self.best_cost

    def _dfs(self, p, partial):
        n = self.rows * self.cols
        if p == n:
            for q in range(n):
                if self.assign[q] == NONE and not self._maximal(q):
                    return
            filled = fill_missing(self.disp, self.assigned)
            cost = flow_cost(filled, self.lam)
            if cost < self.best_cost:
                self.best_cost = cost
                self.best = self.assign.copy()
            return
        r, c = divmod(p, self.cols)
        must_assign = False
        for b in self.pos_cands[p]:
            if self.used[b]:
                continue
            x, y = self.points[b]
            if not _order_ok(x, y, r, c, self.assign_xy, self.assigned):
                continue
            if not self.none_ok[p][b]:
                must_assign = True
            self.assign[p] = b
            self.used[b] = True
            self.assigned[r, c] = True
            self.assign_xy[r, c] = (x, y)
            self.disp[r, c] = (self.points[b] - self.rest[r, c]) / self.scale
            inc = self._pair_cost(r, c)
            if partial + inc < self.best_cost and self._settled(p):
                self._dfs(p + 1, partial + inc)
            self.assign[p] = NONE
            self.used[b] = False
            self.assigned[r, c] = False
            self.disp[r, c] = 0.0
        if not must_assign and partial < self.best_cost and self._settled(p):
            self._dfs(p + 1, partial)

    def _settled(self, p):
        """Check maximality of the position one row up, whose neighbors are now all decided."""
        q = p - self.cols
        if q < 0 or self.assign[q] != NONE:
            return True
        for b in self.pos_cands[q]:
            if not self.used[b] and self.last_pos[b] > p:
                return True
        return self._maximal(q)


def _fast_path(points, layout, rest, max_disp):
    """Unique maximal assignment when every blob and position has at most one partner.

    Then any feasible assignment is a subset of the candidate pairing, and
    dropping a pair leaves a blob that is still admissible, so the full
    pairing is the only maximal one (provided it keeps the grid order).
    """
    rows, cols = layout.shape
    n = rows * cols
    if len(points) == 0:
        return np.full(n, NONE, int)
    origin = rest[0, 0]
    pitch = layout.pitch_px
    rel = (points - origin) / pitch
    g = np.rint(rel).astype(int)
    # only positions within one cell can qualify; distance to the second-nearest
    # grid point is at least half a pitch, so reach of max_disp < 0.5 pitch is unique
    if max_disp >= 0.5 * pitch:
        off = np.abs(rel - g)
        second = np.sqrt(np.minimum((1 - off[:, 0]) ** 2 + off[:, 1] ** 2,
                                    off[:, 0] ** 2 + (1 - off[:, 1]) ** 2)) * pitch
        if (second <= max_disp).any():
            return None
    inside = (g[:, 0] >= 0) & (g[:, 0] < cols) & (g[:, 1] >= 0) & (g[:, 1] < rows)
    gc = np.clip(g[:, 0], 0, cols - 1)
    gr = np.clip(g[:, 1], 0, rows - 1)
    d = points - rest[gr, gc]
    ok = inside & (np.einsum("ij,ij->i", d, d) <= max_disp * max_disp)
    pos = np.where(ok, gr * cols + gc, -1)
    taken = pos[ok]
    if len(np.unique(taken)) != len(taken):
        return None
    assign = np.full(n, NONE, int)
    assign[taken] = np.flatnonzero(ok)
    grid = assign.reshape(rows, cols)
    xy = np.full((rows, cols, 2), np.nan)
    xy[grid >= 0] = points[grid[grid >= 0]]
    with np.errstate(invalid="ignore"):
        bad_h = xy[:, 1:, 0] <= xy[:, :-1, 0]
        bad_v = xy[1:, :, 1] <= xy[:-1, :, 1]
    if bad_h.any() or bad_v.any():
        return None
    return assign


def match_markers(blobs: BlobSet, layout: MarkerLayout, max_missing=DEFAULT_MAX_MISSING,
                  spurious_allowance=DEFAULT_SPURIOUS_ALLOWANCE, lam=SMOOTH_LAMBDA,
                  max_disp=None) -> MatchResult:
    """Globally smoothest maximal assignment of blobs to the marker grid."""
    rows, cols = layout.shape
    n = rows * cols
    if len(blobs) > n + spurious_allowance:
        raise TooManyBlobs(f"{len(blobs)} blobs for {n} markers exceeds the spurious allowance")
    if max_disp is None:
        max_disp = MAX_DISP_FRACTION * layout.pitch_px
    raw = blobs.centroids
    # canonical order makes the result independent of input blob order
    order = np.lexsort((np.arange(len(raw)), raw[:, 0], raw[:, 1])) if len(raw) else np.zeros(0, int)
    points = raw[order]
    rest = rest_positions(layout)

    assign = _fast_path(points, layout, rest, max_disp)
    if assign is None:
        search = _Search(points, layout, lam, max_disp)
        empty = sum(1 for pc in search.pos_cands if not pc)
        if empty > max_missing:
            raise TooManyMissing(f"{empty} grid positions have no admissible blob (max {max_missing})")
        assign, _ = search.run()
        if assign is None:
            raise TooManyMissing("no assignment keeps the marker grid order")
    grid = assign.reshape(rows, cols)
    assigned = grid >= 0
    missing = int(n - assigned.sum())
    if missing > max_missing:
        raise TooManyMissing(f"{missing} grid positions have no admissible blob (max {max_missing})")
    disp = np.zeros((rows, cols, 2))
    disp[assigned] = (points[grid[assigned]] - rest[assigned]) / layout.px_per_mm
    disp = fill_missing(disp, assigned)
    out_grid = np.full((rows, cols), NONE, int)
    out_grid[assigned] = order[grid[assigned]]
    return MatchResult(
        flow=FlowField(layout, disp, assigned),
        assignment=out_grid,
        cost=flow_cost(disp, lam),
        detected=int(assigned.sum()),
        interpolated=missing,
        spurious=int(len(points) - assigned.sum()),
    )


def match_naive_previous(blobs: BlobSet, previous: FlowField, gate_px=None,
                         lam=SMOOTH_LAMBDA) -> MatchResult:
    """Greedy nearest-neighbor matching against the previous frame's markers.

    Kept only as a baseline: any mistake in ``previous`` carries forward.
    """
    layout = previous.layout
    rows, cols = layout.shape
    n = rows * cols
    if gate_px is None:
        gate_px = layout.pitch_px
    predicted = previous.positions_px.reshape(-1, 2)
    pts = blobs.centroids
    assign = np.full(n, NONE, int)
    if len(pts):
        dist = np.linalg.norm(predicted[:, None, :] - pts[None, :, :], axis=-1)
        pairs = np.argsort(dist, axis=None, kind="stable")
        used = np.zeros(len(pts), bool)
        for flat in pairs:
            p, b = divmod(int(flat), len(pts))
            if dist[p, b] > gate_px:
                break
            if assign[p] == NONE and not used[b]:
                assign[p] = b
                used[b] = True
    grid = assign.reshape(rows, cols)
    assigned = grid >= 0
    disp = np.array(previous.displacement)
    rest = rest_positions(layout)
    disp[assigned] = (pts[grid[assigned]] - rest[assigned]) / layout.px_per_mm
    return MatchResult(
        flow=FlowField(layout, disp, assigned),
        assignment=grid,
        cost=flow_cost(disp, lam),
        detected=int(assigned.sum()),
        interpolated=int(n - assigned.sum()),
        spurious=int(len(pts) - assigned.sum()),
    )


CSV_FIELDS = ("row", "col", "rest_x", "rest_y", "cur_x", "cur_y", "dx_mm", "dy_mm", "valid")


def flow_rows(flow: FlowField):
    rest = rest_positions(flow.layout)
    cur = flow.positions_px
    for r in range(flow.layout.rows):
        for c in range(flow.layout.cols):
            yield {
                "row": r,
                "col": c,
                "rest_x": f"{rest[r, c, 0]:.4f}",
                "rest_y": f"{rest[r, c, 1]:.4f}",
                "cur_x": f"{cur[r, c, 0]:.4f}",
                "cur_y": f"{cur[r, c, 1]:.4f}",
                "dx_mm": f"{flow.displacement[r, c, 0]:.6f}",
                "dy_mm": f"{flow.displacement[r, c, 1]:.6f}",
                "valid": int(flow.valid[r, c]),
            }


def write_flow_csv(path, flow) -> None:
    if isinstance(flow, MatchResult):
        flow = flow.flow
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(flow_rows(flow))


def read_flow_csv(path, layout: MarkerLayout | None = None) -> FlowField:
    """Read a flow CSV; the layout is inferred from the rest columns if not given."""
    with open(path, newline="") as f:
        records = list(csv.DictReader(f))
    if not records:
        raise ValueError(f"{path} has no flow rows")
    rows = max(int(r["row"]) for r in records) + 1
    cols = max(int(r["col"]) for r in records) + 1
    table = {(int(r["row"]), int(r["col"])): r for r in records}
    if layout is None:
        x0, y0 = float(table[0, 0]["rest_x"]), float(table[0, 0]["rest_y"])
        pitch = float(table[0, 1]["rest_x"]) - x0
        scales = [
            (float(r["cur_x"]) - float(r["rest_x"])) / float(r["dx_mm"])
            for r in records if abs(float(r["dx_mm"])) > 1e-3
        ]
        px_per_mm = float(np.median(scales)) if scales else pitch / 3.0
        layout = MarkerLayout(rows, cols, pitch / px_per_mm, (x0, y0), px_per_mm)
    disp = np.zeros((rows, cols, 2))
    valid = np.zeros((rows, cols), bool)
    for (r, c), rec in table.items():
        disp[r, c] = float(rec["dx_mm"]), float(rec["dy_mm"])
        valid[r, c] = bool(int(rec["valid"]))
    return FlowField(layout, disp, valid)
