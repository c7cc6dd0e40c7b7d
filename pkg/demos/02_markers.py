import numpy as np

from gelhand.core import PROXIMAL_LAYOUT, FlowField, rest_positions
from gelhand.photometric import DEFAULT_RIG
from gelhand.simulator import AppliedLoad, SceneObject, displace_markers, indent
from gelhand.tracking import BlobSet, detect_blobs, match_markers, match_naive_previous

# Contact patch plus a sideways drag and a small twist
contact = indent(SceneObject("sphere", (15.0,), depth_mm=1.5))
scene = displace_markers(PROXIMAL_LAYOUT, AppliedLoad(shear=(0.25, 0.1), twist=0.01), contact, DEFAULT_RIG)

blobs = detect_blobs(scene.frame)
print("detected", len(blobs), "of", PROXIMAL_LAYOUT.size, "markers")

# Matching is always against the fabricated rest grid, never the previous frame
match = match_markers(blobs, PROXIMAL_LAYOUT)
err = np.linalg.norm(match.flow.positions_px - scene.positions_px, axis=-1)
print("position error (px): max %.3f, mean %.3f" % (err.max(), err.mean()))

# Knock out four markers: they come back as interpolated entries
pts = np.delete(blobs.centroids, [10, 40, 77, 120], axis=0)
partial = match_markers(BlobSet.from_points(pts), PROXIMAL_LAYOUT)
print("detected", partial.detected, "interpolated", partial.interpolated, "cost %.4f" % partial.cost)

# Why not track frame to frame?  Pretend one earlier frame swapped two
# neighbors; a tracker seeded by its previous answer never recovers.
rest = rest_positions(PROXIMAL_LAYOUT).reshape(-1, 2)
a, b = 4 * 17 + 7, 4 * 17 + 8
disp = np.zeros(PROXIMAL_LAYOUT.shape + (2,))
disp.reshape(-1, 2)[a] = (rest[b] - rest[a]) / PROXIMAL_LAYOUT.px_per_mm
disp.reshape(-1, 2)[b] = -disp.reshape(-1, 2)[a]
prev = FlowField(PROXIMAL_LAYOUT, disp)
for k in range(1, 4):
    blobs_k = BlobSet.from_points(rest + [0.5 * k, 0.0])
    naive = match_naive_previous(blobs_k, prev)
    prev = naive.flow
    ours = match_markers(blobs_k, PROXIMAL_LAYOUT)
    print("frame", k, "| naive swap still there:", naive.assignment.ravel()[a] == b,
          "| rest-grid matcher correct:", np.array_equal(ours.assignment.ravel(), np.arange(153)))
