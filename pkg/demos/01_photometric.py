import numpy as np

from gelhand.core import HeightMap
from gelhand.photometric import DEFAULT_RIG, build_lut, poisson_integrate, recover_gradients, render
from gelhand.simulator import SceneObject, indent

# A 10 mm ball pressed 1.5 mm into the gel, seen at 0.2 mm per pixel
contact = indent(SceneObject("sphere", (10.0,), depth_mm=1.5))
print("true depth range (mm):", contact.h.min(), contact.h.max())

# Three colored lights, one per RGB channel
frame = render(contact, DEFAULT_RIG)
print("frame:", frame.width, "x", frame.height, "pixels, mean RGB", frame.image.reshape(-1, 3).mean(axis=0))

# Per-pixel normals from the three intensities, then integrate the gradients
grad = recover_gradients(frame, DEFAULT_RIG)
rec = poisson_integrate(grad, contact.mm_per_px)

# Heights are only known up to a constant, so compare after removing the mean
err = (rec.h - rec.h.mean()) - (contact.h - contact.h.mean())
print("reconstruction RMSE (mm): %.4f" % np.sqrt(np.mean(err ** 2)))
print("recovered peak depth (mm): %.3f" % np.ptp(rec.h))

# The lookup-table variant is calibrated on a ball of known radius
lut = build_lut(DEFAULT_RIG)
g_lut = lut.recover(frame)
print("LUT vs linear solve, median |dgx|: %.4f" % np.median(np.abs(g_lut.gx - grad.gx)))
rec_lut = poisson_integrate(g_lut, contact.mm_per_px)
print("LUT peak depth (mm): %.3f" % np.ptp(rec_lut.h))
