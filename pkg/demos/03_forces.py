from gelhand import forces
from gelhand.core import PROXIMAL_LAYOUT
from gelhand.photometric import DEFAULT_RIG
from gelhand.simulator import AppliedLoad, SceneObject, displace_markers, indent
from gelhand.tracking import detect_blobs, match_markers

# A flat pad covering the whole sensor, so every marker feels the load
pad = indent(SceneObject("box", (100.0, 100.0, 5.0), depth_mm=0.5))

loads = {
    "at rest": AppliedLoad(),
    "drag right": AppliedLoad(shear=(0.3, 0.0)),
    "twist": AppliedLoad(twist=0.03),
    "drag + twist": AppliedLoad(shear=(0.09, 0.0), twist=0.03),
}
for name, load in loads.items():
    frame = displace_markers(PROXIMAL_LAYOUT, load, pad, DEFAULT_RIG).frame
    flow = match_markers(detect_blobs(frame), PROXIMAL_LAYOUT).flow
    s = forces.classify(flow)
    print("%-13s shear %.3f  torsion %.3f  -> %s" % (name, s.shear_score, s.torsion_score, s.regime))

# Rigid rotation by w has curl 2w everywhere
frame = displace_markers(PROXIMAL_LAYOUT, AppliedLoad(twist=0.01), pad, DEFAULT_RIG).frame
flow = match_markers(detect_blobs(frame), PROXIMAL_LAYOUT).flow
print("applied twist 0.0100 rad, recovered %.4f rad" % forces.rotation_estimate(flow))
