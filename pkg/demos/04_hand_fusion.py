import numpy as np

from gelhand.kinematics import (
    RIGHT, HandGeometry, HandState, finger_tip, fit_circle, forward_kinematics, inverse_kinematics, merge_clouds,
    plan_roll_trajectory, project_heightmap,
)
from gelhand.photometric import DEFAULT_RIG, reconstruct, render
from gelhand.simulator import SceneObject, enveloping_state, make_grasp_scene

geom = HandGeometry()
print("links (mm): palm %.0f, proximal %.0f, distal %.0f" % (geom.palm_len_mm, geom.proximal_len_mm,
                                                               geom.distal_len_mm))

# Forward kinematics: straight fingers, then a bent distal joint
for q in [(0, 0, 0, 0), (0, 90, 0, 90)]:
    fk = forward_kinematics(geom, HandState.from_degrees(*q))
    print("q =", q, "fingertips:", np.round(fk.fingertips, 2).tolist())

# Inverse kinematics has an elbow-up and an elbow-down answer; joint limits may rule one out
target = finger_tip(geom, RIGHT, np.radians(30), np.radians(40))
res = inverse_kinematics(geom, target, RIGHT)
print("right fingertip at", np.round(target, 2))
print("  IK inside limits:", [tuple(np.round(np.degrees(s), 2).tolist()) for s in res.solutions])
print("  IK outside limits:", [tuple(np.round(np.degrees(s), 2).tolist()) for s in res.rejected])

# Wrap both fingers around a 20 mm cylinder, then fuse the four sensor views
state = enveloping_state(geom, (0.0, 30.0), 20.0, 1.0)
obj = SceneObject("cylinder", (20.0, 100.0), center_mm=(0.0, 30.0))
clouds = []
for pose, contact in make_grasp_scene(geom, obj, state):
    rec = reconstruct(render(contact, DEFAULT_RIG), DEFAULT_RIG, contact.mm_per_px)
    clouds.append(project_heightmap(pose, rec))
    print("sensor", pose.sensor_id, "contributes", len(clouds[-1]), "points")
cloud = merge_clouds(clouds)
center, r = fit_circle(cloud.points[:, :2])
print("fitted cylinder: center", np.round(center, 3), "radius %.3f mm (true 20)" % r)

# Antipodal rolling: rotate a held 15 mm object by 0.2 rad in 5 steps
for k, s in enumerate(plan_roll_trajectory(geom, 15.0, 0.2, 5)):
    print("step", k, np.round(np.degrees(s.q), 1))
