# Range and heading from one camera frame
#
# Render the net from a few standoff distances and read the distance back
# off the two vertical ropes. Then turn the vehicle and recover the yaw from
# the slope of the horizontal mesh twine.

import numpy as np

from netpen.scene import CameraIntrinsics, SceneConfig, VehicleState, build_scene, render_frame
from netpen.vision import perceive

cam = CameraIntrinsics()
scene = build_scene(SceneConfig(defects=()))

# In[1]: distance sweep

print("  z true   z est   spacing px")
for z in [1.0, 1.5, 2.0, 3.0, 4.0]:
    img = render_frame(scene, VehicleState(z=z, depth=3.0), cam, 0)
    p = perceive(img, cam, scene.rope_spacing, with_yaw=False)
    print("%8.2f %7.3f %10.1f" % (z, p.observation.distance_est, p.observation.pixel_spacing))

# In[2]: yaw sweep, 10 noisy frames each

for yaw in [-0.2, -0.1, 0.0, 0.1, 0.2]:
    ests = []
    for k in range(10):
        img = render_frame(scene, VehicleState(z=2.0, depth=3.0 + 0.3 * k, yaw=yaw), cam, k)
        ests.append(perceive(img, cam, scene.rope_spacing).yaw_est)
    ests = np.array([np.nan if e is None else e for e in ests])
    print("yaw %+.2f  median est %+.4f  spread %.4f" % (yaw, np.nanmedian(ests), np.nanstd(ests)))
