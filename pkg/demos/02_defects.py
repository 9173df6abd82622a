# Spotting net defects without a learned model
#
# Seeded scenes carry one to three defects each (holes, plastic, vegetation,
# biofouling). The classical detector looks for breaks in the mesh texture
# and for patches that are too bright or too dark. Annotated frames land in
# demos/out/.

import os

from netpen.detect import detect_frame
from netpen.imageio import annotate, write_ppm
from netpen.runner import evaluate_detections
from netpen.scene import CameraIntrinsics, VehicleState, defect_test_scene, ground_truth, render_frame

out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)
cam = CameraIntrinsics()
state = VehicleState(z=2.0, depth=5.0)

all_dets, all_truth = [], []
for seed in range(8):
    scene = defect_test_scene(seed)
    img = render_frame(scene, state, cam, 0)
    dets = detect_frame(img)
    gt = ground_truth(scene, state, cam)
    all_dets.append(dets)
    all_truth.append(gt)
    print(seed, "truth:", [c for c, _ in gt.visible_defects], " found:", [(d.cls, round(d.confidence, 2)) for d in dets])
    write_ppm(os.path.join(out, "defects_%02d.ppm" % seed), annotate(img, dets, thickness=2))

p, r = evaluate_detections(all_dets, all_truth, 0.3)
print("precision %.3f  recall %.3f" % (p, r))
