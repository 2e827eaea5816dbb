"""Render one synthetic person, encode its limb maps, and read the pose back by voting.

Run: python demos/maps_and_voting.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from orientpose import extract, mapcodec, metrics, synthdata

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/maps")
cfg = synthdata.SynthConfig()
sample = synthdata.make_sample(np.random.default_rng(3), cfg)
print(f"image {sample.image.shape}, {sample.visibility.sum()} of 16 limbs visible")

# Ground-truth maps: 16 confidence + 32 2D-orientation + 48 3D-orientation channels.
maps = synthdata.sample_maps(sample, cfg)
print(f"map stack {maps.to_array().shape}")

# Voting averages each 3D orientation map under its confidence map, then FK rebuilds the joints.
est = extract.decode_pose(maps)
print(f"limb scores  min {est.scores.min():.3f}  max {est.scores.max():.3f}")
print(f"round-trip MPJPE {metrics.mpjpe(est.pose, sample.pose3d):.2e} mm")

# Drop one limb's confidence map: its vote becomes the zero sentinel and the child joint
# collapses onto its parent.
maps.conf[7] = 0
broken = extract.decode_pose(maps)
print(f"with limb 7 blanked: MPJPE {metrics.mpjpe(broken.pose, sample.pose3d):.1f} mm, "
      f"vote {np.round(broken.orients[7], 3)}")

out.mkdir(parents=True, exist_ok=True)
Image.fromarray(sample.image).resize((256, 256), Image.NEAREST).save(out / "image.png")
paths = mapcodec.dump_debug_images(synthdata.sample_maps(sample, cfg), out / "channels")
print(f"wrote image.png and {len(paths)} channel images under {out}")
