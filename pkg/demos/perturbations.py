"""Apply every evaluation perturbation to one image and save the results side by side.

Run: python demos/perturbations.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from orientpose import perturb, synthdata, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/perturb")
out.mkdir(parents=True, exist_ok=True)
image = synthdata.make_sample(np.random.default_rng(11), synthdata.SynthConfig()).image

tiles = []
for i, spec in enumerate(train.default_eval_perturbations()):
    img, _, params = perturb.apply(spec, image, perturb.item_rng(5, i))
    shown = {k: v for k, v in params.items() if k in ("offset", "radius", "edge", "width", "count")}
    print(f"{spec.name:<16} {shown}")
    tiles.append(img)

strip = np.concatenate(tiles, axis=1)
Image.fromarray(strip).resize((strip.shape[1] * 2, strip.shape[0] * 2), Image.NEAREST).save(out / "strip.png")
print(f"wrote {out / 'strip.png'}")
