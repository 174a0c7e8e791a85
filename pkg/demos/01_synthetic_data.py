"""Generate a small synthetic dataset and look at one volume.

Run from the repository root:  python demos/01_synthetic_data.py
"""
import numpy as np

from barl import cc3d
from barl import volgen as vg

cfg = vg.GeneratorConfig(grid=16, n_classes=3, fragments=(2, 3))
samples = vg.generate_dataset(8, seed=0, cfg=cfg)
s = samples[0]
print("volume", s.intensity.shape, "intensity range %.2f .. %.2f" % (s.intensity.min(), s.intensity.max()))
print("class frequencies over 8 volumes:", np.round(vg.class_frequencies(samples, 3), 4))

for c in (1, 2):
    comps = cc3d.connected_components(s.label == c, 26, class_id=c)
    print(f"class {c}: {len(comps)} fragments, sizes {[m.volume for m in comps]}")

# the slice with the most lesion voxels, drawn as text
z = int(np.argmax((s.label > 0).sum((1, 2))))
print("slice", z)
for row in s.label[z]:
    print("".join(".#@"[v] for v in row))

# weak and strong views share flips, so the label moves with both
views = vg.make_views(s, seed=1)
print("weak/strong mean abs difference %.3f" % np.abs(views.weak - views.strong).mean())
