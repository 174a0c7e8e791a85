"""Train briefly, save a checkpoint, reload it and compare inference modes."""
import tempfile
from pathlib import Path

from barl import trainer as tr

cfg = tr.TrainConfig(epochs=30, warmup_epochs=3, rampup_epochs=10, eval_every=0, seed=1)
data = tr.build_data(cfg)
with tempfile.TemporaryDirectory() as d:
    tr.train(cfg, Path(d) / "run", data=data)
    state = tr.load_state(Path(d) / "run" / "checkpoints" / "last")

for mode in ("S", "T", "ensemble"):
    rep = tr.evaluate(state, data.test, mode=mode)
    per = ", ".join(f"c{c} {rep.dice[c]:.3f}" for c in rep.classes)
    print(f"{mode:8s} dice {rep.mean_dice:.3f} ({per})  jaccard {rep.mean_jaccard:.3f}  "
          f"hd95 {rep.mean_hd95:.2f}  asd {rep.mean_asd:.2f}")
