"""Train both branches for a few epochs and print the loss breakdown.

A short run (about a minute on one core). Compare against the supervised
preset by passing ``supervised`` as the first argument.
"""
import sys

from barl import trainer as tr

preset = sys.argv[1] if len(sys.argv) > 1 else "barl"
cfg = tr.TrainConfig(preset=preset, epochs=20, warmup_epochs=2, rampup_epochs=6, eval_every=5, seed=0)
data = tr.build_data(cfg)
print(f"{len(data.labeled)} labeled, {len(data.unlabeled)} unlabeled, {len(data.test)} held out")


def show(row):
    parts = " ".join(f"{k[5:]}={row[k]:.3f}" for k in row if k.startswith("loss_"))
    dice = f" dice={row['val_dice_mean']:.3f}" if "val_dice_mean" in row else ""
    print(f"epoch {row['epoch']:3d} lr={row['lr']:.4f} {parts}{dice}")


state = tr.train(cfg, data=data, log=show)
print("final held-out lesion Dice: %.3f" % state.history[-1]["val_dice_mean"])
