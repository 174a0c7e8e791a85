"""Central finite differences against the reverse-mode gradients of every registered case."""
from barl import gradcheck as gc

worst = 0.0
for res in gc.run_cases(sorted(gc.ALL_CASES)):
    worst = max(worst, res.max_rel_err)
    print(f"{res.name:24s} {res.n_coords:4d} coords  max rel err {res.max_rel_err:.2e}")
print("worst %.2e" % worst)
