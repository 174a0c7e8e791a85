"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[ACCEPT n] PASS|FAIL ...`` line (visible with
``pytest -s`` or in the captured output of a failure).
"""
import csv
import math
import time

import numpy as np
import pytest

from barl import alignlabel as al
from barl import alignrep as ar
from barl import cc3d
from barl import cli
from barl import diffcore as dc
from barl import gradcheck as gc
from barl import metrics as mt
from barl import netmodel as nm
from barl import trainer as tr

import oracles


def report(n, ok, detail):
    print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def _network_fd_worst(seed=7, per_param=2, h=1e-5):
    rng = np.random.default_rng(seed)
    b = nm.init_branch(seed, nm.NetConfig(rep_dim=4))
    x = rng.random((1, 1, 8, 8, 8))
    outs = nm.forward(b, x)
    wts = [rng.standard_normal(p.shape) for p in outs.probs]
    wrep = rng.standard_normal(outs.rep.shape)

    def loss():
        out = nm.forward(b, x)
        acc = dc.sum_(dc.mul(out.rep, dc.tensor(wrep)))
        for p, w in zip(out.probs, wts):
            acc = dc.add(acc, dc.sum_(dc.mul(p, dc.tensor(w))))
        return acc

    b.zero_grad()
    dc.backward(loss())
    worst, n = 0.0, 0
    for name in sorted(b.params):
        p = b.params[name]
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[i]
            with dc.no_grad():
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, float(gc.rel_err(np.array([p.grad.reshape(-1)[i]]), np.array([num]))[0]))
            n += 1
    return worst, n


def test_gradient_suite():
    t0 = time.perf_counter()
    results = gc.run_cases(sorted(gc.ALL_CASES))
    op_worst = max(r.max_rel_err for r in results)
    net_worst, n_net = _network_fd_worst()
    elapsed = time.perf_counter() - t0
    ok = op_worst < 1e-4 and net_worst < 1e-3 and elapsed < 120
    failing = [r.name for r in results if not r.passed(1e-4)]
    assert report(1, ok, f"{len(results)} op/loss cases worst {op_worst:.2e}, network {n_net} coords "
                         f"worst {net_worst:.2e}, {elapsed:.1f}s {failing or ''}")


def test_connected_components_oracle():
    rng = np.random.default_rng(2024)
    mismatches, monotone = 0, True
    for _ in range(300):
        mask = rng.random((8, 8, 8)) < rng.uniform(0.1, 0.6)
        counts = {}
        for conn in (6, 18, 26):
            got = {frozenset(int(v) for v in m.voxels) for m in cc3d.connected_components(mask, conn)}
            ref = oracles.bfs_components(mask, conn)
            counts[conn] = len(got)
            if got != set(ref) or len(ref) != len(got):
                mismatches += 1
        monotone &= counts[26] <= counts[18] <= counts[6]
    assert report(2, mismatches == 0 and monotone,
                  f"900 labelings, {mismatches} partition mismatches, monotone={monotone}")


def _probs(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def test_loss_identities():
    rng = np.random.default_rng(3)
    checks = {}
    p = dc.tensor(_probs(rng, (2, 3, 4, 4, 4)))
    scales = [dc.tensor(_probs(rng, (2, 3, s, s, s))) for s in (1, 2, 4, 8)]

    f = dc.tensor(rng.standard_normal((1, 4, 8, 8, 8)))
    lab = rng.integers(0, 3, (8, 8, 8))
    lab[:3, :3, :3] = 1
    lab[5:, 5:, 5:] = 2
    checks["region"] = ar.region_loss(ar.region_prototypes(f, f, lab, lab, [0, 1, 2])).value.item()
    checks["instance"] = ar.instance_loss(
        ar.instance_prototypes(f, f, lab, [1, 2], 26, 1)).value.item()
    for tools, (dt, _) in al.TOOL_VARIANTS.items():
        checks[f"distr[{tools}]"] = al.distr_loss(scales, scales, 0.5, dt).item()
    checks["ent-lnC"] = al.entropy_loss(dc.tensor(np.full((1, 3, 4, 4, 4), 1 / 3))).item() - math.log(3)
    q = al.PriorDistribution.from_frequencies(p.data.mean((0, 2, 3, 4)))
    checks["kl"] = al.kl_prior_loss(p, q).item()
    y = al.onehot(rng.integers(0, 3, (2, 4, 4, 4)), 3)
    checks["pcbc"] = al.pcbc_loss(p, p, y).item()
    checks["soften"] = float(np.abs(al.soften(p, 1.0).data - p.data).max())
    tol = 1e-9
    worst_id = max(abs(v) for v in checks.values())

    # recomposition of the logged total from the logged components
    cfg = tr.TrainConfig.from_mapping(dict(n_samples=10, n_test=2, label_ratio=0.2, epochs=3,
                                           warmup_epochs=1, seed=1))
    data = tr.build_data(cfg)
    state = tr.init_state(cfg, data.prior)
    recomp = 0.0
    for batch in tr.epoch_batches(cfg, data, 0) + tr.epoch_batches(cfg, data, 1):
        rep = tr.train_step(batch, state, data)
        v = rep.values
        dpr = (v["distr"] * rep.weights["distr"] + v["cps"] * rep.weights["cps"]
               + v["ent"] * rep.weights["ent"] + v["kl"] * rep.weights["kl"])
        total = (rep.weights["region"] * v["region"] + rep.weights["instance"] * v["instance"]
                 + dpr + v["pcbc"] + v["seg"])
        recomp = max(recomp, abs(total - rep.total))
    ok = worst_id < tol and recomp < 1e-12
    assert report(3, ok, f"identities worst {worst_id:.1e} ({len(checks)} checks), recomposition {recomp:.1e}")


def test_metric_oracles():
    rng = np.random.default_rng(11)
    ones, zeros = np.ones((4, 4, 4), int), np.zeros((4, 4, 4), int)
    a = np.zeros((1, 1, 4), int)
    b = np.zeros((1, 1, 4), int)
    a[0, 0, :2] = 1
    b[0, 0, 1:3] = 1
    closed = [
        mt.dice_jaccard(ones, ones, 1) == (1.0, 1.0),
        mt.dice_jaccard(zeros, ones, 1) == (0.0, 0.0),
        mt.dice_jaccard(zeros, zeros, 1) == (1.0, 1.0),
        mt.dice_jaccard(a, b, 1) == (0.5, 1 / 3),
    ]
    hd_err = asd_err = ident_err = 0.0
    for _ in range(100):
        pa = rng.random((12, 12, 12)) < rng.uniform(0.02, 0.3)
        pb = rng.random((12, 12, 12)) < rng.uniform(0.02, 0.3)
        pa[6, 6, 6] = pb[5, 5, 5] = True
        hd95, asd = oracles.all_pairs_surface(pa, pb)
        got_hd, got_asd = mt.surface_distances(pa, pb, True)
        hd_err = max(hd_err, abs(got_hd - hd95))
        asd_err = max(asd_err, abs(got_asd - asd))
        d, j = mt.dice_jaccard(pa, pb, True)
        ident_err = max(ident_err, abs(d - 2 * j / (1 + j)))
    ok = all(closed) and hd_err == 0.0 and asd_err < 1e-12 and ident_err < 1e-9
    assert report(4, ok, f"closed forms {sum(closed)}/{len(closed)}, 100 pairs: HD95 err {hd_err:.1e}, "
                         f"ASD err {asd_err:.1e}, 2J/(1+J) err {ident_err:.1e}")


def _final_dice(cfg):
    state = tr.train(cfg, data=tr.build_data(cfg))
    return state.history[-1]["val_dice_mean"]


@pytest.mark.slow
def test_desk_scale_end_to_end():
    seeds = range(5)
    t0 = time.perf_counter()
    sup = [_final_dice(tr.TrainConfig(preset="supervised", seed=s, eval_every=0)) for s in seeds]
    barl = [_final_dice(tr.TrainConfig(preset="barl", seed=s, eval_every=0)) for s in seeds]
    elapsed = time.perf_counter() - t0
    no_rep = [_final_dice(tr.TrainConfig(preset="no_rep", seed=s, eval_every=0)) for s in seeds]
    gain = float(np.mean(barl) - np.mean(sup))
    rep_delta = float(np.mean(barl) - np.mean(no_rep))
    fmt = lambda v: "[" + " ".join(f"{x:.3f}" for x in v) + "]"
    print(f"\nsupervised {fmt(sup)} mean {np.mean(sup):.4f}")
    print(f"barl       {fmt(barl)} mean {np.mean(barl):.4f}")
    print(f"no_rep     {fmt(no_rep)} mean {np.mean(no_rep):.4f}")
    # the representation-alignment ordering is reported, not enforced
    print(f"directional ablation barl - no_rep = {rep_delta:+.4f} ({'holds' if rep_delta >= 0 else 'reversed'})")
    ok = gain >= 0.02 and elapsed <= 20 * 60
    assert report(5, ok, f"barl - supervised = {gain:+.4f} (need >= 0.02), runtime {elapsed / 60:.1f} min")


def test_determinism(tmp_path):
    kw = dict(n_samples=10, n_test=2, label_ratio=0.2, epochs=4, warmup_epochs=1, seed=9)
    cfg = tr.TrainConfig.from_mapping(kw)
    tr.train(cfg, tmp_path / "a")
    tr.train(cfg, tmp_path / "b")
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    tr.train(cfg, tmp_path / "c", stop_after_epoch=2)
    state = tr.load_state(tmp_path / "c" / "checkpoints" / "last")
    resumed = tr.train(cfg, tmp_path / "c", state=state)
    full = tr.train(cfg, tmp_path / "d")
    params_equal = all(resumed.branch_s.params[k].data.tobytes() == full.branch_s.params[k].data.tobytes()
                       and resumed.branch_t.params[k].data.tobytes() == full.branch_t.params[k].data.tobytes()
                       for k in full.branch_s.params)
    csv_equal = (tmp_path / "c" / "metrics.csv").read_bytes() == (tmp_path / "d" / "metrics.csv").read_bytes()
    ok = same and params_equal and csv_equal
    assert report(6, ok, f"identical manifests -> identical CSV {same}; resume CSV {csv_equal}, "
                         f"params {params_equal}")


GRIDS = {
    "tools": "tools=mse+ce,mse+dice,kl+dice,kl+ce",
    "align_source": "align_source=labeled,unlabeled,all",
    "rep_attach": "rep_attach=rep0,rep1,rep2,rep3",
    "rep_dim": "rep_dim=4,8,16,32",
}
SUMMARY_COLS = ["cell", "n_runs", "n_ok", "status"] + [
    f"val_{m}_mean{s}" for m in ("dice", "jaccard", "hd95", "asd") for s in ("", "_std")]


def test_ablation_axes(tmp_path):
    tiny = ["--n_samples=8", "--n_test=2", "--label_ratio=0.25", "--epochs=1", "--warmup_epochs=0",
            "--steps_per_epoch=1"]
    problems = []
    for axis, grid in GRIDS.items():
        out = tmp_path / axis
        rc = cli.main(["ablate", "--grid", grid, "--seeds", "2", "--out", str(out)] + tiny)
        values = grid.split("=")[1].split(",")
        rows = list(csv.DictReader(open(out / "summary.csv")))
        if rc != 0:
            problems.append(f"{axis}: exit {rc}")
        if [r[axis] for r in rows] != values:
            problems.append(f"{axis}: cells {[r[axis] for r in rows]}")
        for r in rows:
            missing = [c for c in SUMMARY_COLS if c not in r]
            if missing or r["status"] != "ok" or r["n_ok"] != "2" or not math.isfinite(float(r["val_dice_mean"])):
                problems.append(f"{axis}={r[axis]}: {missing or r['status']}")
    assert report(7, not problems, f"{len(GRIDS)} axes, "
                                   f"{sum(len(g.split(',')) for g in GRIDS.values())} cells x 2 seeds "
                                   f"{problems or 'all well-formed'}")
