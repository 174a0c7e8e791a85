import numpy as np
import pytest

from barl import diffcore as dc
from barl import netmodel as nm


@pytest.fixture(scope="module")
def x16():
    return np.random.default_rng(0).random((2, 1, 16, 16, 16))


def test_scales_and_softmax(x16):
    b = nm.init_branch(1)
    out = nm.forward(b, x16)
    assert [p.shape[2:] for p in out.probs] == [(2, 2, 2), (4, 4, 4), (8, 8, 8), (16, 16, 16)]
    for p in out.probs:
        assert p.shape[:2] == (2, 3)
        assert np.abs(p.data.sum(axis=1) - 1).max() < 1e-9
    assert out.rep.shape == (2, 16, 16, 16, 16)
    assert (np.linalg.norm(out.rep.data, axis=1) > 0).all()


@pytest.mark.parametrize("attach,scale,dim", [("rep0", 4, 8), ("rep1", 8, 16), ("rep2", 2, 32), ("rep3", 1, 5)])
def test_rep_attachment(x16, attach, scale, dim):
    b = nm.init_branch(0, nm.NetConfig(rep_attach=attach, rep_dim=dim))
    out = nm.forward(b, x16)
    assert out.rep_scale == scale
    assert out.rep.shape == (2, dim) + (16 // scale,) * 3


def test_indivisible_extent():
    with pytest.raises(dc.DimensionError, match="divisible by 8"):
        nm.forward(nm.init_branch(0), np.zeros((1, 1, 16, 12, 16)))
    with pytest.raises(dc.DimensionError):
        nm.forward(nm.init_branch(0), np.zeros((1, 2, 16, 16, 16)))


def test_init_determinism_and_independence(x16):
    a, a2, b = nm.init_branch(3), nm.init_branch(3), nm.init_branch(4)
    assert all(np.array_equal(a.params[k].data, a2.params[k].data) for k in a.params)
    assert any(not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert a.n_parameters() == b.n_parameters()
    assert not any(a.params[k] is b.params[k] for k in a.params)
    pa, pb = nm.forward(a, x16).full.data, nm.forward(b, x16).full.data
    assert np.abs(pa - pb).max() > 0
    assert a.params["enc1.norm.gamma"].data.tolist() == [1.0] * 8
    assert not a.params["enc1.norm.beta"].data.any()


def test_head_bias_init():
    q = np.array([0.9, 0.06, 0.04])
    b = nm.init_branch(0, head_bias=np.log(q))
    for k in range(4):
        assert np.array_equal(b.params[f"head{k}.b"].data, np.log(q))
    assert not b.params["enc1.conv.b"].data.any()


def test_zero_input_finite():
    out = nm.forward(nm.init_branch(2), np.zeros((1, 1, 8, 8, 8)))
    assert all(np.isfinite(p.data).all() for p in out.probs)
    assert np.isfinite(out.rep.data).all()


def test_forward_deterministic(x16):
    b = nm.init_branch(5)
    assert nm.forward(b, x16).full.data.tobytes() == nm.forward(b, x16).full.data.tobytes()


def test_no_attention_variant(x16):
    b = nm.init_branch(0, nm.NetConfig(attention=False))
    assert not any(k.startswith("gate") for k in b.params)
    assert nm.forward(b, x16).full.shape == (2, 3, 16, 16, 16)


def test_checkpoint_round_trip(tmp_path, x16):
    b = nm.init_branch(9, nm.NetConfig(rep_dim=7, rep_attach="rep2"))
    nm.save_branch(tmp_path / "ck", b)
    back = nm.load_branch(tmp_path / "ck")
    assert back.config == b.config
    for k in b.params:
        assert b.params[k].data.tobytes() == back.params[k].data.tobytes()
    manifest = (tmp_path / "ck.json").read_text()
    assert "barl-params-v1" in manifest and "config_hash" in manifest
    size = (tmp_path / "ck.bin").stat().st_size
    assert size == 8 * b.n_parameters()


def test_full_network_gradient_spot_check():
    """Every parameter tensor checked by central differences at sampled coordinates."""
    rng = np.random.default_rng(7)
    b = nm.init_branch(11, nm.NetConfig(rep_dim=4))
    x = rng.random((1, 1, 8, 8, 8))
    wts = [rng.standard_normal(p) for p in [(1, 3, 1, 1, 1), (1, 3, 2, 2, 2), (1, 3, 4, 4, 4), (1, 3, 8, 8, 8)]]
    wrep = rng.standard_normal((1, 4, 8, 8, 8))

    def loss():
        out = nm.forward(b, x)
        acc = dc.sum_(dc.mul(out.rep, dc.tensor(wrep)))
        for p, w in zip(out.probs, wts):
            acc = dc.add(acc, dc.sum_(dc.mul(p, dc.tensor(w))))
        return acc

    b.zero_grad()
    dc.backward(loss())
    names = sorted(b.params)
    worst, checked = 0.0, 0
    h = 1e-5
    for name in names:
        p = b.params[name]
        assert p.grad is not None, name
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            old = flat[i]
            with dc.no_grad():
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(p.grad.reshape(-1)[i] - num) / max(1.0, abs(num)))
            checked += 1
    assert checked >= 32
    assert worst < 1e-3, worst
