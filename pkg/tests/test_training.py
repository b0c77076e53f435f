import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpdnet import network as N
from lpdnet import tensor as T
from lpdnet import training as TR
from lpdnet.gradcheck import toy_config
from lpdnet.pointcloud import downsample_random, generate_synthetic_place
from lpdnet.training import LossConfig, PlaceRegistry, Quadruplet, SamplingError, lazy_quadruplet_loss

from oracles import lazy_quadruplet


def _registry(places=50, obs=5):
    return PlaceRegistry.from_labels([p for p in range(places) for _ in range(obs)])


def test_loss_examples():
    assert lazy_quadruplet_loss([0.1, 0.1], [2.0] * 18, [2.0] * 18) == 0.0
    got = lazy_quadruplet_loss([0.5, 0.8], [0.6, 1.2], [0.7, 0.9], LossConfig(0.5, 0.2))
    assert got == 0.4
    with pytest.raises(ValueError):
        lazy_quadruplet_loss([], [1.0], [1.0])
    with pytest.raises(ValueError):
        LossConfig(0.0, 0.2)


dist = st.floats(0, 4, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(dist, min_size=1, max_size=4), st.lists(dist, min_size=1, max_size=18),
       st.lists(dist, min_size=1, max_size=18), st.randoms(use_true_random=False))
def test_loss_properties(d_pos, d_neg, d_other, rnd):
    loss = lazy_quadruplet_loss(d_pos, d_neg, d_other)
    assert loss >= 0
    assert loss == pytest.approx(lazy_quadruplet(d_pos, d_neg, d_other, 0.5, 0.2), abs=1e-15)
    perm_neg, perm_pos = list(d_neg), list(d_pos)
    rnd.shuffle(perm_neg)
    rnd.shuffle(perm_pos)
    assert lazy_quadruplet_loss(perm_pos, perm_neg, d_other) == loss
    # pushing every negative closer never lowers the loss
    closer = [max(d - 0.3, 0.0) for d in d_neg]
    assert lazy_quadruplet_loss(d_pos, closer, d_other) >= loss


def test_loss_tensor_matches_scalar(rng):
    desc = rng.normal(size=(8, 5))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    q = Quadruplet(0, (1, 2), (3, 4, 5, 6), 7)
    slot = {i: i for i in range(8)}
    got = float(TR.quadruplet_loss_tensor(T.Tensor(desc), [q], slot).data)
    sq = lambda a, b: float(((desc[a] - desc[b]) ** 2).sum())
    ref = lazy_quadruplet([sq(0, 1), sq(0, 2)], [sq(0, n) for n in (3, 4, 5, 6)],
                          [sq(7, n) for n in (3, 4, 5, 6)], 0.5, 0.2)
    assert got == pytest.approx(ref, abs=1e-14)


def test_sampling_insufficient():
    with pytest.raises(SamplingError, match="insufficient negatives"):
        TR.sample_quadruplets(_registry(places=2), 1, seed=0)
    with pytest.raises(SamplingError, match="insufficient"):
        TR.sample_quadruplets(_registry(places=30, obs=2), 1, seed=0)


def test_sampling_determinism():
    reg = _registry()
    assert TR.sample_quadruplets(reg, 16, seed=7) == TR.sample_quadruplets(reg, 16, seed=7)
    assert TR.sample_quadruplets(reg, 16, seed=7) != TR.sample_quadruplets(reg, 16, seed=8)


def test_sampling_disjointness_audit():
    reg = _registry()
    place = reg.places
    quads = list(itertools.chain.from_iterable(TR.sample_quadruplets(reg, 50, seed=s) for s in range(20)))
    assert len(quads) == 1000
    for q in quads:
        assert len(q.positives) == 2 and len(q.negatives) == 18
        assert all(place[p] == place[q.anchor] and p != q.anchor for p in q.positives)
        neg_places = [place[n] for n in q.negatives]
        assert place[q.anchor] not in neg_places
        assert len(set(neg_places)) == 18
        assert place[q.other_negative] not in {place[m] for m in q.members[:-1]}


def test_registry_from_positions():
    pos = np.array([[0, 0], [10, 0], [30, 0], [200, 0], [210, 0]], dtype=float)
    reg = PlaceRegistry.from_positions(pos, 25.0)
    assert reg.positive[0, 1] and not reg.positive[0, 2] and reg.positive[1, 2]
    assert reg.places.tolist() == [0, 0, 0, 1, 1]


def _toy_data(places=20, obs=3):
    cfg = toy_config()
    prepared = [N.prepare_cloud(downsample_random(generate_synthetic_place(p, o, 64), 32, o), cfg)
                for p in range(places) for o in range(obs)]
    return cfg, prepared, PlaceRegistry.from_labels([p for p in range(places) for _ in range(obs)])


@pytest.fixture(scope="module")
def toy_data():
    return _toy_data()


def test_lr_zero_is_null_update(toy_data):
    cfg, prepared, reg = toy_data
    store = N.init_params(cfg, 0)
    before = {k: v.copy() for k, v in store.values().items()}
    res = TR.train(prepared, reg, cfg, TR.TrainConfig(lr=0.0, epochs=1, steps_per_epoch=1), store=store)
    for k, v in res.store.values().items():
        assert v.tobytes() == before[k].tobytes()


def test_training_deterministic(toy_data, tmp_path):
    cfg, prepared, reg = toy_data
    tc = TR.TrainConfig(epochs=2, steps_per_epoch=1)
    a = TR.train(prepared, reg, cfg, tc, checkpoint=tmp_path / "a.ckpt")
    b = TR.train(prepared, reg, cfg, tc, checkpoint=tmp_path / "b.ckpt")
    assert a.trace == b.trace
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    TR.write_trace(tmp_path / "t.csv", a.trace)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,batch,loss" and len(lines) == 3


def test_small_step_reduces_frozen_batch_loss(toy_data):
    cfg, prepared, reg = toy_data
    store = N.init_params(cfg, 0)
    N.init_vlad_from_data(store, prepared, cfg)
    quads = TR.sample_quadruplets(reg, 8, seed=1)
    items = sorted({m for q in quads for m in q.members})
    slot = {it: s for s, it in enumerate(items)}
    batch = [prepared[i] for i in items]

    def loss():
        return TR.quadruplet_loss_tensor(N.forward_batch(batch, store, cfg), quads, slot)
    store.zero_grad()
    l0 = loss()
    assert float(l0.data) > 0
    T.backward(l0)
    for _, t in store.items():
        t.data -= 1e-4 * t.grad
    assert float(loss().data) < float(l0.data)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(pool_places=5)
    with pytest.raises(ValueError):
        TR.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TR.TrainConfig(vlad_init="other")


def test_rotate_prepared_keeps_invariants(toy_data):
    cfg, prepared, _ = toy_data
    p = prepared[0]
    r = TR.rotate_prepared(p, 30.0)
    np.testing.assert_allclose(np.linalg.norm(r.coords[:, :2], axis=1), np.linalg.norm(p.coords[:, :2], axis=1),
                               atol=1e-15)
    np.testing.assert_array_equal(r.coords[:, 2], p.coords[:, 2])
    assert r.local_feats is p.local_feats
