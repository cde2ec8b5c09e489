import numpy as np
import pytest

from s2ap.attacks import AttackConfig
from s2ap.data import gen_two_moons
from s2ap.finetune import (FinetuneConfig, PretrainConfig, finetune, pretrain, s2ap_finetune,
                           standard_finetune)
from s2ap.losses import LossKind
from s2ap.model import Network

ATTACK = AttackConfig(steps=3)


@pytest.fixture(scope="module")
def moons():
    ds = gen_two_moons(n=250, noise=0.1, seed=5).train
    return ds.x, ds.y


def _pruned(seed=0, sparsity=0.7):
    net = Network.mlp((2, 16, 16, 2), np.random.default_rng(seed))
    net.init_scores()
    net.set_sparsity(sparsity)
    net.update_masks()
    return net


def _cfg(**kw):
    return FinetuneConfig(**{**dict(epochs=2, batch_size=20), **kw})


def test_vanishing_gamma_tracks_standard(moons):
    x, y = moons
    a, b = _pruned(), _pruned()
    la = standard_finetune(a, x, y, _cfg(), ATTACK, record_weights=True)
    lb = s2ap_finetune(b, x, y, _cfg(gamma=1e-15), ATTACK, record_weights=True)
    assert len(la.weight_history) == 20
    for wa, wb in zip(la.weight_history, lb.weight_history):
        for p, q in zip(wa, wb):
            assert np.max(np.abs(p - q)) <= 1e-9


@pytest.mark.parametrize("mode", ["standard", "s2ap_awp"])
def test_pruned_positions_stay_put(moons, mode):
    x, y = moons
    net = _pruned()
    before = [l.w.copy() for l in net.layers]
    flog = finetune(net, x, y, _cfg(mode=mode, gamma=0.05), ATTACK)
    assert flog.pruned_unchanged
    for l, w0 in zip(net.layers, before):
        off = l.m == 0
        assert l.w[off].tobytes() == w0[off].tobytes()
        assert not np.array_equal(l.w[~off], w0[~off])
        assert not l.nu.any()


def test_weight_perturbation_is_removed(moons):
    x, y = moons
    flog = s2ap_finetune(_pruned(), x, y, _cfg(gamma=0.05), ATTACK)
    assert flog.max_restore_error <= 1e-12


def test_finetune_lowers_training_loss(moons):
    x, y = moons
    flog = standard_finetune(_pruned(), x, y, _cfg(epochs=8, eta=0.05), ATTACK)
    print("finetune epoch losses", [round(v, 4) for v in flog.epoch_loss])
    assert flog.epoch_loss[-1] < flog.epoch_loss[0]


def test_pretrain_lowers_training_loss(moons):
    x, y = moons
    net = Network.mlp((2, 16, 16, 2), np.random.default_rng(1))
    hist = pretrain(net, x, y, PretrainConfig(epochs=6, loss_kind=LossKind("pgd_at")), ATTACK)
    assert hist[-1] < hist[0]


def test_finetune_is_deterministic(moons):
    x, y = moons
    a, b = _pruned(), _pruned()
    s2ap_finetune(a, x, y, _cfg(), ATTACK)
    s2ap_finetune(b, x, y, _cfg(), ATTACK)
    assert all(p.w.tobytes() == q.w.tobytes() for p, q in zip(a.layers, b.layers))


@pytest.mark.parametrize("kw", [dict(mode="sam"), dict(epochs=0), dict(gamma=0.0)])
def test_finetune_config_validation(kw):
    with pytest.raises(ValueError):
        FinetuneConfig(**kw)
