import dataclasses

import numpy as np
import pytest

from dal.data import checkpoint_bytes, parse_checkpoint
from dal.errors import ConfigError, DimensionMismatch, SingleCamera
from dal.evaluation import association_rate, true_match_rate_or_none
from dal.model import forward
from dal.training import RunConfig, Trainer, embed_all


def config(**kw):
    base = dict(max_iter=40, eval_every=10, batch_size=16, precision="float64", seed=3)
    base.update(kw)
    return RunConfig(**base)


def test_defaults():
    c = RunConfig()
    assert (c.margin, c.tradeoff, c.update_rate, c.batch_size) == (0.2, 1.0, 0.5, 64)
    assert c.lr == 0.01
    s = dataclasses.replace(c, max_iter=1000).schedule()
    assert s.rate(499) == 0.01 and s.rate(500) == pytest.approx(0.001)


@pytest.mark.parametrize(
    "bad",
    [dict(margin=0.0), dict(tradeoff=-1.0), dict(update_rate=0.0), dict(update_rate=1.5), dict(batch_size=0),
     dict(ablation="both"), dict(precision="float16"), dict(head="cnn"), dict(momentum=1.0)],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad).validate()


def test_ablation_weights():
    assert RunConfig(ablation="I_only", tradeoff=3.0).loss_weights == (1.0, 0.0)
    assert RunConfig(ablation="C_only", tradeoff=3.0).loss_weights == (0.0, 3.0)
    assert RunConfig(tradeoff=3.0).loss_weights == (1.0, 3.0)


def test_zero_iterations_leave_initial_state(small_dataset):
    t = Trainer.create(small_dataset.unlabelled(), config(max_iter=0))
    assert t.run() == []
    emb = forward(t.head, small_dataset.features.astype(np.float64))
    for k, n in enumerate(small_dataset.sizes):
        for i in range(n):
            sel = (small_dataset.cameras == k) & (small_dataset.tracklets == i)
            np.testing.assert_allclose(t.bank.intra[k][i], emb[sel].mean(axis=0), atol=1e-12)
            np.testing.assert_array_equal(t.bank.cross[k][i], t.bank.intra[k][i])
    assert association_rate(t.bank) == 0.0


def test_single_camera_rejected(small_dataset):
    table = small_dataset.unlabelled()
    keep = table.cameras == 0
    mono = dataclasses.replace(
        table, features=table.features[keep], cameras=table.cameras[keep], tracklets=table.tracklets[keep],
        sizes=table.sizes[:1],
    )
    with pytest.raises(SingleCamera):
        Trainer.create(mono, config())


def test_i_only_reports_no_cross_term_in_total(small_dataset):
    t = Trainer.create(small_dataset.unlabelled(), config(ablation="I_only"))
    rows = t.run()
    assert all(r.loss_total == r.loss_I for r in rows)
    assert any(r.loss_C > 0 for r in rows)


def test_joint_total_is_sum(small_dataset):
    rows = Trainer.create(small_dataset.unlabelled(), config(tradeoff=0.7)).run()
    for r in rows:
        assert r.loss_total == pytest.approx(r.loss_I + 0.7 * r.loss_C, abs=1e-12)


def test_metrics_cadence(small_dataset):
    rows = Trainer.create(small_dataset.unlabelled(), config(max_iter=35)).run()
    assert [r.iteration for r in rows] == [10, 20, 30, 35]


def test_runs_are_deterministic(small_dataset):
    a = Trainer.create(small_dataset.unlabelled(), config())
    b = Trainer.create(small_dataset.unlabelled(), config())
    assert a.run() == b.run()
    assert checkpoint_bytes(a.checkpoint()) == checkpoint_bytes(b.checkpoint())


def test_other_seed_differs(small_dataset):
    a = Trainer.create(small_dataset.unlabelled(), config())
    b = Trainer.create(small_dataset.unlabelled(), config(seed=4))
    a.run(), b.run()
    assert not np.array_equal(a.head.params, b.head.params)


@pytest.mark.parametrize("precision", ["float64", "float32"])
def test_resume_is_bit_identical(small_dataset, precision):
    table = small_dataset.unlabelled()
    full = Trainer.create(table, config(precision=precision))
    full.run()

    half = Trainer.create(table, config(precision=precision))
    half.run(20)
    blob = checkpoint_bytes(half.checkpoint())
    resumed = Trainer.from_checkpoint(table, config(precision=precision), parse_checkpoint(blob))
    resumed.run()

    assert checkpoint_bytes(resumed.checkpoint()) == checkpoint_bytes(full.checkpoint())
    assert half.history + resumed.history == full.history


def test_resume_checks_dimensions(small_dataset, small_truth):
    table = small_dataset.unlabelled()
    ck = Trainer.create(table, config()).checkpoint()
    narrow = dataclasses.replace(table, features=table.features[:, :5])
    with pytest.raises(DimensionMismatch):
        Trainer.from_checkpoint(narrow, config(), ck)
    with pytest.raises(ConfigError):
        Trainer.from_checkpoint(table, config(precision="float32"), ck)


def test_identity_head_moves_only_anchors(small_dataset):
    t = Trainer.create(small_dataset.unlabelled(), config(head="identity"))
    before = t.bank.copy()
    t.run()
    assert t.head.n_params == 0
    np.testing.assert_array_equal(embed_all(t.head, small_dataset.features), small_dataset.features.astype(np.float64))
    assert any(not np.array_equal(a, b) for a, b in zip(before.intra, t.bank.intra))
    assert t.optimizer.t == 40


def test_association_rate_does_not_fall_below_start(small_dataset):
    ids = small_dataset.tracklet_identities()
    t = Trainer.create(small_dataset.unlabelled(), config(max_iter=200, eval_every=50, precision="float32"))
    start = association_rate(t.bank)
    rows = t.run(monitor=lambda bank: true_match_rate_or_none(bank, ids))
    assert rows[-1].assoc_rate >= start
    assert rows[-1].true_match_rate is not None


def test_explicit_batch(small_dataset):
    t = Trainer.create(small_dataset.unlabelled(), config())
    losses = t.step(np.array([0, 1, 2]))
    assert losses.intra_terms.shape == (3,)
    assert t.iteration == 1
