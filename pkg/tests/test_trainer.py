import json

import numpy as np
import pytest
import torch

from physgan.presets import toy_synth_config, toy_train_config
from physgan.synth import DatasetError, build_dataset, make_sample
from physgan.trainer import (
    BASEGAN,
    HistoryBuffer,
    TrainConfig,
    Trainer,
    history_sample,
    load_generator,
    lr_schedule,
    read_tsv,
    train,
)


@pytest.fixture(scope="module")
def small_corpus():
    cfg = toy_synth_config(count=12, seed=5)
    ev = toy_synth_config(count=4, seed=6)
    return [make_sample(cfg, i) for i in range(12)], [make_sample(ev, i) for i in range(4)]


def small_cfg(**kw):
    base = dict(epochs=4, decay_start_epoch=2, batch_size=4, eval_every=1, checkpoint_every=2, seed=3)
    return toy_train_config(**{**base, **kw})


# schedule and history ---------------------------------------------------------


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 2e-4
    assert lr_schedule(99, cfg) == 2e-4
    assert lr_schedule(150, cfg) == pytest.approx(1e-4, abs=1e-15)
    assert lr_schedule(200, cfg) == 0.0
    assert lr_schedule(350, cfg) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=0)
    with pytest.raises(ValueError):
        TrainConfig(history_capacity=0)
    with pytest.raises(ValueError):
        TrainConfig(ablation={"no_everything"})
    cfg = TrainConfig(ablation=BASEGAN)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert not cfg.physics_branch


def test_history_first_call_returns_fresh():
    buf = HistoryBuffer(1, np.random.default_rng(0))
    fresh = torch.randn(1, 3, 4, 4)
    assert torch.equal(history_sample(buf, fresh), fresh)


def _policy_fresh_probability(capacity, calls):
    # exact expectation of the stated policy: always fresh while filling, then 1/2
    return (capacity + 0.5 * (calls - capacity)) / calls


def test_history_capacity_and_fresh_fraction():
    buf = HistoryBuffer(50, np.random.default_rng(0))
    fresh_count = 0
    for i in range(10_000):
        img = torch.full((1, 1, 2, 2), float(i))
        out = buf.query(img)
        fresh_count += int(out[0, 0, 0, 0].item() == i)
        assert len(buf.stored) <= 50
    expected = _policy_fresh_probability(50, 10_000)
    assert abs(fresh_count / 10_000 - expected) <= 0.03


def test_history_swap_replaces_returned_image():
    buf = HistoryBuffer(2, np.random.default_rng(1))
    for i in range(2):
        buf.query(torch.full((1,), float(i)))
    for i in range(2, 50):
        before = sorted(float(t) for t in buf.stored)
        out = float(buf.query(torch.full((1,), float(i))))
        after = sorted(float(t) for t in buf.stored)
        if out == i:
            assert after == before
        else:
            assert out in before and i in after and out not in after


# steps ------------------------------------------------------------------------


def test_step_losses_finite(small_corpus):
    tr, _ = small_corpus
    trainer = Trainer(small_cfg(), tr)
    rep = trainer.train_step(tr[:2])
    assert rep.is_finite()
    assert rep.l_p > 0 and rep.l_g > 0 and rep.l_g_tilde > 0 and rep.adv_dh > 0


def test_basegan_step_skips_physics_branch(small_corpus):
    tr, _ = small_corpus
    trainer = Trainer(small_cfg(ablation=BASEGAN), tr)
    before = [p.clone() for p in trainer.D_h.parameters()]
    rep = trainer.train_step(tr[:2])
    assert rep.l_p == 0 and rep.l_g_tilde == 0 and rep.adv_dh == 0
    assert rep.l_g > 0
    assert all(torch.equal(a, b) for a, b in zip(before, trainer.D_h.parameters()))
    assert rep.total_g == pytest.approx(rep.adv_g + trainer.cfg.lam * rep.l_g, rel=1e-6)


def test_identical_reports_over_100_steps(small_corpus):
    tr, _ = small_corpus
    reports = []
    for _ in range(2):
        trainer = Trainer(small_cfg(batch_size=1), tr)
        run = []
        while len(run) < 100:
            run.extend(rep.as_dict() for _, _, rep in trainer.run_epoch())
        reports.append(run[:100])
    assert reports[0] == reports[1]


def test_generator_update_leaves_discriminator_state_alone(small_corpus):
    tr, _ = small_corpus
    trainer = Trainer(small_cfg(), tr)
    trainer.train_step(tr[:2])  # populate every optimizer's moments

    def snapshot():
        out = [p.detach().clone() for net in (trainer.D_g, trainer.D_h) for p in net.parameters()]
        for opt in (trainer.opt_Dg, trainer.opt_Dh):
            for st in opt.state.values():
                out += [st["exp_avg"].clone(), st["exp_avg_sq"].clone()]
        return out

    original = trainer.opt_G.step
    checked = []

    def guarded_step(*a, **kw):
        before = snapshot()
        result = original(*a, **kw)
        checked.append(all(torch.equal(x, y) for x, y in zip(before, snapshot())))
        return result

    trainer.opt_G.step = guarded_step
    trainer.train_step(tr[2:4])
    assert checked == [True]
    g_params = {id(p) for p in trainer.G.parameters()}
    for opt in (trainer.opt_Dg, trainer.opt_Dh):
        assert not g_params & {id(p) for grp in opt.param_groups for p in grp["params"]}


def test_nonfinite_loss_aborts_with_dump(small_corpus, tmp_path):
    tr, _ = small_corpus
    cfg = small_cfg()

    original_init = Trainer.__init__

    def poisoned(self, *a, **kw):
        original_init(self, *a, **kw)
        with torch.no_grad():
            self.G.layers["out"][1].bias.fill_(float("nan"))

    Trainer.__init__ = poisoned
    try:
        with pytest.raises(RuntimeError, match="non-finite"):
            train(cfg, tmp_path / "run", tr, [])
    finally:
        Trainer.__init__ = original_init
    dump = json.loads((tmp_path / "run" / "divergence.json").read_text())
    assert dump["step"] == 0 and dump["samples"] and dump["what"] == "generator objective"


# full runs ----------------------------------------------------------------------


def test_train_writes_logs_and_checkpoints(small_corpus, tmp_path):
    tr, ev = small_corpus
    train(small_cfg(), tmp_path / "run", tr, ev)
    steps = read_tsv(tmp_path / "run" / "metrics.tsv")
    evals = read_tsv(tmp_path / "run" / "eval.tsv")
    assert [r["step"] for r in steps] == list(range(1, 13))
    assert [r["epoch"] for r in evals] == [0, 1, 2, 3, 4]
    assert sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir()) == ["epoch_0002", "epoch_0004"]
    G, cfg = load_generator(tmp_path / "run")
    assert cfg["epochs"] == 4
    assert set(read_tsv(tmp_path / "run" / "metrics.tsv")[0]) >= {"l_p", "l_g", "l_g_tilde", "adv_g", "adv_dg", "adv_dh", "total_g", "lr"}


def test_resume_matches_uninterrupted_run(small_corpus, tmp_path):
    tr, ev = small_corpus
    cfg = small_cfg()
    full = train(cfg, tmp_path / "full", tr, ev)
    train(small_cfg(), tmp_path / "cut", tr, ev, stop_after_epoch=2)
    resumed = train(small_cfg(), tmp_path / "cut", tr, ev, resume=tmp_path / "cut" / "checkpoints" / "epoch_0002")
    for name in ("metrics.tsv", "eval.tsv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "cut" / name).read_bytes()
    for a, b in zip(full.G.state_dict().values(), resumed.G.state_dict().values()):
        assert torch.equal(a, b)
    for name in ("G.bin", "D_g.bin", "D_h.bin", "opt_G.bin", "history_h.bin"):
        a = (tmp_path / "full" / "checkpoints" / "epoch_0004" / name).read_bytes()
        b = (tmp_path / "cut" / "checkpoints" / "epoch_0004" / name).read_bytes()
        assert a == b, name


def test_train_from_dataset_dir(tmp_path):
    build_dataset(toy_synth_config(count=4, seed=9), tmp_path / "data")
    cfg = small_cfg(dataset_dir=str(tmp_path / "data"), epochs=1, decay_start_epoch=1)
    trainer = train(cfg, tmp_path / "run")
    assert trainer.step == 1
    with pytest.raises(DatasetError, match="does not match"):
        train(small_cfg(task="dehaze", dataset_dir=str(tmp_path / "data")), tmp_path / "run2")
    with pytest.raises(DatasetError, match="not found"):
        train(small_cfg(dataset_dir=str(tmp_path / "missing")), tmp_path / "run3")


def test_augmentation_is_consistent(small_corpus):
    tr, _ = small_corpus
    from physgan.physics import apply_physics_core

    trainer = Trainer(small_cfg(), tr)
    aug = trainer.augment(tr[:6])
    for s in aug:
        # the transformed model still explains the transformed observation up to noise
        resid = np.abs(apply_physics_core(s.clean, s.model) - s.degraded).mean()
        assert resid < 0.1
    assert trainer.augment(tr[:6])[3].degraded.tobytes() == aug[3].degraded.tobytes()


def test_toy_run_liveness_and_improvement(tmp_path):
    from physgan.presets import toy_corpora

    tr, ev = toy_corpora()
    cfg = toy_train_config(epochs=20, decay_start_epoch=10, checkpoint_every=10)
    train(cfg, tmp_path / "toy", tr, ev)
    evals = read_tsv(tmp_path / "toy" / "eval.tsv")
    assert len(list((tmp_path / "toy" / "checkpoints").iterdir())) >= 1
    assert evals[-1]["psnr"] > evals[0]["psnr"]
