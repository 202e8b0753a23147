import copy
import json

import numpy as np
import pytest
import torch

from rankpyr.data import split, synth_corpus
from rankpyr.errors import InvalidParameter, TrainingDiverged
from rankpyr.losses import supervised_l2
from rankpyr.model import DreamNet, ModelConfig, state_digest
from rankpyr.trainer import (
    Batch,
    TrainConfig,
    compute_losses,
    fit,
    image_level_counts,
    make_optimizer,
    pairs_per_image,
    pyramid_counts,
    train_step,
)

SMALL = {"decoder_width": 4, "decoder_channels": [4] * 6}


def small_model(seed=0, **kw):
    torch.manual_seed(seed)
    return DreamNet(ModelConfig.from_dict({**SMALL, **kw}))


def batches(seed=0, n=2, size=64):
    g = torch.Generator().manual_seed(seed)
    lab = Batch(torch.randn(n, 3, size, size, generator=g), torch.rand(n, 1, size, size, generator=g) * 0.01,
                [f"l{i}" for i in range(n)])
    unl = Batch(torch.randn(n, 3, size, size, generator=g), None, [f"u{i}" for i in range(n)])
    return lab, unl


def cfg(**kw):
    base = {"lr": 1e-3, "crop_size": 64, "sigma": 3.0, "model": SMALL}
    return TrainConfig.from_dict({**base, **kw})


def test_config_alias_and_unknown_keys():
    c = TrainConfig.from_dict({"lambda": 0.5})
    assert c.lam == 0.5 and c.to_dict()["lambda"] == 0.5
    with pytest.raises(InvalidParameter):
        TrainConfig.from_dict({"lamda": 1})
    with pytest.raises(InvalidParameter):
        TrainConfig.from_dict({"level_mask": ["top"]})
    with pytest.raises(InvalidParameter):
        TrainConfig(lam=-1)


def test_config_roundtrip():
    c = cfg(level_mask=["mid", "high"], seed=5)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_pairs_per_image():
    assert pairs_per_image(cfg()) == 30
    assert pairs_per_image(cfg(level_mask=["high"])) == 10
    assert pairs_per_image(cfg(baseline_mode="image-level-ranking")) == 10


def test_lambda_zero_equals_supervised_only_update():
    lab, unl = batches()
    m1 = small_model()
    m2 = copy.deepcopy(m1)
    c = cfg(lam=0.0)
    train_step(m1, make_optimizer(m1, c), lab, unl, c, np.random.default_rng(0))

    opt = make_optimizer(m2, c)
    m2.train()
    opt.zero_grad()
    supervised_l2(m2(lab.images), lab.density).backward()
    opt.step()
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert torch.allclose(a, b, atol=1e-7, rtol=0)


def test_unlabeled_batch_does_not_touch_supervised_term():
    lab, unl = batches()
    _, other = batches(seed=9)
    m = small_model()
    c = cfg()
    ls1, lu1, _, _ = compute_losses(m, lab, unl, c, np.random.default_rng(0))
    ls2, lu2, _, _ = compute_losses(m, lab, other, c, np.random.default_rng(0))
    assert ls1.item() == ls2.item()
    assert lu1.item() != lu2.item()


def test_consistent_counts_give_zero_ranking_gradient():
    # zero head weights with positive bias: every resized patch has the same count
    m = small_model()
    with torch.no_grad():
        m.decoder.head.weight.zero_()
        m.decoder.head.bias.fill_(0.5)
    lab, unl = batches()
    _, lu, hinges, _ = compute_losses(m, lab, unl, cfg(), np.random.default_rng(0))
    assert lu.item() == 0.0 and not hinges.any()
    m.zero_grad()
    lu.backward()
    for p in m.parameters():
        assert p.grad is None or not p.grad.any()


def test_counts_shapes():
    m = small_model()
    imgs = torch.randn(3, 3, 64, 64)
    c, sets = pyramid_counts(m, imgs, cfg(level_mask=["low", "high"]), np.random.default_rng(0))
    assert c.shape == (3, 2, 5) and len(sets) == 2
    c, _ = image_level_counts(m, imgs, cfg(), np.random.default_rng(0))
    assert c.shape == (3, 1, 5)


def test_level_mask_changes_pair_count():
    lab, unl = batches()
    for mask, per in ((["high"], 10), (["low", "mid", "high"], 30)):
        m = small_model()
        c = cfg(level_mask=mask)
        br = train_step(m, make_optimizer(m, c), lab, unl, c, np.random.default_rng(0))
        assert br.n_pairs == per * len(unl)


def test_ranking_targets_pick_images():
    lab, unl = batches(n=2)
    m = small_model()
    for target, n in (("labeled-only", 2), ("unlabeled-only", 2), ("both", 4)):
        _, _, hinges, _ = compute_losses(m, lab, unl, cfg(ranking_target=target), np.random.default_rng(0))
        assert hinges.shape[0] == n


def test_one_small_step_decreases_objective():
    lab, unl = batches()
    m = small_model(head_bias_init=0.01)
    c = cfg(lr=1e-4, weight_decay=0.0)

    def objective():
        ls, lu, _, _ = compute_losses(m, lab, unl, c, np.random.default_rng(3))
        return (ls + c.lam * lu).item()

    m.train()
    before = objective()
    train_step(m, make_optimizer(m, c), lab, unl, c, np.random.default_rng(3))
    assert objective() < before


def test_nan_loss_reports_diagnostics():
    lab, unl = batches()
    lab.images[0, 0, 0, 0] = float("nan")
    m = small_model()
    c = cfg()
    with pytest.raises(TrainingDiverged) as ei:
        train_step(m, make_optimizer(m, c), lab, unl, c, np.random.default_rng(0))
    d = ei.value.diagnostics
    assert d["labeled_ids"] == ["l0", "l1"] and d["unlabeled_ids"] == ["u0", "u1"]
    assert ei.value.to_record()["error"] == "training-diverged"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return split(synth_corpus(root, 12, (5, 30), seed=0, image_size=(64, 64)), 0.5, 0)


def test_zero_steps_leave_model_untouched(corpus, tmp_path):
    m = small_model()
    d0 = state_digest(m)
    res = fit(m, corpus, cfg(steps=0), tmp_path)
    assert res.digest == d0 and res.history == []


def test_fit_is_reproducible(corpus, tmp_path):
    c = cfg(steps=6, eval_every=3, checkpoint_every=3, seed=2, val_fraction=0.34)
    a = fit(small_model(), corpus, c, tmp_path / "a")
    b = fit(small_model(), corpus, c, tmp_path / "b")
    assert a.digest == b.digest
    assert a.history == b.history
    assert (tmp_path / "a" / "ckpt_000003.npz").exists() and (tmp_path / "a" / "final.npz").exists()
    assert (tmp_path / "a" / "train_log.jsonl").read_text() == (tmp_path / "b" / "train_log.jsonl").read_text()
    assert "val_mae" in a.history[2]


def test_fit_log_records_all_terms(corpus, tmp_path):
    res = fit(small_model(), corpus, cfg(steps=2, level_mask=["mid"]), tmp_path)
    rec = json.loads((tmp_path / "train_log.jsonl").read_text().splitlines()[0])
    assert {"step", "supervised", "ranking", "total", "lambda", "epsilon", "n_pairs"} <= set(rec)
    assert rec["n_pairs"] == 4 * 10
    assert res.history[0]["total"] == pytest.approx(rec["supervised"] + rec["lambda"] * rec["ranking"], rel=1e-6)


def test_labeled_images_get_no_ranking_gradient():
    lab, unl = batches()
    lab.images.requires_grad_()
    unl.images.requires_grad_()
    _, lu, _, _ = compute_losses(small_model(), lab, unl, cfg(ranking_target="unlabeled-only"),
                                 np.random.default_rng(0))
    lu.backward()
    assert lab.images.grad is None
    assert unl.images.grad.abs().sum() > 0
