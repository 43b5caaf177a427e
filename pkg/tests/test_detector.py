from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_config
from hedfsod.decoder import DecoderConfig, DenoisingTargets
from hedfsod.detector import ModelConfig, build_detector, layered_loss, layered_loss_reference
from hedfsod.losses import LossWeights


def _batch(n_img=2, n_obj=(2, 1), c=3, seed=0, size=16):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n_img, 3, size, size, generator=g)
    labels = [torch.randint(0, c, (k,), generator=g) for k in n_obj]
    boxes = [torch.cat([0.3 + 0.4 * torch.rand(k, 2, generator=g), 0.1 + 0.2 * torch.rand(k, 2, generator=g)], 1)
             for k in n_obj]
    return images, labels, boxes


def _f(t):
    return float(t.detach())


def _train_outputs(model, images, labels, boxes, seed=0):
    """(proposals, per-layer outputs) of one training forward."""
    return model.run(
        images,
        mode="train",
        targets=DenoisingTargets.from_lists(labels, boxes),
        dn_cfg=model.cfg.denoising,
        reinit_rng=np.random.default_rng(seed),
        dn_generator=torch.Generator().manual_seed(seed),
    )


# -- tokens --------------------------------------------------------------------


def test_token_count_and_determinism():
    model = build_detector(ModelConfig(image_size=64, patch_size=8), seed=0)
    img = torch.rand(1, 3, 64, 64)
    tokens, pos = model.extract_tokens(img)
    assert tokens.shape == (1, 64, 64) and pos.shape == (64, 64)
    assert torch.equal(tokens, model.extract_tokens(img.clone())[0])
    zeros = model.extract_tokens(torch.zeros(1, 3, 64, 64))[0]
    ones = model.extract_tokens(torch.ones(1, 3, 64, 64))[0]
    assert not torch.equal(zeros, ones)


def test_wrong_image_size_is_rejected(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.extract_tokens(torch.zeros(1, 3, 24, 24))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=20, patch_size=8)
    with pytest.raises(ValueError):
        ModelConfig(num_categories=0)


# -- predict -------------------------------------------------------------------


def test_predict_contracts(tiny_model):
    img = torch.rand(3, 16, 16)
    assert tiny_model.predict(img, score_threshold=1.01) == []
    assert tiny_model.predict(img, top_k=0) == []
    nq = tiny_model.cfg.decoder.num_queries
    dets = tiny_model.predict(img, top_k=nq, score_threshold=0.0)
    assert len(dets) == nq
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert all(0.0 <= s <= 1.0 for s in scores)
    assert all(0 <= d.category < tiny_model.cfg.num_categories for d in dets)
    assert len(tiny_model.predict(img, top_k=2)) == 2


def test_predict_is_pure(tiny_model):
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    a = tiny_model.predict(img)
    torch.manual_seed(123)
    tiny_model.train()
    b = tiny_model.predict(img)
    assert a == b


def test_score_is_the_reported_category_probability(tiny_model):
    img = torch.rand(1, 3, 16, 16)
    boxes, probs = tiny_model.infer(img)
    dets = tiny_model.predict(img[0], top_k=100)
    top = sorted(probs[0].max(-1).values.tolist(), reverse=True)
    assert [d.score for d in dets] == pytest.approx(top)


def test_predict_batch_matches_predict(tiny_model):
    imgs = torch.rand(3, 3, 16, 16)
    batch = tiny_model.predict_batch(imgs, batch_size=2)
    for i in range(3):
        single = tiny_model.predict(imgs[i])
        assert [d.category for d in batch[i]] == [d.category for d in single]
        assert [d.score for d in batch[i]] == pytest.approx([d.score for d in single], abs=1e-6)


# -- training loss -------------------------------------------------------------


@pytest.mark.parametrize("structure", [(1, 0.5), (3, 0.0), (0, 1.0)])
def test_batched_loss_equals_reference_composition(structure):
    k, tau = structure
    model = build_detector(tiny_config(num_stacked=k, tau=tau), seed=1)
    images, labels, boxes = _batch(n_obj=(2, 0))
    props, out = _train_outputs(model, images, labels, boxes)
    for p in (None, props):
        fast = layered_loss(out, labels, boxes, model.cfg, p)
        slow = layered_loss_reference(out, labels, boxes, model.cfg, p)
        for name in ("cls", "box_l1", "box_giou", "dn", "total"):
            assert _f(getattr(fast, name)) == pytest.approx(_f(getattr(slow, name)), rel=1e-5, abs=1e-6)


def test_forward_train_uses_the_same_composition(tiny_model):
    images, labels, boxes = _batch(n_img=1, n_obj=(2,))
    got = tiny_model.forward_train(images, labels, boxes, np.random.default_rng(0), torch.Generator().manual_seed(0))
    props, out = _train_outputs(tiny_model, images, labels, boxes)
    ref = layered_loss_reference(out, labels, boxes, tiny_model.cfg, props)
    assert _f(got.total) == pytest.approx(_f(ref.total), rel=1e-5)


def test_empty_gt_has_no_dn_and_background_only_match(tiny_model):
    images, labels, boxes = _batch(n_img=1, n_obj=(0,))
    loss = tiny_model.forward_train(images, labels, boxes, np.random.default_rng(0), None)
    assert _f(loss.dn) == 0.0 and _f(loss.box_l1) == 0.0 and _f(loss.box_giou) == 0.0
    assert _f(loss.total) == pytest.approx(_f(loss.cls))


def test_zero_dn_weight_gives_match_losses_only():
    cfg = replace(tiny_config(), loss=replace(LossWeights(), lambda_dn=0.0))
    model = build_detector(cfg, seed=2)
    images, labels, boxes = _batch()
    loss = model.forward_train(images, labels, boxes, np.random.default_rng(0), torch.Generator().manual_seed(0))
    assert _f(loss.dn) == 0.0
    assert _f(loss.total) == pytest.approx(_f(loss.cls + loss.box_l1 + loss.box_giou), rel=1e-6)


def test_unknown_category_is_rejected(tiny_model):
    images, _, boxes = _batch(n_img=1, n_obj=(1,))
    with pytest.raises(ValueError):
        tiny_model.forward_train(images, [torch.tensor([7])], boxes, np.random.default_rng(0), None)


@pytest.mark.parametrize("seed", range(10))
def test_one_small_step_decreases_loss(seed):
    model = build_detector(tiny_config(), seed=seed)
    images, labels, boxes = _batch(seed=seed)

    def loss():
        return model.forward_train(images, labels, boxes, np.random.default_rng(seed), torch.Generator().manual_seed(seed))

    before = loss()
    model.zero_grad()
    before.total.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p -= 1e-4 * p.grad
    assert _f(loss().total) < _f(before.total)


def test_decoder_config_is_carried():
    cfg = ModelConfig(decoder=DecoderConfig(num_stacked=6))
    assert cfg.d_model == 64 and cfg.num_tokens == 144


def test_proposal_term_is_class_agnostic(tiny_model):
    images, labels, boxes = _batch(n_img=2, n_obj=(2, 1))
    props, out = _train_outputs(tiny_model, images, labels, boxes)
    with_p = layered_loss(out, labels, boxes, tiny_model.cfg, props)
    without = layered_loss(out, labels, boxes, tiny_model.cfg)
    relabeled = [torch.full_like(lb, 2) for lb in labels]
    assert _f(with_p.total) > _f(without.total)
    # the proposal term ignores categories: relabeling changes only the decoder terms
    a = _f(layered_loss(out, relabeled, boxes, tiny_model.cfg, props).total) - _f(layered_loss(out, relabeled, boxes, tiny_model.cfg).total)
    assert a == pytest.approx(_f(with_p.total) - _f(without.total), rel=1e-6)
