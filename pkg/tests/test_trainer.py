import math
from dataclasses import replace

import numpy as np
import pytest

from dualseg import tensor as T
from dualseg.gradcheck import micro_instance, numerical_grad
from dualseg.losses import LossWeights, supervised_ce, total_loss
from dualseg.nets import ModelDims, encode, head_forward
from dualseg.synthdata import SceneBatch, WeatherConfig
from dualseg.tensor import Tape
from dualseg.trainer import (
    BatchSpec,
    DataSpec,
    NumericAbort,
    TrainConfig,
    Trainer,
    effective_weights,
    forward,
    grad_share_report,
    init_state,
    make_variant,
    model_input,
    train_step,
)

TINY = TrainConfig(
    dims=ModelDims(D=4, C=4, H=8, W=8, heads=2),
    batch=BatchSpec(2, 2),
    data=DataSpec(n_train=16, labeled_ratio=0.25, n_eval=6),
    epochs=2,
    steps_per_epoch=3,
)


def batch(images, masks=None, labeled=True):
    n = len(images)
    masks = np.zeros(images.shape[:3], dtype=np.int64) if masks is None else masks
    return SceneBatch(images, masks, np.full(n, labeled), [WeatherConfig()] * n, list(range(n)))


def snapshot(state):
    return {k: v.data.copy() for k, v in state.params.named_tensors().items()}


# --- independent single-step oracle ------------------------------------------


def _np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_encode(x, p, mix):
    x = (x - 0.5) * 2.0
    z = np.maximum(x @ p["encoder.w1"] + p["encoder.b1"], 0.0)
    z = np.maximum(z @ p["encoder.w2"] + p["encoder.b2"], 0.0)
    b, h, w, d = z.shape
    pad = np.zeros((b, h + 2, w + 2, d))
    pad[:, 1:-1, 1:-1] = z
    out = np.zeros_like(z)
    for dy in range(3):
        for dx in range(3):
            out += mix[dy, dx] * pad[:, dy : dy + h, dx : dx + w]
    return out


def _np_cwt(hs, ht, p):
    q, k, v = hs @ p["cwt.w_q"], ht @ p["cwt.w_k"], ht @ p["cwt.w_v"]
    a = _np_softmax(q @ k.T / math.sqrt(q.shape[1])) @ v
    mu, var = a.mean(axis=1, keepdims=True), a.var(axis=1, keepdims=True)
    z = (a - mu) / np.sqrt(var + 1e-5) * p["cwt.ln_gain"] + p["cwt.ln_bias"]
    z = np.maximum(z @ p["cwt.mlp_w1"] + p["cwt.mlp_b1"], 0.0)
    return z @ p["cwt.mlp_w2"] + p["cwt.mlp_b2"]


def _np_nll(logits, w, labels, select):
    z = logits * w[:, None, None, :]
    logp = z - z.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, np.where(select, labels, 0)[..., None], axis=-1)[..., 0]
    return -picked[select].sum() / select.sum()


def _np_total(p, mix, xl, yl, xu, pseudo, lam):
    feats = _np_encode(np.concatenate([xl, xu]), p, mix)
    pooled = feats.mean(axis=(1, 2))
    logits = feats @ p["student.weight"] + p["student.bias"]
    w = _np_cwt(pooled, np.concatenate([pooled, pooled], axis=1), p)
    ce = _np_nll(logits[:1], w[:1], yl, np.ones(yl.shape, bool))
    labels, mask = pseudo
    pl = _np_nll(logits[1:], w[1:], labels, mask) if mask.any() else 0.0
    t1 = feats[1:] @ p["teacher1.weight"] + p["teacher1.bias"]
    t2 = feats[1:] @ p["teacher2.weight"] + p["teacher2.bias"]
    consist = ((t1 - t2) ** 2).sum() / 1
    reg = ((w - 1.0) ** 2).sum()
    return ce + lam.lambda1 * pl + lam.lambda2 * consist + lam.lambda3 * reg


def test_single_step_matches_numpy_oracle():
    cfg, state, xl, yl, xu = micro_instance(seed=5, tau=0.52)
    lam = effective_weights(cfg, make_variant(cfg))
    p0 = snapshot(state)
    mix = state.params.encoder.mix

    # pseudo-labels are detached: compute them once at the starting point
    feats = _np_encode(np.concatenate([xl, xu]), p0, mix)[1:]
    probs = 0.5 * (
        _np_softmax(feats @ p0["teacher1.weight"] + p0["teacher1.bias"])
        + _np_softmax(feats @ p0["teacher2.weight"] + p0["teacher2.bias"])
    )
    pseudo = (np.where(probs.max(-1) > cfg.tau, probs.argmax(-1), 2), probs.max(-1) > cfg.tau)
    assert 0 < pseudo[1].sum() < pseudo[1].size

    work = {k: v.copy() for k, v in p0.items()}
    expected = {}
    for name in state.optimized(make_variant(cfg)):
        g = numerical_grad(lambda: _np_total(work, mix, xl, yl, xu, pseudo, lam), work[name], 1e-6)
        expected[name] = p0[name] - cfg.lr * g
    t1_expected = {k: 0.99 * p0[f"teacher1.{k}"] + 0.01 * expected[f"student.{k}"] for k in ("weight", "bias")}

    train_step(state, batch(xl, yl), batch(xu, labeled=False), cfg)
    after = snapshot(state)
    for name, want in expected.items():
        np.testing.assert_allclose(after[name], want, rtol=0, atol=1e-9, err_msg=name)
    for k, want in t1_expected.items():
        np.testing.assert_allclose(after[f"teacher1.{k}"], want, rtol=0, atol=1e-9)
    assert np.array_equal(after["teacher2.weight"], p0["teacher2.weight"])


# --- degenerate configurations ------------------------------------------------


def test_zero_lambdas_no_unlabeled_is_plain_ce():
    cfg = replace(TINY, weights=LossWeights(0.0, 0.0, 0.0), batch=BatchSpec(2, 0))
    tr = Trainer(cfg)
    lab, unl = tr.batches_for(0)
    assert len(unl) == 0
    p = tr.state.params
    with Tape():
        logits = head_forward(p.student, encode(p.encoder, model_input(lab.images)))
        want = supervised_ce(logits, T.Tensor(np.ones((2, 4))), lab.training_masks()).item()
    _, br = train_step(tr.state, lab, unl, cfg)
    assert br.total == want and br.ce == want


def test_zero_lr_freezes_student_but_teachers_drift():
    cfg = replace(TINY, lr=0.0)
    tr = Trainer(cfg)
    before = snapshot(tr.state)
    tr.step()
    tr.step()
    after = snapshot(tr.state)
    for name in tr.state.optimized(tr.wiring):
        assert np.array_equal(before[name], after[name])
    assert not np.array_equal(before["teacher1.weight"], after["teacher1.weight"])
    assert not np.array_equal(before["teacher2.weight"], after["teacher2.weight"])
    # drift is toward the static student
    s = after["student.weight"]
    assert np.abs(after["teacher1.weight"] - s).sum() < np.abs(before["teacher1.weight"] - s).sum()


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        replace(TINY, lr=-1.0)


def test_unknown_variant():
    with pytest.raises(ValueError):
        replace(TINY, variant="XYZ")


# --- gradient routing ---------------------------------------------------------


def test_teachers_never_get_gradient():
    tr = Trainer(TINY)
    tr.step()
    for head in (tr.state.params.teacher1, tr.state.params.teacher2):
        assert all(t.grad is None and not t.requires_grad for t in head.tensors().values())


def test_identical_teachers_give_zero_consistency_gradient():
    tr = Trainer(TINY)
    p = tr.state.params
    p.teacher2 = p.teacher1
    lab, unl = tr.batches_for(0)
    enc = list(p.encoder.tensors().values())
    with Tape() as tape:
        fwd = forward(p, lab.images, lab.training_masks(), unl.images, TINY, make_variant(TINY))
        tape.backward(fwd.consist if fwd.consist.requires_grad else T.scale(fwd.consist, 1.0))
    assert fwd.consist.item() == 0.0
    assert all(t.grad is None or not t.grad.any() for t in enc)


def _encoder_grads(cfg, seed=0):
    tr = Trainer(replace(cfg, seed=seed))
    lab, unl = tr.batches_for(0)
    p = tr.state.params
    w = make_variant(cfg)
    lw = effective_weights(cfg, w)
    params = tr.state.optimized(w)
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        fwd = forward(p, lab.images, lab.training_masks(), unl.images, replace(cfg, tau=0.3), w)
        tape.backward(total_loss(fwd.ce, fwd.pl, fwd.consist, fwd.reg, lw))
        grads = {k: v.grad.copy() for k, v in tr.state.optimized(w).items()}
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        fwd = forward(p, lab.images, lab.training_masks(), unl.images, replace(cfg, tau=0.3), w)
        tape.backward(T.scale(fwd.pl, lw.lambda1))
        pl_grads = {k: v.grad.copy() for k, v in tr.state.optimized(w).items()}
    return grads, pl_grads, fwd


def test_zeroing_lambda1_removes_exactly_pl():
    full, pl_only, fwd = _encoder_grads(TINY)
    assert fwd.pl.item() > 0
    off, _, _ = _encoder_grads(replace(TINY, weights=replace(TINY.weights, lambda1=0.0)))
    for k in full:
        np.testing.assert_allclose(full[k] - off[k], pl_only[k], rtol=0, atol=1e-10)


def test_grad_shares():
    tr = Trainer(TINY)
    shares, undefined = grad_share_report(tr.state, *tr.batches_for(0), TINY)
    assert not undefined and sum(shares.values()) == pytest.approx(1.0, abs=1e-9)
    cfg = replace(TINY, weights=LossWeights(0.0, 0.0, 0.0))
    shares, _ = grad_share_report(Trainer(cfg).state, *tr.batches_for(0), cfg)
    assert shares["ce"] == 1.0


# --- variants -----------------------------------------------------------------


def test_dtc_differs_from_dtfw_only_in_pseudo_source():
    traces = {}
    for v in ("DTFW", "DTC"):
        cfg = replace(TINY, variant=v)
        tr = Trainer(cfg)
        lab, unl = tr.batches_for(0)
        with Tape():
            traces[v] = forward(tr.state.params, lab.images, lab.training_masks(), unl.images, cfg, make_variant(cfg)).trace
    diff = [(a, b) for a, b in zip(traces["DTFW"], traces["DTC"]) if a != b]
    assert diff == [("pseudo:teacher1", "pseudo:consensus")]
    assert len(traces["DTFW"]) == len(traces["DTC"])


def test_stb_has_no_teacher_or_weight_path():
    cfg = replace(TINY, variant="STB")
    tr = Trainer(cfg)
    before = snapshot(tr.state)
    lab, unl = tr.batches_for(0)
    with Tape():
        trace = forward(tr.state.params, lab.images, lab.training_masks(), unl.images, cfg, make_variant(cfg)).trace
    assert trace == ["encode", "student_head", "fixed_weights", "ce"]
    tr.step()
    after = snapshot(tr.state)
    for k in before:
        if k.startswith(("cwt", "teacher")):
            assert np.array_equal(before[k], after[k])


def test_stfw_uses_one_teacher():
    cfg = replace(TINY, variant="STFW")
    tr = Trainer(cfg)
    t2 = tr.state.params.teacher2.weight.data.copy()
    for _ in range(3):
        tr.step()
    assert np.array_equal(tr.state.params.teacher2.weight.data, t2)


def test_optimizer_set_per_variant():
    for v, has_cwt in (("COMPLETE", True), ("DTC", False)):
        names = init_state(replace(TINY, variant=v)).optimized(make_variant(replace(TINY, variant=v)))
        assert any(n.startswith("cwt") for n in names) == has_cwt
        assert not any(n.startswith("teacher") for n in names)


# --- driver -------------------------------------------------------------------


def test_run_is_deterministic_and_one_row_per_epoch():
    a = Trainer(TINY).fit()
    b = Trainer(TINY).fit()
    assert len(a.rows) == TINY.epochs
    assert a.rows == b.rows


def test_training_never_reads_unlabeled_masks(monkeypatch):
    tr = Trainer(TINY)

    def trip(self):
        raise AssertionError("unlabeled mask read during training")

    monkeypatch.setattr(SceneBatch, "reveal_masks", trip)
    for _ in range(3):
        tr.step()


def test_checkpoint_resume_is_bitwise(tmp_path):
    full = Trainer(TINY)
    full.fit()
    part = Trainer(TINY)
    part.fit(until_step=4)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.load(tmp_path / "mid.ckpt")
    resumed.fit()
    assert resumed.state.loss_rows == full.state.loss_rows
    assert resumed.state.history.rows == full.state.history.rows
    a, b = snapshot(full.state), snapshot(resumed.state)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_numeric_abort():
    cfg = replace(TINY, lr=1e6)
    tr = Trainer(cfg)
    with pytest.raises(NumericAbort) as info, np.errstate(all="ignore"):
        for _ in range(50):
            tr.step()
    assert info.value.component in {"ce", "pl", "consist", "reg", "total"}
    assert "step" in info.value.dump


def test_config_round_trip(tmp_path):
    d = TINY.to_dict()
    assert TrainConfig.from_dict(d) == TINY
    with pytest.raises(ValueError):
        TrainConfig.from_dict({**d, "bogus": 1})


def test_empty_labeled_split_rejected():
    with pytest.raises(ValueError):
        Trainer(replace(TINY, data=DataSpec(n_train=4, labeled_ratio=0.1)))
