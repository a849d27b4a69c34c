import csv
import json
import math

import numpy as np
import pytest
import torch

from telereg import tgeometry as tg
from telereg import trainer as tr
from telereg.geometry import RigidTransform, dist_m
from telereg.metrics import emd_exact
from telereg.networks import build_model
from telereg.trainer import (
    LOG_COLUMNS,
    TERM_NAMES,
    FlowOutputs,
    LossWeights,
    NonFiniteLossError,
    TrainConfig,
    collate,
    completion_loss,
    consistency_loss,
    consistency_terms,
    forward_losses,
    load_split,
    lr_at,
    model_input,
    registration_loss,
    run_cr_flow,
    run_rc_flow,
    total_loss,
    train,
)

TINY = dict(width="tiny", num_points=64, batch_size=4, val_every=0, checkpoint_every=0)


@pytest.fixture(scope="module")
def samples(small_data):
    return load_split(small_data, "train", TrainConfig(**TINY).net_config())


@pytest.fixture(scope="module")
def batch(samples):
    return collate(samples)


def test_default_weights():
    w = LossWeights()
    assert (w.c_cr, w.o_cr, w.c_rc, w.o_rc) == (1, 3, 0.5, 1.5)
    assert (w.r_cr, w.r_rc) == (3, 9)
    assert (w.so, w.sc, w.sr, w.st) == (3, 1, 3, 3)
    with pytest.raises(ValueError):
        LossWeights(c_cr=-1)


def test_loss_algebra_hand_values():
    ones = {k: torch.tensor(1.0) for k in TERM_NAMES}
    w = LossWeights()
    assert float(completion_loss(ones, w)) == 6.0
    assert float(registration_loss(ones, w)) == 12.0
    assert float(consistency_loss(ones, w)) == 10.0
    vals = dict(zip(TERM_NAMES, (0.5, 0.25, 2.0, 1.0, 0.125, 0.5, 1.0, 4.0, 0.25, 0.5)))
    terms = {k: torch.tensor(v, dtype=torch.float64) for k, v in vals.items()}
    l_c = completion_loss(terms, w)
    l_r = registration_loss(terms, w)
    l_s = consistency_loss(terms, w)
    # 0.5 + 0.75 + 1.0 + 1.5 ; 0.375 + 4.5 ; 3 + 4 + 0.75 + 1.5
    assert float(l_c) == 3.75 and float(l_r) == 4.875 and float(l_s) == 9.25
    assert float(total_loss(l_c, l_r, l_s)) == 17.875


def _identical_flow():
    rng = np.random.default_rng(0)
    b, n = 2, 16
    s = torch.as_tensor(rng.normal(size=(b, 2 * n, 3)))
    q_o = tg.quat_normalize(torch.as_tensor(rng.normal(size=(b, 4))))
    # half-turn about z: every product below is exact in floating point
    q12 = torch.tensor([[0.0, 0.0, 0.0, 1.0]] * b, dtype=torch.float64)
    t12 = torch.as_tensor(rng.normal(size=(b, 3)))
    q21 = tg.quat_conjugate(q12)
    t21 = -(tg.quat_to_matrix(q21) @ t12.unsqueeze(-1)).squeeze(-1)
    lv = [s[:, :4], s[:, :8], s[:, :n]]
    return FlowOutputs(s, s.clone(), lv, lv, q_o, q_o.clone(), q12, t12, q21, t21)


def test_consistency_zero_on_identical_flows():
    cr, rc = _identical_flow(), _identical_flow()
    terms = consistency_terms(cr, rc, 16)
    assert all(float(v) == 0.0 for v in terms.values())
    assert float(consistency_loss(terms, LossWeights())) == 0.0


def test_consistency_detects_disagreement():
    cr, rc = _identical_flow(), _identical_flow()
    rc.t12 = rc.t12 + 0.1
    terms = consistency_terms(cr, rc, 16)
    assert float(terms["l_s_r"]) == pytest.approx(0.01 / 2, rel=1e-9)
    assert float(terms["l_s_t"]) > 0 and float(terms["l_s_o"]) == 0.0


@pytest.mark.parametrize("flag, column", [("no_ls_o", "l_s_o"), ("no_ls_c", "l_s_c"), ("no_ls_r", "l_s_r"), ("no_ls_t", "l_s_t")])
def test_ablation_flag_zeroes_its_column(batch, flag, column):
    model = build_model(TrainConfig(**TINY).net_config())
    with torch.no_grad():
        terms, _, _ = forward_losses(model, batch, TrainConfig(**TINY, **{flag: True}))
    assert float(terms[column]) == 0.0
    others = [k for k in TERM_NAMES if k != column]
    assert all(float(terms[k]) > 0.0 for k in others)


@pytest.mark.parametrize("mode, zero", [("cr", ("l_c_rc", "l_o_rc", "l_r_rc")), ("rc", ("l_c_cr", "l_o_cr", "l_r_cr"))])
def test_single_flow_modes_zero_other_flow(batch, mode, zero):
    model = build_model(TrainConfig(**TINY).net_config())
    with torch.no_grad():
        terms, total, flows = forward_losses(model, batch, TrainConfig(**TINY, flow_mode=mode))
    for k in zero + ("l_s_o", "l_s_c", "l_s_r", "l_s_t"):
        assert float(terms[k]) == 0.0
    assert flows["rc" if mode == "cr" else "cr"] is None
    assert float(total) > 0


def test_cr_terms_match_independent_computation(samples):
    cfg = TrainConfig(**TINY, flow_mode="cr")
    model = build_model(cfg.net_config(), seed=1).double()
    b64 = collate(samples, dtype=torch.float64)
    with torch.no_grad():
        terms, total, flows = forward_losses(model, b64, cfg)
    cr = flows["cr"]
    l_r, l_c, l_o = [], [], []
    for i in range(len(b64)):
        def tf(q, t):
            return RigidTransform(q[i].detach().numpy(), t[i].detach().numpy())

        d12 = dist_m(tf(cr.q12, cr.t12), tf(b64.m12_q, b64.m12_t))
        d21 = dist_m(tf(cr.q21, cr.t21), tf(b64.m21_q, b64.m21_t))
        l_r.append((d12 + d21) / 2)
        per_part = []
        for gen, gt in ((cr.levels1, b64.miss_cr1), (cr.levels2, b64.miss_cr2)):
            per_part.append(np.mean([emd_exact(g[i].detach().numpy(), t[i].numpy())[0] for g, t in zip(gen, gt)]))
        l_c.append(np.mean(per_part))
        qo = [(cr.q1o, b64.r1o), (cr.q2o, b64.r2o)]
        l_o.append(np.mean([min(np.linalg.norm(a[i].detach().numpy() - g[i].numpy()),
                                np.linalg.norm(a[i].detach().numpy() + g[i].numpy())) for a, g in qo]))
    assert float(terms["l_r_cr"]) == pytest.approx(np.mean(l_r), rel=1e-9)
    assert float(terms["l_o_cr"]) == pytest.approx(np.mean(l_o), rel=1e-9)
    # the training EMD is an auction approximation of the exact optimum
    assert np.mean(l_c) <= float(terms["l_c_cr"]) <= 1.02 * np.mean(l_c)
    w = cfg.weights
    expected = w.c_cr * terms["l_c_cr"] + w.o_cr * terms["l_o_cr"] + w.r_cr * terms["l_r_cr"]
    assert float(total) == pytest.approx(float(expected), rel=1e-12)


def test_rc_completion_loss_reaches_registration(batch):
    model = build_model(TrainConfig(**TINY).net_config())
    rc = run_rc_flow(model, batch.p1, batch.p2)
    l_c, _ = tr.completion_terms(rc, batch, "rc")
    l_c.backward()
    grads = [p.grad for p in model.registration.parameters() if p.grad is not None]
    assert grads and sum(float(g.abs().sum()) for g in grads) > 0


def test_cr_completion_loss_does_not_reach_registration(batch):
    model = build_model(TrainConfig(**TINY).net_config())
    cr = run_cr_flow(model, batch.p1, batch.p2)
    l_c, _ = tr.completion_terms(cr, batch, "cr")
    l_c.backward()
    assert all(p.grad is None for p in model.registration.parameters())


def test_gt_transforms_replace_predictions(batch):
    model = build_model(TrainConfig(**TINY).net_config())
    gt = (batch.m12_q, batch.m12_t, batch.m21_q, batch.m21_t)
    with torch.no_grad():
        for run in (run_cr_flow, run_rc_flow):
            out = run(model, batch.p1, batch.p2, gt_transforms=gt)
            assert torch.equal(out.q12, batch.m12_q) and torch.equal(out.t21, batch.m21_t)


def test_model_input_sizes():
    pc = np.random.default_rng(0).normal(size=(100, 3))
    assert model_input(pc, 100) is pc
    assert model_input(pc, 64).shape == (64, 3)
    padded = model_input(pc[:10], 25)
    assert padded.shape == (25, 3) and np.array_equal(padded[10:20], pc[:10])


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, warmup=10, iterations=100)
    assert lr_at(cfg, 5) == 0.5 and lr_at(cfg, 10) == 1.0 and lr_at(cfg, 90) == 1.0
    cos = TrainConfig(lr=1.0, warmup=0, iterations=100, lr_schedule="cosine")
    assert lr_at(cos, 50) == pytest.approx(0.5) and lr_at(cos, 100) == pytest.approx(0.0)
    assert lr_at(cos, 25) == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))


def test_config_json_round_trip(tmp_path):
    cfg = TrainConfig(**TINY, no_ls_c=True, weights=LossWeights(sc=2.0))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(flow_mode="sideways")


def test_train_writes_logs(small_data, tmp_path):
    cfg = TrainConfig(**TINY, iterations=3, lr=1e-3)
    res = train(small_data, cfg, tmp_path / "run")
    with open(tmp_path / "run" / "train_log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in rows] == [1, 2, 3]
    assert tuple(rows[0]) == LOG_COLUMNS
    assert (res.final_checkpoint / "manifest.json").exists()
    assert res.final_eval["category"] == "average" and res.final_eval["n_samples"] == 4
    assert (tmp_path / "run" / "final_eval.csv").exists()


def test_nonfinite_loss_dumps_batch(small_data, tmp_path, monkeypatch):
    real = tr.forward_losses

    def poisoned(model, batch, config):
        terms, total, flows = real(model, batch, config)
        return terms, total * float("nan"), flows

    monkeypatch.setattr(tr, "forward_losses", poisoned)
    with pytest.raises(NonFiniteLossError):
        train(small_data, TrainConfig(**TINY, iterations=2), tmp_path / "bad")
    dumps = list((tmp_path / "bad").glob("nonfinite_*/terms.json"))
    assert len(dumps) == 1 and json.loads(dumps[0].read_text())["iteration"] == 1
