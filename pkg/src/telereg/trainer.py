"""Two-flow training: complete-then-register (C-R) and register-then-complete (R-C).

Both flows run on every step and their losses are summed into one objective
with completion, registration and cross-flow consistency parts.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import tgeometry as tg
from .checkpoint import load_into, save_checkpoint
from .dataset import list_samples, read_pair
from .datagen import ScanPair, StressSpec, derive_seed
from .metrics import DEFAULT_AUCTION_PHASES, emd_loss
from .networks import NetConfig, TeleRegModel, build_model
from .plans import planned
from .pointcloud import fps_indices

log = logging.getLogger(__name__)

TERM_NAMES = ("l_c_cr", "l_o_cr", "l_c_rc", "l_o_rc", "l_r_cr", "l_r_rc", "l_s_o", "l_s_c", "l_s_r", "l_s_t")
LOG_COLUMNS = ("iteration",) + TERM_NAMES + ("total",)
FLOW_MODES = ("both", "cr", "rc")
LR_SCHEDULES = ("constant", "cosine")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    c_cr: float = 1.0
    o_cr: float = 3.0
    c_rc: float = 0.5
    o_rc: float = 1.5
    r_cr: float = 3.0
    r_rc: float = 9.0
    so: float = 3.0
    sc: float = 1.0
    sr: float = 3.0
    st: float = 3.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    """Training run settings; ``to_json`` / ``from_json`` give the config file format.

    ``flow_mode`` is ``both`` (two-flow), ``cr`` or ``rc`` (single-flow
    ablations). ``no_ls_*`` drop individual consistency terms.
    """

    category: str = ""
    batch_size: int = 8
    iterations: int = 20000
    lr: float = 1e-4
    warmup: int = 100
    lr_schedule: str = "constant"
    width: str | int = "full"
    num_points: int = 2048
    seed: int = 0
    flow_mode: str = "both"
    no_ls_o: bool = False
    no_ls_c: bool = False
    no_ls_r: bool = False
    no_ls_t: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 10.0
    val_every: int = 500
    checkpoint_every: int = 500
    emd_phases: int = DEFAULT_AUCTION_PHASES
    train_split: str = "train"
    val_split: str = "val"

    def __post_init__(self):
        if self.flow_mode not in FLOW_MODES:
            raise ValueError(f"flow_mode must be one of {FLOW_MODES}, got {self.flow_mode!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, iterations >= 0 and lr > 0 required")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    def net_config(self) -> NetConfig:
        return NetConfig.preset(self.width, self.num_points)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- batches --------------------------------------------------------------


def model_input(part: np.ndarray, n: int) -> np.ndarray:
    """Bring a stored part to exactly ``n`` points.

    Larger clouds are farthest-point sampled from index 0; smaller ones (only
    possible after outlier filtering) are padded by cycling their points.
    """
    if len(part) == n:
        return part
    if len(part) > n:
        return part[fps_indices(part, n, 0)]
    return np.resize(part, (n, 3))


@dataclass
class Batch:
    ids: list
    categories: list
    p1: torch.Tensor
    p2: torch.Tensor
    r1o: torch.Tensor
    r2o: torch.Tensor
    m12_q: torch.Tensor
    m12_t: torch.Tensor
    m21_q: torch.Tensor
    m21_t: torch.Tensor
    # lists of per-level (B, L, 3) tensors
    miss_cr1: list
    miss_cr2: list
    miss_rc1: list
    miss_rc2: list

    def __len__(self):
        return len(self.ids)


def _levels(stored_finest: np.ndarray, levels) -> list:
    if len(stored_finest) < levels[-1]:
        raise ValueError(f"stored missing part has {len(stored_finest)} points, need {levels[-1]}")
    return [stored_finest[:k] for k in levels]


@dataclass
class Sample:
    """One pair prepared for a model with ``N`` input points."""

    sample_id: str
    category: str
    p1: np.ndarray
    p2: np.ndarray
    pair: ScanPair
    miss: dict
    # unperturbed inputs; equal to p1 / p2 unless a StressSpec was applied
    clean1: np.ndarray
    clean2: np.ndarray

    @classmethod
    def from_pair(cls, sample_id: str, pair: ScanPair, config: NetConfig, stress: StressSpec | None = None, seed: int = 0):
        n = config.num_points
        parts = [pair.p1, pair.p2]
        clean = [model_input(p, n) for p in parts]
        if stress is not None:
            parts = [
                stress.apply(p, np.random.default_rng(derive_seed(seed, sample_id, k)))
                for k, p in enumerate(parts)
            ]
        miss = {
            "cr1": _levels(pair.gt_missing_cr_1[-1], config.levels),
            "cr2": _levels(pair.gt_missing_cr_2[-1], config.levels),
            "rc1": _levels(pair.gt_missing_rc_1[-1], config.levels),
            "rc2": _levels(pair.gt_missing_rc_2[-1], config.levels),
        }
        inputs = clean if stress is None else [model_input(p, n) for p in parts]
        return cls(sample_id, pair.category, inputs[0], inputs[1], pair, miss, clean[0], clean[1])


def collate(samples: list[Sample], dtype=torch.float32) -> Batch:
    def t(arrays):
        return torch.as_tensor(np.stack(arrays), dtype=dtype)

    def lv(key):
        return [t([s.miss[key][i] for s in samples]) for i in range(3)]

    return Batch(
        ids=[s.sample_id for s in samples],
        categories=[s.category for s in samples],
        p1=t([s.p1 for s in samples]),
        p2=t([s.p2 for s in samples]),
        r1o=t([s.pair.r1o_gt for s in samples]),
        r2o=t([s.pair.r2o_gt for s in samples]),
        m12_q=t([s.pair.m12_gt.q for s in samples]),
        m12_t=t([s.pair.m12_gt.t for s in samples]),
        m21_q=t([s.pair.m21_gt.q for s in samples]),
        m21_t=t([s.pair.m21_gt.t for s in samples]),
        miss_cr1=lv("cr1"),
        miss_cr2=lv("cr2"),
        miss_rc1=lv("rc1"),
        miss_rc2=lv("rc2"),
    )


def load_split(data_dir, split: str, config: NetConfig) -> list[Sample]:
    return [Sample.from_pair(ref.sample_id, read_pair(ref.path), config) for ref in list_samples(data_dir, split)]


# --- flows ----------------------------------------------------------------


def fps_points(x: torch.Tensor, n: int) -> torch.Tensor:
    """Farthest-point sample each cloud of a ``(B, M, 3)`` batch down to ``n``.

    Selections are made on detached values (and recorded on an active plan
    tape); gradients flow through the gathered points.
    """
    x_np = x.detach().to(torch.float64).cpu().numpy()
    idx = np.stack([planned(lambda i=i: fps_indices(x_np[i], n, 0)) for i in range(x.shape[0])])
    idx = torch.as_tensor(idx, device=x.device)
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, 3))


@dataclass
class FlowOutputs:
    """One flow's outputs. ``levels*`` are lists of three tensors in the part frame."""

    s1: torch.Tensor
    s2: torch.Tensor
    levels1: list
    levels2: list
    q1o: torch.Tensor
    q2o: torch.Tensor
    q12: torch.Tensor
    t12: torch.Tensor
    q21: torch.Tensor
    t21: torch.Tensor
    # FPS-downsampled completions, filled in when a flow produces them anyway
    s1_ds: torch.Tensor | None = None
    s2_ds: torch.Tensor | None = None

    def downsampled(self, n: int):
        if self.s1_ds is None:
            d = fps_points(torch.cat([self.s1, self.s2]), n)
            self.s1_ds, self.s2_ds = d[: len(self.s1)], d[len(self.s1) :]
        return self.s1_ds, self.s2_ds


def _split(x, b):
    return x[:b], x[b:]


def run_cr_flow(model: TeleRegModel, p1: torch.Tensor, p2: torch.Tensor, gt_transforms=None) -> FlowOutputs:
    """Complete each part, then register the downsampled completions.

    ``gt_transforms`` (``(q12, t12, q21, t21)``) replaces the predicted
    transforms; it is the oracle-registration mode of the evaluator.
    """
    b, n = p1.shape[0], p1.shape[1]
    comp = model.completion(torch.cat([p1, p2]))
    d = fps_points(comp.s, n)
    d1, d2 = _split(d, b)
    if gt_transforms is None:
        q12, t12, q21, t21 = model.registration(d1, d2)
    else:
        q12, t12, q21, t21 = gt_transforms
    s1, s2 = _split(comp.s, b)
    lv = [_split(g, b) for g in comp.levels]
    q1o, q2o = _split(comp.q_o, b)
    return FlowOutputs(s1, s2, [x[0] for x in lv], [x[1] for x in lv], q1o, q2o, q12, t12, q21, t21, d1, d2)


def run_rc_flow(model: TeleRegModel, p1: torch.Tensor, p2: torch.Tensor, gt_transforms=None) -> FlowOutputs:
    """Register the parts, then complete each part united with the aligned other one."""
    b, n = p1.shape[0], p1.shape[1]
    if gt_transforms is None:
        q12, t12, q21, t21 = model.registration(p1, p2)
    else:
        q12, t12, q21, t21 = gt_transforms
    u1 = torch.cat([p1, tg.transform(q21, t21, p2)], dim=1)
    u2 = torch.cat([p2, tg.transform(q12, t12, p1)], dim=1)
    comp = model.completion(fps_points(torch.cat([u1, u2]), n))
    s1, s2 = _split(comp.s, b)
    lv = [_split(g, b) for g in comp.levels]
    q1o, q2o = _split(comp.q_o, b)
    return FlowOutputs(s1, s2, [x[0] for x in lv], [x[1] for x in lv], q1o, q2o, q12, t12, q21, t21)


# --- losses ---------------------------------------------------------------


def multilevel_emd(gen: list, gt: list, phases: int = DEFAULT_AUCTION_PHASES) -> torch.Tensor:
    """Mean over levels of the batched EMD; returns ``(B,)``."""
    return torch.stack([emd_loss(g, t, phases) for g, t in zip(gen, gt)]).mean(0)


def completion_terms(flow: FlowOutputs, batch: Batch, kind: str, phases: int = DEFAULT_AUCTION_PHASES):
    """``(l_c, l_o)`` for one flow, averaged over both parts and the batch."""
    gt1, gt2 = (batch.miss_cr1, batch.miss_cr2) if kind == "cr" else (batch.miss_rc1, batch.miss_rc2)
    l_c = (multilevel_emd(flow.levels1, gt1, phases) + multilevel_emd(flow.levels2, gt2, phases)).mean() / 2
    l_o = (tg.dist_q(flow.q1o, batch.r1o) + tg.dist_q(flow.q2o, batch.r2o)).mean() / 2
    return l_c, l_o


def registration_term(flow: FlowOutputs, batch: Batch) -> torch.Tensor:
    d12 = tg.dist_m(flow.q12, flow.t12, batch.m12_q, batch.m12_t)
    d21 = tg.dist_m(flow.q21, flow.t21, batch.m21_q, batch.m21_t)
    return ((d12 + d21) / 2).mean()


def _identity_deviation(flow: FlowOutputs) -> torch.Tensor:
    q, t = tg.compose(flow.q12, flow.t12, flow.q21, flow.t21)
    eye_q = torch.zeros_like(q)
    eye_q[..., 0] = 1.0
    return tg.dist_m(q, t, eye_q, torch.zeros_like(t))


def consistency_terms(cr: FlowOutputs, rc: FlowOutputs, n: int, phases: int = DEFAULT_AUCTION_PHASES, skip=()) -> dict:
    """Self-supervised agreement terms between the flows; names in ``skip`` are left at 0."""
    zero = cr.q12.new_zeros(())
    out = {}
    out["l_s_o"] = zero if "l_s_o" in skip else (
        (tg.dist_q(cr.q1o, rc.q1o) + tg.dist_q(cr.q2o, rc.q2o)).mean() / 2
    )
    if "l_s_c" in skip:
        out["l_s_c"] = zero
    else:
        a1, a2 = cr.downsampled(n)
        b1, b2 = rc.downsampled(n)
        out["l_s_c"] = (emd_loss(a1, b1, phases) + emd_loss(a2, b2, phases)).mean() / 2
    out["l_s_r"] = zero if "l_s_r" in skip else (
        (tg.dist_m(cr.q12, cr.t12, rc.q12, rc.t12) + tg.dist_m(cr.q21, cr.t21, rc.q21, rc.t21)).mean() / 2
    )
    out["l_s_t"] = zero if "l_s_t" in skip else (
        (_identity_deviation(cr) + _identity_deviation(rc)).mean() / 2
    )
    return out


def completion_loss(terms: dict, w: LossWeights):
    return w.c_cr * terms["l_c_cr"] + w.o_cr * terms["l_o_cr"] + w.c_rc * terms["l_c_rc"] + w.o_rc * terms["l_o_rc"]


def registration_loss(terms: dict, w: LossWeights):
    return w.r_cr * terms["l_r_cr"] + w.r_rc * terms["l_r_rc"]


def consistency_loss(terms: dict, w: LossWeights):
    return w.so * terms["l_s_o"] + w.sc * terms["l_s_c"] + w.sr * terms["l_s_r"] + w.st * terms["l_s_t"]


def total_loss(l_c, l_r, l_s):
    return l_c + l_r + l_s


def skipped_terms(config: TrainConfig) -> tuple:
    skip = [name for name, flag in (("l_s_o", config.no_ls_o), ("l_s_c", config.no_ls_c),
                                    ("l_s_r", config.no_ls_r), ("l_s_t", config.no_ls_t)) if flag]
    return tuple(skip)


def forward_losses(model: TeleRegModel, batch: Batch, config: TrainConfig):
    """Run the enabled flows and return ``(terms, total, flows)``.

    Terms of a disabled flow, and every consistency term outside two-flow
    mode, are exact zeros.
    """
    n = model.config.num_points
    zero = batch.p1.new_zeros(())
    terms = {name: zero for name in TERM_NAMES}
    cr = rc = None
    if config.flow_mode in ("both", "cr"):
        cr = run_cr_flow(model, batch.p1, batch.p2)
        terms["l_c_cr"], terms["l_o_cr"] = completion_terms(cr, batch, "cr", config.emd_phases)
        terms["l_r_cr"] = registration_term(cr, batch)
    if config.flow_mode in ("both", "rc"):
        rc = run_rc_flow(model, batch.p1, batch.p2)
        terms["l_c_rc"], terms["l_o_rc"] = completion_terms(rc, batch, "rc", config.emd_phases)
        terms["l_r_rc"] = registration_term(rc, batch)
    if cr is not None and rc is not None:
        terms.update(consistency_terms(cr, rc, n, config.emd_phases, skipped_terms(config)))
    w = config.weights
    total = total_loss(completion_loss(terms, w), registration_loss(terms, w), consistency_loss(terms, w))
    return terms, total, {"cr": cr, "rc": rc}


# --- training loop --------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    history: list
    final_checkpoint: Path
    best_checkpoint: Path | None
    final_eval: dict | None


def _batch_indices(n_train: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    # a pure function of (seed, iteration) so resumed runs draw the same batches
    if n_train <= batch_size:
        return np.arange(n_train)
    rng = np.random.default_rng([seed, iteration])
    return np.sort(rng.choice(n_train, size=batch_size, replace=False))


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Linear warmup, then constant or cosine decay to zero at the last iteration."""
    scale = min(1.0, iteration / config.warmup) if config.warmup > 0 else 1.0
    if config.lr_schedule == "cosine" and config.iterations > 0:
        scale *= 0.5 * (1.0 + math.cos(math.pi * min(iteration, config.iterations) / config.iterations))
    return config.lr * scale


def _dump_nonfinite(out_dir: Path, iteration: int, batch: Batch, terms: dict) -> Path:
    dump = out_dir / f"nonfinite_{iteration:06d}"
    dump.mkdir(parents=True, exist_ok=True)
    np.savez(dump / "batch.npz", p1=batch.p1.detach().numpy(), p2=batch.p2.detach().numpy())
    info = {"iteration": iteration, "sample_ids": batch.ids, "terms": {k: float(v.detach()) for k, v in terms.items()}}
    (dump / "terms.json").write_text(json.dumps(info, indent=1) + "\n", encoding="utf-8")
    return dump


def _read_log(path: Path, upto: int) -> list:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return [r for r in csv.DictReader(fh) if int(r["iteration"]) <= upto]


def _fmt(v) -> str:
    return repr(float(v.detach()) if isinstance(v, torch.Tensor) else float(v))


def validation_loss(model: TeleRegModel, samples: list[Sample], config: TrainConfig) -> float:
    totals = []
    with torch.no_grad():
        for i in range(0, len(samples), config.batch_size):
            batch = collate(samples[i : i + config.batch_size])
            _, total, _ = forward_losses(model, batch, config)
            totals.append(float(total) * len(batch))
    return sum(totals) / len(samples)


def train(data_dir, config: TrainConfig, out_dir, resume_from=None, samples: list[Sample] | None = None) -> TrainResult:
    """Optimize both networks jointly and write logs and checkpoints under ``out_dir``.

    Files: ``train_log.csv`` (one row per iteration), ``val_log.csv``,
    ``checkpoints/iter_XXXXXX``, ``checkpoints/best``, ``checkpoints/final``
    and ``final_eval.csv`` (evaluation on the validation split, or on the
    training split when no validation samples exist).
    """
    from .evaluation import evaluate, write_per_sample_csv
    from .metrics import write_eval_csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net_cfg = config.net_config()
    if samples is None:
        samples = load_split(data_dir, config.train_split, net_cfg)
    if not samples:
        raise ValueError(f"no samples in split {config.train_split!r}")
    val_samples = load_split(data_dir, config.val_split, net_cfg) if data_dir is not None else []

    model = build_model(net_cfg, config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    start = 0
    if resume_from is not None:
        manifest = load_into(model, resume_from, optimizer)
        start = int(manifest["iteration"])
        log.info("resumed from %s at iteration %d", resume_from, start)

    log_path = out_dir / "train_log.csv"
    history = _read_log(log_path, start)
    val_path = out_dir / "val_log.csv"
    if val_path.exists():
        kept = [ln for ln in val_path.read_text(encoding="utf-8").splitlines() if int(ln.split(",")[0]) <= start]
        val_path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")
    best_val = math.inf
    best_path = None
    ckpt_root = out_dir / "checkpoints"
    meta = {"seed": config.seed, "train_config": config.to_dict()}

    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow(row)
        t0 = time.perf_counter()
        for it in range(start + 1, config.iterations + 1):
            idx = _batch_indices(len(samples), config.batch_size, config.seed, it)
            batch = collate([samples[i] for i in idx])
            terms, total, _ = forward_losses(model, batch, config)
            if not torch.isfinite(total):
                dump = _dump_nonfinite(out_dir, it, batch, terms)
                raise NonFiniteLossError(f"non-finite loss at iteration {it}; batch dumped to {dump}")
            for group in optimizer.param_groups:
                group["lr"] = lr_at(config, it)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            row = {"iteration": it, **{k: _fmt(v) for k, v in terms.items()}, "total": _fmt(total)}
            writer.writerow(row)
            history.append(row)
            if it % 50 == 0 or it == config.iterations:
                fh.flush()
                log.info("iter %d total %.5f (%.2fs/it)", it, float(total.detach()), (time.perf_counter() - t0) / (it - start))
            if config.val_every and it % config.val_every == 0 and val_samples:
                v = validation_loss(model, val_samples, config)
                with open(val_path, "a", encoding="utf-8") as vf:
                    vf.write(f"{it},{v!r}\n")
                if v < best_val:
                    best_val = v
                    best_path = save_checkpoint(ckpt_root / "best", model, optimizer, {**meta, "iteration": it, "val_loss": v})
            if config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(ckpt_root / f"iter_{it:06d}", model, optimizer, {**meta, "iteration": it})

    final = save_checkpoint(ckpt_root / "final", model, optimizer, {**meta, "iteration": config.iterations})
    eval_samples = val_samples or samples
    results = evaluate(model, eval_samples, flow="rc" if config.flow_mode == "rc" else "cr")
    write_per_sample_csv(out_dir / "final_eval_samples.csv", results)
    rows = write_eval_csv(out_dir / "final_eval.csv", results.by_category())
    return TrainResult(out_dir, history, final, best_path, rows[-1] if rows else None)
