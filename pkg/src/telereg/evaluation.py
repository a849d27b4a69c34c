"""Model evaluation and the noise / outlier stress harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .datagen import StressSpec
from .geometry import RigidTransform, apply
from .metrics import METRIC_NAMES, EvalRecord, eval_completion, eval_registration
from .networks import NetConfig, TeleRegModel
from .pointcloud import fps_indices
from .trainer import Sample, collate, run_cr_flow, run_rc_flow

EVAL_BATCH = 8
PER_SAMPLE_HEADER = ("sample_id", "category") + METRIC_NAMES
STRESS_CSV_HEADER = ("setting", "value", "filter") + METRIC_NAMES + ("n_samples",)


@dataclass
class SampleResult:
    sample_id: str
    category: str
    record: EvalRecord


@dataclass
class EvalResults:
    samples: list = field(default_factory=list)

    def by_category(self) -> dict[str, list[EvalRecord]]:
        out: dict[str, list[EvalRecord]] = {}
        for s in self.samples:
            out.setdefault(s.category, []).append(s.record)
        return out

    def mean(self) -> EvalRecord:
        return EvalRecord.mean([s.record for s in self.samples])


def _transform(q, t) -> RigidTransform:
    return RigidTransform(np.asarray(q, dtype=np.float64), np.asarray(t, dtype=np.float64))


def _np(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().astype(np.float64)


FLOWS = ("both", "cr", "rc")


def _full_reference(s: Sample, flow: str, k: int) -> np.ndarray:
    """Ground-truth counterpart of a flow's ``2N``-point completion of part ``k``.

    C-R completes the part itself: its unperturbed input plus what it misses.
    R-C completes the ground-truth aligned union, sampled to ``N`` like the
    network input, plus what that union misses.
    """
    clean = (s.clean1, s.clean2)
    if flow == "cr":
        return np.concatenate([clean[k], s.miss[f"cr{k + 1}"][-1]])
    to_k = s.pair.m21_gt if k == 0 else s.pair.m12_gt
    u = np.concatenate([clean[k], apply(to_k, clean[1 - k])])
    n = len(clean[k])
    return np.concatenate([u[fps_indices(u, n, 0)], s.miss[f"rc{k + 1}"][-1]])


def evaluate(
    model: TeleRegModel,
    samples: list[Sample],
    flow: str = "cr",
    oracle_registration: bool = False,
) -> EvalResults:
    """Per-sample registration and completion errors.

    ``"cr"`` or ``"rc"`` take everything from one flow; ``"both"`` reports
    registration from the C-R flow and completion from the R-C flow.
    Completion levels are scored against the ground-truth missing parts of
    the flow that produced them. With ``oracle_registration`` the
    ground-truth transforms replace the predicted ones everywhere.
    """
    if flow not in FLOWS:
        raise ValueError(f"flow must be one of {FLOWS}, got {flow!r}")
    reg_flow = "rc" if flow == "rc" else "cr"
    comp_flow = "cr" if flow == "cr" else "rc"
    runs = {"cr": run_cr_flow, "rc": run_rc_flow}
    model.eval()
    results = EvalResults()
    with torch.no_grad():
        for i in range(0, len(samples), EVAL_BATCH):
            chunk = samples[i : i + EVAL_BATCH]
            batch = collate(chunk)
            gt = (batch.m12_q, batch.m12_t, batch.m21_q, batch.m21_t) if oracle_registration else None
            outs = {f: runs[f](model, batch.p1, batch.p2, gt_transforms=gt) for f in {reg_flow, comp_flow}}
            reg, comp = outs[reg_flow], outs[comp_flow]
            for b, s in enumerate(chunk):
                if oracle_registration:
                    pred12, pred21 = s.pair.m12_gt, s.pair.m21_gt
                else:
                    pred12 = _transform(_np(reg.q12[b]), _np(reg.t12[b]))
                    pred21 = _transform(_np(reg.q21[b]), _np(reg.t21[b]))
                e_theta, e_t = eval_registration(pred12, pred21, s.pair.m12_gt, s.pair.m21_gt)
                gen_levels = [[_np(g[b]) for g in lv] for lv in (comp.levels1, comp.levels2)]
                gen_full = [_np(comp.s1[b]), _np(comp.s2[b])]
                gt_levels = [s.miss[f"{comp_flow}1"], s.miss[f"{comp_flow}2"]]
                gt_full = [_full_reference(s, comp_flow, k) for k in range(2)]
                e = eval_completion(gen_levels, gen_full, gt_levels, gt_full)
                results.samples.append(SampleResult(s.sample_id, s.category, EvalRecord(e_theta, e_t, *e)))
    return results


def write_per_sample_csv(path, results: EvalResults) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PER_SAMPLE_HEADER)
        for s in results.samples:
            writer.writerow([s.sample_id, s.category] + [repr(getattr(s.record, k)) for k in METRIC_NAMES])


@dataclass(frozen=True)
class StressSetting:
    kind: str  # "noise" or "outliers"
    value: float
    spec: StressSpec

    @property
    def filtered(self) -> bool:
        return self.spec.filter_enabled


def stress_settings(noise_levels=(), outlier_counts=(), filter_enabled: bool = False) -> list[StressSetting]:
    out = [StressSetting("noise", float(z), StressSpec(noise_level=float(z))) for z in noise_levels]
    for k in outlier_counts:
        out.append(StressSetting("outliers", int(k), StressSpec(outlier_count=int(k))))
        if filter_enabled:
            out.append(StressSetting("outliers", int(k), StressSpec(outlier_count=int(k), filter_enabled=True)))
    return out


def stress_sweep(
    model: TeleRegModel,
    pairs: list,
    settings: list[StressSetting],
    seed: int = 0,
    flow: str = "cr",
) -> list[dict]:
    """One aggregate row per setting; ``pairs`` is a list of ``(sample_id, ScanPair)``.

    Perturbations are drawn per sample from ``(seed, sample_id, part)``, so
    every setting sees the same random stream and rows are reproducible.
    """
    cfg: NetConfig = model.config
    rows = []
    for setting in settings:
        samples = [Sample.from_pair(sid, pair, cfg, setting.spec, seed) for sid, pair in pairs]
        record = evaluate(model, samples, flow=flow).mean()
        rows.append(
            {
                "setting": setting.kind,
                "value": setting.value,
                "filter": int(setting.filtered),
                **record.as_dict(),
                "n_samples": len(samples),
            }
        )
    return rows


def write_stress_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=STRESS_CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
