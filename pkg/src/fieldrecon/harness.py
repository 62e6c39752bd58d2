"""Evaluation and ablation pipelines shared by the command line and the tests.

Every metric file is a pure function of (dataset, config, seed): no
timings, host names or paths are written into it, so strict-mode reruns
produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .base import BaseReconstructor
from .baselines.gappy_pod import GappyPOD
from .baselines.kriging import Kriging
from .baselines.neural_process import CNP, TNP
from .baselines.rbf import RbfInterpolation
from .config import RunConfig
from .data import Dataset, NoiseSpec, NormalizationStats, Snapshot, add_noise, atomic_write, sample_observations
from .metrics import (EvalReport, SnapshotMetrics, Spectrum, aggregate, energy_spectrum,
                      format_table, r_squared, rmse_by_component, spectrum_distance)
from .rformer.checkpoint import Checkpoint
from .rformer.estimator import RFormerReconstructor

log = logging.getLogger(__name__)

METHODS = ("rformer", "interpolation", "kriging", "gappy_pod", "cnp", "tnp", "truth")


class TruthOracle(BaseReconstructor):
    """Returns the reference values; a sanity check for the evaluation pipeline."""

    def predict(self, snap, split):
        return snap.values[split.query].copy()


def observed_count(fraction: float, n_points: int) -> int:
    return int(min(max(round(fraction * n_points), 1), n_points - 1))


def make_method(name: str, cfg: RunConfig, checkpoint: Checkpoint | None = None) -> BaseReconstructor:
    """Unfitted estimator (or, for ``rformer``, one restored from ``checkpoint``)."""
    if name == "rformer":
        if checkpoint is None:
            raise ValueError("the rformer method needs a trained checkpoint")
        return RFormerReconstructor.from_checkpoint(
            checkpoint, chunk_budget=cfg.eval.chunk_budget or None,
            max_context=cfg.eval.max_context or None)
    if name == "interpolation":
        return RbfInterpolation(cfg.rbf.neighbors, cfg.rbf.smoothing)
    if name == "kriging":
        k = cfg.kriging
        return Kriging(k.length_scale, k.noise, k.jitter, k.max_points)
    if name == "gappy_pod":
        return GappyPOD(cfg.gappy_pod.energy_threshold)
    if name == "cnp":
        c = cfg.cnp
        return CNP(c.hidden, c.encoder_layers, c.decoder_layers, c.lr, c.batch_size, c.epochs,
                   c.max_query, obs_fraction=cfg.train.obs_fraction, seed=cfg.run.seed,
                   strict=cfg.run.strict)
    if name == "truth":
        return TruthOracle()
    if name == "tnp":
        t = cfg.tnp
        return TNP(t.hidden, t.transformer_layers, t.heads, t.lr, t.weight_decay, t.batch_size,
                   t.epochs, t.max_query, obs_fraction=cfg.train.obs_fraction, seed=cfg.run.seed,
                   strict=cfg.run.strict)
    raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


def fit_methods(names: Sequence[str], cfg: RunConfig, train_set: Dataset,
                checkpoint: Checkpoint | None = None) -> dict[str, BaseReconstructor]:
    out = {}
    for name in names:
        est = make_method(name, cfg, checkpoint)
        if est.requires_fit and name != "rformer":
            est.fit(train_set)
        out[name] = est
    return out


@dataclass
class EvalResult:
    reports: list[EvalReport]
    fields: dict[str, list[np.ndarray]]

    def report(self, method: str) -> EvalReport:
        return next(r for r in self.reports if r.method == method)


def evaluate(methods: Mapping[str, BaseReconstructor], test_set: Dataset, obs_fraction: float,
             noise_scale: float = 0.0, train_std=None, spectrum: bool = True,
             spectrum_resolution: int = 64, seed: int = 0, max_context: int | None = None) -> EvalResult:
    """Reconstruct every test snapshot with every method and score the query points.

    Observation sets are farthest-point samples seeded by the snapshot index,
    so every method sees identical splits. With ``noise_scale > 0`` the
    observed values (not the reference) are perturbed by
    ``noise_scale * train_std`` Gaussian noise.
    """
    names = list(test_set.component_names)
    per = {k: [] for k in methods}
    fields = {k: [] for k in methods}
    spectra = {k: [] for k in methods}
    truth_spectra = []
    do_spec = spectrum and test_set.d_v >= test_set.d_x >= 2
    for snap in test_set:
        split = sample_observations(snap, observed_count(obs_fraction, snap.n_points), snap.snapshot_index)
        seen = snap
        if noise_scale > 0:
            seen = add_noise(snap, NoiseSpec(noise_scale, seed * 1_000_003 + snap.snapshot_index), train_std)
        if do_spec:
            truth_spectra.append(_velocity_spectrum(snap, snap.values, spectrum_resolution))
        for name, est in methods.items():
            if max_context is not None and hasattr(est, "max_context"):
                est.max_context = max_context
            full = est.reconstruct(seen, split)
            fields[name].append(full)
            pred, ref = full[split.query], snap.values[split.query]
            r2 = {c: r_squared(pred[:, i], ref[:, i]) for i, c in enumerate(names) if np.ptp(ref[:, i]) > 0}
            per[name].append(SnapshotMetrics(snap.snapshot_index, rmse_by_component(pred, ref, names), r2))
            if do_spec:
                spectra[name].append(_velocity_spectrum(snap, full, spectrum_resolution))
    reports = []
    for name in methods:
        rep = aggregate(name, names, per[name])
        if do_spec:
            truth_e = np.mean([s.energy for s in truth_spectra], axis=0)
            est_e = np.mean([s.energy for s in spectra[name]], axis=0)
            k = truth_spectra[0].k
            rep.spectrum = {"k": k.tolist(), "truth": truth_e.tolist(), "energy": est_e.tolist(),
                            "distance": spectrum_distance(Spectrum(k, est_e), Spectrum(k, truth_e))}
        reports.append(rep)
    return EvalResult(reports, fields)


def _velocity_spectrum(snap: Snapshot, values: np.ndarray, resolution: int):
    lo, hi = snap.coords.min(0), snap.coords.max(0)
    return energy_spectrum(snap.coords, values[:, :snap.d_x], resolution, bounds=(lo, hi))


def write_reports(out_dir, result: EvalResult, components: Sequence[str]) -> None:
    """``metrics.json`` (all methods) and ``table.txt``; written atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"components": list(components), "methods": [r.to_dict() for r in result.reports]}
    atomic_write(out_dir / "metrics.json", json.dumps(payload, indent=2) + "\n")
    atomic_write(out_dir / "table.txt", format_table(result.reports))


# --- ablations -------------------------------------------------------------------

def ablation_row(axis: str, value: float, report: EvalReport) -> dict:
    comps = {c: report.mean[c] for c in report.components}
    return {"axis": axis, "value": value, **comps, "total": report.mean["total"],
            "total_std": report.std["total"]}


def ablation_csv(rows: Sequence[dict], components: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", *components, "total", "total_std"])
    for r in rows:
        w.writerow([r["axis"], repr(float(r["value"]))] +
                   [repr(float(r[c])) for c in components] +
                   [repr(float(r["total"])), repr(float(r["total_std"]))])
    return buf.getvalue()


def run_ablation(axis: str, grid: Sequence[float], cfg: RunConfig, train_set: Dataset,
                 test_set: Dataset, checkpoint: Checkpoint | None, out_dir,
                 retrain: bool = False) -> list[dict]:
    """Sweep ``density`` or ``noise`` and write ``<out_dir>/<axis>.csv``.

    Each grid point stores its report under ``<axis>_<value>/metrics.json``;
    points whose report already exists are read back instead of recomputed,
    which makes an interrupted sweep resumable. With ``retrain`` a model is
    trained per grid point (observation fraction or training noise set to
    the grid value); otherwise ``checkpoint`` is reused.
    """
    if axis not in ("density", "noise"):
        raise ValueError("axis must be 'density' or 'noise'")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = NormalizationStats.from_dataset(train_set)
    rows = []
    for value in grid:
        point = out_dir / f"{axis}_{value:g}"
        mfile = point / "metrics.json"
        if mfile.exists():
            rep = _report_from_json(json.loads(mfile.read_text()))
            log.info("%s=%g: reusing %s", axis, value, mfile)
        else:
            ckpt = checkpoint
            if retrain or ckpt is None:
                est = _rformer_from_config(cfg, obs_fraction=value if axis == "density" else None,
                                           noise_scale=value if axis == "noise" else 0.0)
                est.fit(train_set)
                ckpt = est.checkpoint_
            method = make_method("rformer", cfg, ckpt)
            fraction = value if axis == "density" else cfg.eval.obs_fraction
            res = evaluate({"rformer": method}, test_set, fraction,
                           noise_scale=value if axis == "noise" else 0.0,
                           train_std=stats.value_std, spectrum=False, seed=cfg.run.seed,
                           max_context=_context_cap(cfg, test_set, fraction))
            rep = res.reports[0]
            point.mkdir(parents=True, exist_ok=True)
            atomic_write(mfile, json.dumps(rep.to_dict(), indent=2) + "\n")
        rows.append(ablation_row(axis, value, rep))
    atomic_write(out_dir / f"{axis}.csv", ablation_csv(rows, test_set.component_names))
    return rows


def _context_cap(cfg: RunConfig, test_set: Dataset, fraction: float) -> int | None:
    """Feed at most ``m_b`` observations (the training context size) when density exceeds it."""
    m = observed_count(fraction, test_set[0].n_points)
    cap = cfg.eval.max_context or cfg.train.m_b
    return cap if m > cap else None


def _rformer_from_config(cfg: RunConfig, obs_fraction=None, noise_scale=0.0) -> RFormerReconstructor:
    m, t = cfg.model, cfg.train
    return RFormerReconstructor(
        m.num_layers, m.num_heads, m.d_token, m.ffn_hidden, m.head_hidden, m.max_seq_len,
        epochs=t.epochs, batch_size=t.batch_size, m_b=t.m_b, n_b=t.n_b, lr=t.lr,
        obs_fraction=obs_fraction if obs_fraction is not None else t.obs_fraction,
        samples_per_snapshot=t.samples_per_snapshot or None, noise_scale=noise_scale,
        seed=cfg.run.seed, strict=cfg.run.strict)


def _report_from_json(d: dict) -> EvalReport:
    snaps = [SnapshotMetrics(s["snapshot_index"], s["rmse"], s.get("r2")) for s in d["snapshots"]]
    return EvalReport(d["method"], d["components"], snaps, d["mean"], d["std"], d.get("spectrum"))


def train_rformer(cfg: RunConfig, train_set: Dataset, checkpoint_path=None,
                  resume: Checkpoint | None = None, on_epoch=None) -> Checkpoint:
    """Train the configured model; resumes from ``resume`` if given."""
    from .rformer.model import ModelConfig, RFormer
    from .rformer.training import TrainConfig, train
    m, t = cfg.model, cfg.train
    mcfg = ModelConfig(m.num_layers, m.num_heads, m.d_token, m.ffn_hidden, m.head_hidden,
                       m.max_seq_len, train_set.d_x, train_set.d_v)
    if resume is not None:
        if resume.config != mcfg:
            raise ValueError("checkpoint architecture does not match the configured model")
        model = RFormer(mcfg, params=resume.params)
    else:
        model = RFormer(mcfg, seed=cfg.run.seed)
    tcfg = TrainConfig(epochs=t.epochs, batch_size=t.batch_size, obs_fraction=t.obs_fraction,
                       m_b=t.m_b, n_b=t.n_b, lr=t.lr, seed=cfg.run.seed,
                       samples_per_snapshot=t.samples_per_snapshot or None,
                       split_pool=t.split_pool, strict=cfg.run.strict)
    stats = resume.stats if resume is not None else None
    return train(model, train_set, tcfg, stats=stats, resume=resume,
                 checkpoint_path=checkpoint_path, on_epoch=on_epoch)
