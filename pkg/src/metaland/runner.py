"""Training loop with per-epoch landscape evaluation, checkpoints and resume."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics, models
from .algorithms import (
    AdamState,
    NumericError,
    finetune_train_epoch,
    meta_test_evaluate,
    regularized_meta_step,
)
from .config import ConfigError, ExperimentConfig, from_dict
from .metrics import MetricRecord
from .models import ModelSpec
from .tasks import ClassPool, build_pool, fixed_eval_set, sample_task

log = logging.getLogger(__name__)

METRICS_JSONL = "metrics.jsonl"
METRICS_CSV = "metrics.csv"
MANIFEST = "manifest.json"


def _dump(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# evaluation


def eval_sets(cfg: ExperimentConfig, pool: ClassPool, epoch: int):
    """(coherence episodes, flatness episodes) for one evaluation."""
    ep, ev = cfg.episode, cfg.eval
    suffix = "" if ev.fixed_eval else f"/epoch{epoch}"
    coh = fixed_eval_set(pool, ep.n_way, ep.k_shot, ep.targets_per_class, ev.coherence_tasks,
                         f"coherence/{cfg.seeds.eval}{suffix}")
    flat = fixed_eval_set(pool, ep.n_way, ep.k_shot, ep.targets_per_class, ev.flatness_tasks,
                          f"flatness/{cfg.seeds.eval}{suffix}")
    return coh, flat


def _finite_or_none(x: float):
    return None if x is None or not np.isfinite(x) else float(x)


def evaluate(cfg: ExperimentConfig, spec: ModelSpec, theta: np.ndarray, epoch: int,
             pool: ClassPool | None = None, jobs: int = 1) -> tuple[MetricRecord, dict]:
    """All per-epoch metrics at meta-train solution ``theta``.

    Returns the record and a diagnostics dict (power-iteration convergence).
    """
    pool = pool or build_pool(cfg.tasks)
    hp = cfg.effective_hyper()
    head = cfg.seeds.eval if cfg.algorithm == "finetune" else None
    test_spec = replace(spec, n_way=cfg.episode.n_way) if head is not None else spec
    coh_eps, flat_eps = eval_sets(cfg, pool, epoch)

    acc, traces, _ = meta_test_evaluate(spec, theta, coh_eps, hp.alpha, hp.T, head, jobs)
    dirs, undefined = metrics.defined_directions(traces)
    traj = metrics.pairwise_mean(dirs) if len(dirs) >= 2 else float("nan")
    norm_mean, _ = metrics.trajectory_norm_stats(traces)
    support_loss = metrics.support_loss_stats(traces)
    grad_coh = metrics.gradient_coherence(spec, theta, coh_eps, head, jobs=jobs)

    diag = {"epoch": epoch, "spectral_not_converged": 0, "spectral_negative_dominant": 0}
    spectral = float("nan")
    if flat_eps:
        _, ftraces, _ = meta_test_evaluate(spec, theta, flat_eps, hp.alpha, hp.T, head, jobs)
        res = metrics.spectral_norms(test_spec, ftraces, flat_eps, cfg.eval.power_tol,
                                     cfg.eval.power_max_iters, seed=cfg.seeds.eval, jobs=jobs)
        spectral = float(np.mean([r.value for r in res]))
        diag["spectral_not_converged"] = sum(not r.converged for r in res)
        diag["spectral_negative_dominant"] = sum(r.eigenvalue < 0 for r in res)

    record = MetricRecord(
        epoch=epoch,
        avg_target_accuracy=acc,
        avg_support_loss=support_loss,
        avg_spectral_norm=_finite_or_none(spectral),
        trajectory_coherence=_finite_or_none(traj),
        gradient_coherence=grad_coh,
        avg_trajectory_norm=norm_mean,
        n_tasks_per_metric={
            "accuracy": len(coh_eps),
            "spectral_norm": len(flat_eps),
            "trajectory": len(dirs),
            "gradient": len(coh_eps),
        },
        undefined_direction_count=undefined,
    )
    return record, diag


# ---------------------------------------------------------------------------
# training


def train_epoch(cfg: ExperimentConfig, spec: ModelSpec, theta: np.ndarray, state: AdamState,
                pool: ClassPool, epoch: int):
    hp = cfg.effective_hyper()
    master = cfg.seeds.master
    if cfg.algorithm == "finetune":
        b = cfg.baseline
        theta, state, _ = finetune_train_epoch(spec, theta, pool, b.batch_size, b.iterations_per_epoch,
                                               (master, epoch), state, hp.beta, hp.b1, hp.b2, hp.eps)
        return theta, state
    ep = cfg.episode
    for it in range(cfg.iterations_per_epoch):
        batch = [sample_task(pool, "train", ep.n_way, ep.k_shot, ep.targets_per_class, (master, epoch, it, i))
                 for i in range(hp.n)]
        try:
            theta, state, _ = regularized_meta_step(spec, theta, batch, hp, state)
        except NumericError as err:
            raise NumericError(f"epoch {epoch}, iteration {it}: {err}") from None
    return theta, state


def _ckpt_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}"


def _save(out: Path, cfg: ExperimentConfig, spec: ModelSpec, theta, state: AdamState, epoch: int) -> str:
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    name = _ckpt_name(epoch)
    models.write_vector(ckdir / f"{name}.m.mlnd", state.m)
    models.write_vector(ckdir / f"{name}.v.mlnd", state.v)
    extra = {
        "optimizer": {"t": state.t, "m": f"{name}.m.mlnd", "v": f"{name}.v.mlnd"},
        "rng": {"scheme": "seedsequence-spawn-key", "master": cfg.seeds.master,
                "tasks_master": cfg.tasks.master_seed, "next_epoch": epoch + 1},
        "config": cfg.to_dict(),
    }
    models.save_checkpoint(ckdir / f"{name}.mlnd", spec, theta, seed=cfg.seeds.master, epoch=epoch,
                           algorithm=cfg.algorithm, extra=extra)
    return f"checkpoints/{name}.mlnd"


def load_training_state(path) -> tuple[ModelSpec, np.ndarray, AdamState, dict]:
    path = Path(path)
    spec, theta, meta = models.load_checkpoint(path)
    opt = meta.get("optimizer")
    if opt is None:
        state = AdamState.zeros(spec.n_params)
    else:
        state = AdamState(models.read_vector(path.parent / opt["m"]),
                          models.read_vector(path.parent / opt["v"]), int(opt["t"]))
    return spec, theta, state, meta


@dataclass
class RunManifest:
    path: Path
    data: dict

    def save(self) -> None:
        _dump(self.path, self.data)

    @classmethod
    def load(cls, out: Path) -> "RunManifest":
        p = Path(out) / MANIFEST
        return cls(p, json.loads(p.read_text(encoding="utf-8")))


def _write_metrics(out: Path, records: list[MetricRecord]) -> None:
    (out / METRICS_JSONL).write_text(metrics.records_to_jsonl(records), encoding="utf-8")
    metrics.write_csv(records, out / METRICS_CSV)


def run_train(cfg: ExperimentConfig, out=None, jobs: int = 1, resume: bool = False) -> RunManifest:
    out = Path(out or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as err:
        raise ConfigError(f"output directory {out} is not writable: {err}") from None

    pool = build_pool(cfg.tasks)
    spec = cfg.model_spec()
    records: list[MetricRecord] = []
    start_epoch = 0

    if resume and (out / MANIFEST).exists():
        manifest = RunManifest.load(out)
        if manifest.data["config"] != cfg.to_dict():
            raise ConfigError("cannot resume: config differs from the one recorded in the manifest")
        ckpts = manifest.data["checkpoints"]
        if ckpts:
            spec_ck, theta, state, meta = load_training_state(out / ckpts[-1])
            if spec_ck != spec:
                raise ConfigError(f"checkpoint spec {spec_ck} does not match config spec {spec}")
            last = int(meta["epoch"])
            records = [r for r in metrics.read_jsonl(out / METRICS_JSONL) if r.epoch <= last]
            start_epoch = last + 1
            manifest.data["checkpoints"] = ckpts[: last + 1]
            manifest.data["status"] = "running"
            manifest.data.setdefault("resumed_from", []).append(last)
            log.info("resuming %s from epoch %d", out, last)
    else:
        manifest = RunManifest(out / MANIFEST, {
            "config": cfg.to_dict(),
            "version": __version__,
            "status": "running",
            "checkpoints": [],
            "metrics": {"jsonl": METRICS_JSONL, "csv": METRICS_CSV},
            "timings": [],
            "diagnostics": [],
        })
    manifest.save()

    if start_epoch == 0:
        theta = models.init_params(spec, cfg.seeds.master)
        state = AdamState.zeros(spec.n_params)

    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        if epoch > 0:
            try:
                theta, state = train_epoch(cfg, spec, theta, state, pool, epoch)
            except NumericError:
                manifest.data["status"] = "failed"
                manifest.save()
                raise
        t1 = time.perf_counter()
        record, diag = evaluate(cfg, spec, theta, epoch, pool, jobs)
        t2 = time.perf_counter()
        records.append(record)
        _write_metrics(out, records)
        manifest.data["checkpoints"].append(_save(out, cfg, spec, theta, state, epoch))
        manifest.data["timings"].append({"epoch": epoch, "train_s": t1 - t0, "eval_s": t2 - t1})
        manifest.data["diagnostics"].append(diag)
        manifest.save()
        log.info("epoch %d acc=%.4f traj=%s grad=%.4g", epoch, record.avg_target_accuracy,
                 record.trajectory_coherence, record.gradient_coherence)

    manifest.data["status"] = "complete"
    manifest.save()
    return manifest


def run_eval(checkpoint, cfg: ExperimentConfig | None = None, jobs: int = 1) -> MetricRecord:
    """Re-evaluate a saved meta-train solution with the per-epoch protocol."""
    spec, theta, _, meta = load_training_state(checkpoint)
    if cfg is None:
        if "config" not in meta:
            raise ConfigError(f"{checkpoint}: no config snapshot in sidecar; pass --config")
        cfg = from_dict(meta["config"])
    expected = cfg.model_spec()
    if expected.n_params != spec.n_params or expected != spec:
        raise ConfigError(
            f"checkpoint holds {spec.n_params} parameters ({spec}), config expects "
            f"{expected.n_params} ({expected})"
        )
    record, _ = evaluate(cfg, spec, theta, int(meta["epoch"]), jobs=jobs)
    return record
