"""End-to-end run: FP model, calibration corpus, quantizer init, then per
block a sample-weight update followed by weighted block calibration, and
finally the diagnostics report.

Every stage writes its artifacts under ``out/<run-id>/`` and records their
sha256 in ``manifest.json``. A stage whose key (config slice plus upstream
hashes) and files are unchanged is loaded instead of recomputed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diagnostics as dg
from ..calibration import CalibrationSet, assign_groups, generate_calibration, split_validation
from ..diffusion import DenoiserModel, NoiseSchedule, TrainConfig, make_dataset, train_fp
from ..errors import DiffQError
from ..quantizer import (BlockPlan, OutputObjective, QuantConfig, QuantState, block_calibrate,
                         calibrate_activations, init_quant)
from ..weighting import (DistillObjective, GroupIndex, MetaConfig, SampleWeights,
                         algorithm1_optimize, relative_inner_lr, verify_lemma_42,
                         verify_lemma_43)
from .config import ExperimentConfig, config_hash, section_hash

log = logging.getLogger(__name__)

STAGE_IDS = {"fp": 1, "calib": 2, "quant_init": 3, "diagnostics": 5}
BLOCK_STAGE_BASE = 100
META_STAGE_BASE = 200
LEMMA_STAGE = 300


def stage_rng(seed: int, stage_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage_id]))


def stage_seed(seed: int, stage_id: int) -> int:
    return int(np.random.SeedSequence([seed, stage_id]).generate_state(1, np.uint32)[0])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.run.mode}-s{cfg.run.seed}-{config_hash(cfg)[:10]}"


def quant_config(cfg: ExperimentConfig) -> QuantConfig:
    q = cfg.quant
    return QuantConfig(bits=q.bits, per_channel=q.per_channel, symmetric=q.symmetric, lam=q.lam,
                       b_start=q.b_start, b_end=q.b_end, warmup=q.warmup, iters=q.iters, lr=q.lr,
                       act_bits=q.act_bits, batch_size=q.batch_size)


def meta_config(cfg: ExperimentConfig) -> MetaConfig:
    w = cfg.weighting
    return MetaConfig(inner_lr=w.inner_lr, outer_lr=w.outer_lr, t_acc=cfg.t_acc,
                      meta_iters=w.meta_iters, batch=w.batch, pseudo_lr=w.pseudo_lr or None,
                      mode=w.mode, restrict_batch=w.restrict_batch,
                      max_step=w.max_step or None)


def schedule_for(cfg: ExperimentConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return NoiseSchedule.linear(d.T_steps, d.beta_start, d.beta_end)


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    config: dict
    seeds: dict
    stages: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    status: str = "running"
    failed_stage: str | None = None

    def content_hashes(self) -> dict:
        return {name: st["files"] for name, st in self.stages.items()}

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "config_hash": self.config_hash, "config": self.config,
                "seeds": self.seeds, "stages": self.stages, "timings": self.timings,
                "notes": self.notes, "status": self.status, "failed_stage": self.failed_stage}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["run_id"], d["config_hash"], d["config"], d["seeds"], d["stages"],
                   d.get("timings", {}), d.get("notes", []), d.get("status", "running"),
                   d.get("failed_stage"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Run:
    """Artifact bookkeeping for one run directory."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None, resume: bool = True):
        self.cfg = cfg
        self.id = run_id(cfg)
        self.root = Path(out_dir if out_dir is not None else cfg.run.out) / self.id
        self.ckpt = self.root / "checkpoints"
        self.reports = self.root / "reports"
        self.csv = self.root / "csv"
        for d in (self.ckpt, self.reports, self.csv):
            d.mkdir(parents=True, exist_ok=True)
        seed = cfg.run.seed
        seeds = {"seed": seed, **{k: stage_seed(seed, v) for k, v in STAGE_IDS.items()}}
        self.manifest_path = self.root / "manifest.json"
        old = None
        if resume and self.manifest_path.exists():
            old = RunManifest.load(self.manifest_path)
            if old.config_hash != config_hash(cfg):
                old = None
        self.previous = old.stages if old else {}
        notes = list(cfg.notes)
        if cfg.weighting.meta_iters != 1500:
            notes.append(f"meta_iters = {cfg.weighting.meta_iters} (full-scale setting uses 1500 "
                         "iterations per weight update)")
        self.manifest = RunManifest(self.id, config_hash(cfg), cfg.to_dict(), seeds, notes=notes)
        self.recomputed: list = []

    def cached(self, name: str, key: str) -> bool:
        st = self.previous.get(name)
        if not st or st["key"] != key:
            return False
        for rel, digest in st["files"].items():
            p = self.root / rel
            if not p.exists() or file_sha256(p) != digest:
                return False
        self.manifest.stages[name] = st
        self.manifest.timings[name] = 0.0
        return True

    def record(self, name: str, key: str, paths, seconds: float):
        files = {str(Path(p).relative_to(self.root)): file_sha256(p) for p in paths}
        self.manifest.stages[name] = {"key": key, "files": files}
        self.manifest.timings[name] = round(seconds, 3)
        self.recomputed.append(name)
        self.save()

    def stage_hash(self, name: str) -> str:
        st = self.manifest.stages[name]
        blob = json.dumps(st, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self):
        self.manifest.save(self.manifest_path)


def _with_sidecar(path) -> list:
    return [Path(path), Path(str(path) + ".json")]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_fp(run: Run) -> DenoiserModel:
    cfg, seed = run.cfg, run.cfg.run.seed
    key = section_hash(cfg, "diffusion", extra=seed)
    path = run.ckpt / "fp.qcw1"
    if run.cached("fp", key):
        return DenoiserModel.load(path)
    t0 = time.perf_counter()
    d = cfg.diffusion
    data = make_dataset(d.dataset, d.n_data, stage_seed(seed, STAGE_IDS["fp"]))
    tc = TrainConfig(iters=d.train_iters, batch=d.train_batch, lr=d.train_lr, hidden=d.hidden,
                     depth=d.depth, emb_dim=d.emb_dim, activation=d.activation,
                     seed=stage_seed(seed, 11))
    res = train_fp(data, schedule_for(cfg), tc)
    log.info("fp: loss %.4f -> %.4f", res.initial_loss, res.final_loss)
    res.model.save(path)
    run.record("fp", key, _with_sidecar(path), time.perf_counter() - t0)
    return res.model


def stage_calib(run: Run, fp: DenoiserModel) -> CalibrationSet:
    cfg, seed = run.cfg, run.cfg.run.seed
    key = section_hash(cfg, "calibration", extra=run.stage_hash("fp"))
    path = run.ckpt / "calib.qcal"
    if run.cached("calib", key):
        return CalibrationSet.load(path)
    t0 = time.perf_counter()
    c = cfg.calibration
    s = stage_seed(seed, STAGE_IDS["calib"])
    cs = generate_calibration(fp, schedule_for(cfg), c.n_per_timestep, c.interval, s)
    cs = assign_groups(split_validation(cs, c.val_fraction, s + 1), c.groups)
    cs.save(path)
    run.record("calib", key, [path], time.perf_counter() - t0)
    return cs


def stage_quant_init(run: Run, fp: DenoiserModel, cs: CalibrationSet) -> QuantState:
    cfg = run.cfg
    key = section_hash(cfg, "quant", extra=run.stage_hash("calib"))
    path = run.ckpt / "quant_init.qcw1"
    if run.cached("quant_init", key):
        return QuantState.load(path, fp)
    t0 = time.perf_counter()
    state = init_quant(fp, quant_config(cfg))
    if cfg.quant.act_bits:
        x, t = cs.subset(cs.indices("train"))
        state = calibrate_activations(state, x, t, cfg.quant.act_bits)
    state.save(path)
    run.record("quant_init", key, _with_sidecar(path), time.perf_counter() - t0)
    return state


@dataclass
class BlockOutcome:
    state: QuantState
    weights: SampleWeights
    alignment: dg.AlignmentTable | None = None
    reports: list = field(default_factory=list)


def _alignment(obj, theta, gi: GroupIndex, weights: SampleWeights, buckets: int):
    G_train = obj.per_sample_gradients(theta, gi.train_all)
    group_grads = dg.group_gradients(obj, theta, gi, "val")
    return dg.alignment_correlation(weights.omega, G_train, group_grads, buckets)


def stage_blocks(run: Run, fp: DenoiserModel, cs: CalibrationSet, state: QuantState,
                 weighted: bool) -> BlockOutcome:
    cfg, seed = run.cfg, run.cfg.run.seed
    plan = BlockPlan.per_layer(fp)
    qc = quant_config(cfg)
    mc = meta_config(cfg)
    gi = GroupIndex.from_calibration(cs)
    tr = cs.indices("train")
    x_tr, t_tr = cs.subset(tr)
    weights = SampleWeights.uniform(len(tr), cfg.weighting.tau)
    prev = run.stage_hash("quant_init")
    alignment = None
    reports = []
    for k in range(len(plan.blocks)):
        name = f"block{k}"
        wslice = section_hash(cfg, "weighting") if weighted else "uniform"
        key = hashlib.sha256(f"{prev}|{section_hash(cfg, 'quant')}|{wslice}".encode()).hexdigest()
        qpath = run.ckpt / f"{name}.qcw1"
        wpath = run.ckpt / f"weights_{name}.json"
        apath = run.ckpt / "alignment.json"
        if run.cached(name, key):
            state = QuantState.load(qpath, fp)
            weights = SampleWeights.load(wpath)
            if f"checkpoints/{apath.name}" in run.manifest.stages[name]["files"]:
                alignment = dg.AlignmentTable(**json.loads(apath.read_text()))
            prev = run.stage_hash(name)
            continue
        t0 = time.perf_counter()
        update = weighted and (cfg.weighting.update == "every_block" or k == 0)
        if update:
            obj = OutputObjective(state, plan, k, cs.x, cs.t, downstream=cfg.weighting.downstream)
            theta = obj.theta0()
            weights = algorithm1_optimize(obj, theta, gi, weights, mc,
                                          stage_rng(seed, META_STAGE_BASE + k))
            if k == 0 and cfg.diagnostics.enabled:
                alignment = _alignment(obj, theta, gi, weights, cfg.diagnostics.buckets)
        state, rep = block_calibrate(state, plan, k, x_tr, t_tr, weights.omega, qc,
                                     stage_rng(seed, BLOCK_STAGE_BASE + k))
        reports.append(rep)
        log.info("%s: recon %.5f -> %.5f", name, rep.init_loss, rep.final_loss)
        state.save(qpath)
        weights.save(wpath)
        extra = []
        if update and k == 0 and alignment is not None:
            apath.write_text(json.dumps(alignment.to_dict(), sort_keys=True))
            extra = [apath]
        run.record(name, key, _with_sidecar(qpath) + [wpath] + extra, time.perf_counter() - t0)
        prev = run.stage_hash(name)
    final = run.ckpt / "quant.qcw1"
    state.save(final)
    return BlockOutcome(state, weights, alignment, reports)


def lemma_instance(fp: DenoiserModel, cs: CalibrationSet, state: QuantState, n_train: int,
                   rng) -> tuple:
    """Distillation objective at the quantized point over a training subsample
    plus every validation sample, with its group index."""
    tr = cs.indices("train")
    pick = np.sort(rng.choice(tr, size=min(n_train, len(tr)), replace=False))
    ids = np.concatenate([pick, cs.indices("val")])
    order = np.argsort(ids)
    ids = ids[order]
    obj = DistillObjective(fp, cs.x[ids], cs.t[ids])
    local = {int(i): j for j, i in enumerate(ids)}
    gid = cs.group_ids
    train = [np.array([local[int(i)] for i in pick if gid[i] == g], dtype=np.int64)
             for g in range(cs.G)]
    val = [np.array([local[int(i)] for i in cs.indices("val", g)], dtype=np.int64)
           for g in range(cs.G)]
    gi = GroupIndex(train, val, np.array([local[int(i)] for i in pick], dtype=np.int64))
    return obj, state.effective_params(), gi


def run_lemmas(cfg: ExperimentConfig, fp, cs, state0, seed: int) -> dict:
    g = cfg.diagnostics
    obj, theta, gi = lemma_instance(fp, cs, state0, g.lemma_train, stage_rng(seed, LEMMA_STAGE))
    w = SampleWeights.uniform(len(gi.train_all), cfg.weighting.tau)
    lr = relative_inner_lr(obj, theta, gi, g.lemma_step)
    r43 = verify_lemma_43(obj, theta, gi, w, eta=g.lemma_eta, t_acc=cfg.t_acc,
                          inner_lr=lr, seed=seed)
    r43_one = verify_lemma_43(obj, theta, gi, w, eta=g.lemma_eta, t_acc=1,
                              inner_lr=lr, seed=seed)
    out = {"lemma43": r43.to_dict(), "lemma43_t1": r43_one.to_dict()}
    if gi.G >= 2:
        r42 = verify_lemma_42(obj, theta, gi, w, inner_lr=lr,
                              n_configs=g.lemma42_configs, seed=seed)
        d = r42.to_dict()
        d.pop("omega_cos")
        d.pop("theta_cos")
        out["lemma42"] = d
    return out


def stage_diagnostics(run: Run, fp, cs, state0: QuantState, outcome: BlockOutcome):
    cfg, seed = run.cfg, run.cfg.run.seed
    key = hashlib.sha256(f"{run.stage_hash(f'block{len(outcome.reports) - 1}') if outcome.reports else ''}"
                         f"|{section_hash(cfg, 'diagnostics')}".encode()).hexdigest()
    t0 = time.perf_counter()
    gi = GroupIndex.from_calibration(cs)
    obj = DistillObjective(fp, cs.x, cs.t)
    pooling = cfg.diagnostics.pooling
    before = dg.state_group_loss(state0, cs, "val")
    after = dg.state_group_loss(outcome.state, cs, "val")
    flags = [f"group g{i} loss increased after calibration"
             for i, (b, a) in enumerate(zip(before.values, after.values)) if a > b]
    rep = dg.DiagnosticsReport(run.id, config_hash(cfg), run.manifest.seeds, flags=flags)
    if cs.G >= 2:
        rep.dissimilarity_before = dg.dissimilarity_matrix(obj, state0.effective_params(), gi,
                                                           pooling=pooling)
        rep.dissimilarity_after = dg.dissimilarity_matrix(obj, outcome.state.effective_params(),
                                                          gi, pooling=pooling)
        lem = run_lemmas(cfg, fp, cs, state0, seed)
        rep.lemma43 = {"composite": lem["lemma43"], "t_acc_1": lem["lemma43_t1"]}
        rep.lemma42 = lem.get("lemma42")
    rep.losses_before, rep.losses_after = before, after
    rep.alignment = outcome.alignment
    dg.export(rep, run.reports, run.csv)
    paths = [run.reports / f"{run.id}.diagnostics.json"] + sorted(run.csv.glob(f"{run.id}.*.csv"))
    run.record("diagnostics", key, paths, time.perf_counter() - t0)
    return rep


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    manifest: RunManifest
    state: QuantState
    weights: SampleWeights
    calib: CalibrationSet
    report: dg.DiagnosticsReport | None
    val_losses: dg.GroupLosses
    recomputed: list


def run_full(cfg: ExperimentConfig, out_dir=None, resume: bool = True, stop_after: str | None = None,
             diagnostics: bool | None = None) -> RunResult:
    """Execute (or resume) every stage of one run."""
    run = Run(cfg, out_dir, resume)
    stage = "fp"
    try:
        fp = stage_fp(run)
        if stop_after == "fp":
            return _finish(run, None, None, None, None, None)
        stage = "calib"
        cs = stage_calib(run, fp)
        if stop_after == "calib":
            return _finish(run, None, None, cs, None, None)
        stage = "quant_init"
        state0 = stage_quant_init(run, fp, cs)
        stage = "blocks"
        outcome = stage_blocks(run, fp, cs, state0, cfg.run.mode == "weighted")
        report = None
        do_diag = cfg.diagnostics.enabled if diagnostics is None else diagnostics
        if do_diag:
            stage = "diagnostics"
            report = stage_diagnostics(run, fp, cs, state0, outcome)
        losses = dg.state_group_loss(outcome.state, cs, "val")
        return _finish(run, outcome.state, outcome.weights, cs, report, losses)
    except DiffQError as e:
        run.manifest.status = "failed"
        run.manifest.failed_stage = stage
        run.save()
        e.stage = stage
        raise


def _finish(run: Run, state, weights, cs, report, losses) -> RunResult:
    run.manifest.status = "complete"
    run.save()
    return RunResult(run.manifest, state, weights, cs, report, losses, run.recomputed)


def run_baseline_pair(cfg: ExperimentConfig, out_dir=None, diagnostics: bool | None = None) -> dict:
    """Uniform and weighted runs on the same seed and data; the weighted run
    reuses the uniform run's FP model, corpus and quantizer init."""
    uni_cfg = cfg.replace(**{"run.mode": "uniform"})
    wtd_cfg = cfg.replace(**{"run.mode": "weighted"})
    uni = run_full(uni_cfg, out_dir, diagnostics=diagnostics)
    _share(uni_cfg, wtd_cfg, out_dir)
    wtd = run_full(wtd_cfg, out_dir, diagnostics=diagnostics)
    deltas = dg.loss_delta_by_group(dg.RunSummary(wtd_cfg.to_dict(), wtd.val_losses, "weighted"),
                                    dg.RunSummary(uni_cfg.to_dict(), uni.val_losses, "uniform"))
    worst = deltas[-1]
    return {
        "seed": cfg.run.seed,
        "uniform_mse": uni.val_losses.overall,
        "weighted_mse": wtd.val_losses.overall,
        "weighted_not_worse": bool(wtd.val_losses.overall <= uni.val_losses.overall),
        "worst_group": worst.group,
        "worst_group_delta": worst.delta,
        "worst_group_improved": bool(worst.delta > 0),
        "deltas": [d.__dict__ for d in deltas],
        "manifests": [str(Path(out_dir or cfg.run.out) / m.manifest.run_id / "manifest.json")
                      for m in (uni, wtd)],
        "alignment_correlation": None if wtd.report is None or wtd.report.alignment is None
        else wtd.report.alignment.correlation,
    }


def _share(src_cfg: ExperimentConfig, dst_cfg: ExperimentConfig, out_dir):
    """Copy the shared upstream stages into the destination run directory."""
    src = Path(out_dir if out_dir is not None else src_cfg.run.out) / run_id(src_cfg)
    dst = Run(dst_cfg, out_dir, resume=True)
    man = RunManifest.load(src / "manifest.json")
    for name in ("fp", "calib", "quant_init"):
        st = man.stages.get(name)
        if st is None:
            return
        for rel in st["files"]:
            target = dst.root / rel
            if not target.exists():
                target.write_bytes((src / rel).read_bytes())
        dst.previous.setdefault(name, st)
        dst.manifest.stages[name] = st
    dst.save()


def compare(cfg: ExperimentConfig, seeds, out_dir=None, diagnostics: bool | None = None) -> dict:
    rows = [run_baseline_pair(cfg.replace(**{"run.seed": s}), out_dir, diagnostics)
            for s in seeds]
    n = len(rows)
    corr = [r["alignment_correlation"] for r in rows if r["alignment_correlation"] is not None]
    summary = {
        "config_hash": config_hash(cfg.replace(**{"run.seed": 0, "run.mode": "weighted"})),
        "seeds": list(seeds),
        "n": n,
        "frac_weighted_not_worse": sum(r["weighted_not_worse"] for r in rows) / n,
        "frac_worst_group_improved": sum(r["worst_group_improved"] for r in rows) / n,
        "frac_alignment_positive": (sum(c > 0 for c in corr) / n) if n else 0.0,
        "rows": rows,
    }
    dest = Path(out_dir if out_dir is not None else cfg.run.out) / f"compare-{summary['config_hash'][:10]}"
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "compare.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    with open(dest / "compare.csv", "w") as f:
        f.write("seed,uniform_mse,weighted_mse,weighted_not_worse,worst_group,worst_group_delta,"
                "alignment_correlation\n")
        for r in rows:
            f.write(f"{r['seed']},{r['uniform_mse']!r},{r['weighted_mse']!r},"
                    f"{int(r['weighted_not_worse'])},{r['worst_group']},"
                    f"{r['worst_group_delta']!r},{r['alignment_correlation']}\n")
    summary["path"] = str(dest)
    return summary
