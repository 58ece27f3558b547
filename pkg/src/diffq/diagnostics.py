"""Analysis artifacts: gradient dissimilarity between timestep groups,
per-group quantization loss, weighted-vs-uniform loss deltas, and the
sample-weight / gradient-alignment table.

All functions are pure; exporting goes through the ``write_*`` helpers.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigMismatchError, EmptyBatchError, NonFiniteError

MISSING = float("nan")


# ---------------------------------------------------------------------------
# gradient dissimilarity
# ---------------------------------------------------------------------------

@dataclass
class DissimilarityMatrix:
    values: np.ndarray                 # (G, G) cosine distances, NaN where undefined
    labels: list
    gradients: np.ndarray | None = None  # (G, P) group gradients for raw export

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def check(self, atol: float = 1e-12):
        v = self.values
        ok = ~self.missing
        if not np.array_equal(ok, ok.T):
            raise ValueError("missing pattern is not symmetric")
        if np.any(np.abs(np.where(ok, v - v.T, 0.0)) > atol):
            raise ValueError("dissimilarity matrix is not symmetric")
        if np.any(np.diag(v) != 0):
            raise ValueError("dissimilarity matrix has a non-zero diagonal")
        if np.any((v[ok] < 0) | (v[ok] > 2)):
            raise ValueError("dissimilarity entries outside [0, 2]")
        return self

    def to_dict(self) -> dict:
        return {"labels": list(self.labels),
                "values": [[None if math.isnan(x) else float(x) for x in row] for row in self.values]}


def cosine_distance_matrix(vectors, labels=None) -> DissimilarityMatrix:
    """1 - cos between rows; rows with zero norm give missing entries."""
    V = np.asarray(vectors, dtype=np.float64)
    n = len(V)
    norms = np.linalg.norm(V, axis=1)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0 or norms[j] == 0:
                d = MISSING
            else:
                c = float(np.clip(V[i] @ V[j] / (norms[i] * norms[j]), -1.0, 1.0))
                d = 1.0 - c
            out[i, j] = out[j, i] = d
    labels = list(labels) if labels is not None else [f"g{i}" for i in range(n)]
    return DissimilarityMatrix(out, labels, V).check()


def group_gradients(objective, theta, groups, split: str = "val") -> np.ndarray:
    """Mean per-sample loss gradient of each group, shape (G, P)."""
    ids_per = groups.val if split == "val" else groups.train
    rows = []
    for g, ids in enumerate(ids_per):
        if len(ids) == 0:
            raise EmptyBatchError(f"group {g} has no {split} samples")
        _, grad = objective.loss_and_grad(theta, ids)
        rows.append(grad.data)
    return np.stack(rows)


def dissimilarity_matrix(objective, theta, groups, split: str = "val",
                         pooling: str = "mean") -> DissimilarityMatrix:
    """Pairwise cosine distance between group gradients.

    ``pooling="mean"`` compares mean group gradients; ``pooling="samples"``
    averages the cosine distance over all cross-group pairs of per-sample
    gradients (zero-norm samples are skipped).
    """
    if groups.G < 2:
        raise ValueError("dissimilarity needs at least two groups")
    labels = [f"g{g}" for g in range(groups.G)]
    if pooling == "mean":
        return cosine_distance_matrix(group_gradients(objective, theta, groups, split), labels)
    if pooling != "samples":
        raise ValueError(f"unknown pooling {pooling!r}")
    ids_per = groups.val if split == "val" else groups.train
    unit = []
    for ids in ids_per:
        M = objective.per_sample_gradients(theta, ids)
        n = np.linalg.norm(M, axis=1)
        unit.append(M[n > 0] / n[n > 0, None])
    G = groups.G
    out = np.zeros((G, G))
    for i in range(G):
        for j in range(i + 1, G):
            if len(unit[i]) == 0 or len(unit[j]) == 0:
                d = MISSING
            else:
                d = float(np.clip(1.0 - (unit[i] @ unit[j].T).mean(), 0.0, 2.0))
            out[i, j] = out[j, i] = d
    return DissimilarityMatrix(out, labels).check()


# ---------------------------------------------------------------------------
# per-group losses
# ---------------------------------------------------------------------------

@dataclass
class GroupLosses:
    values: list      # mean loss per group
    counts: list      # samples per group
    overall: float    # mean over all samples

    def recombined(self) -> float:
        c = np.asarray(self.counts, dtype=np.float64)
        return math.fsum(np.asarray(self.values) * c) / c.sum()

    def to_dict(self) -> dict:
        return asdict(self)


def per_group_loss(per_sample_losses, group_ids, G: int | None = None) -> GroupLosses:
    """Group means of per-sample losses; ``overall`` is the plain mean."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    gid = np.asarray(group_ids)
    G = int(gid.max()) + 1 if G is None else G
    vals, counts = [], []
    for g in range(G):
        m = gid == g
        if not m.any():
            raise EmptyBatchError(f"group {g} is empty")
        vals.append(math.fsum(losses[m]) / int(m.sum()))
        counts.append(int(m.sum()))
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("non-finite group loss")
    return GroupLosses(vals, counts, math.fsum(losses) / len(losses))


def state_group_loss(state, cs, split: str = "val") -> GroupLosses:
    """Denoiser-output quantization loss of a quantized state per group."""
    from .quantizer import model_output_errors
    idx = cs.indices(split)
    x, t = cs.subset(idx)
    return per_group_loss(model_output_errors(state, x, t), cs.group_ids[idx], cs.G)


# ---------------------------------------------------------------------------
# weighted vs uniform
# ---------------------------------------------------------------------------

WEIGHTING_KEYS = ("weighting.", "run.mode")


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class RunSummary:
    config: dict
    group_losses: GroupLosses
    label: str = ""


@dataclass
class GroupDelta:
    group: int
    uniform: float
    weighted: float
    delta: float      # uniform - weighted; positive means weighting helped


def loss_delta_by_group(weighted: RunSummary, uniform: RunSummary) -> list:
    """Per-group (uniform - weighted) loss, ordered by ascending uniform loss."""
    a, b = flatten(weighted.config), flatten(uniform.config)
    keys = sorted(set(a) | set(b))
    diff = [k for k in keys if not k.startswith(WEIGHTING_KEYS) and a.get(k) != b.get(k)]
    if diff:
        raise ConfigMismatchError(diff)
    wl, ul = weighted.group_losses.values, uniform.group_losses.values
    if len(wl) != len(ul):
        raise ConfigMismatchError(["group count"])
    rows = [GroupDelta(g, ul[g], wl[g], ul[g] - wl[g]) for g in range(len(ul))]
    return sorted(rows, key=lambda r: (r.uniform, r.group))


# ---------------------------------------------------------------------------
# weight vs alignment
# ---------------------------------------------------------------------------

@dataclass
class AlignmentTable:
    weights: list
    alignment: list
    bucket_weight: list
    bucket_alignment: list
    bucket_sizes: list
    correlation: float | None
    degenerate: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def sample_alignment(G_train, group_grads) -> np.ndarray:
    """Mean over groups of cos(g_i, G_g) for every training sample."""
    M = np.asarray(G_train, dtype=np.float64)
    Q = np.asarray(group_grads, dtype=np.float64)
    nm = np.linalg.norm(M, axis=1)
    nq = np.linalg.norm(Q, axis=1)
    C = M @ Q.T
    with np.errstate(invalid="ignore", divide="ignore"):
        C = C / (nm[:, None] * nq[None, :])
    C = np.where(np.isfinite(C), np.clip(C, -1.0, 1.0), 0.0)
    return C.mean(axis=1)


def alignment_correlation(omega, G_train, group_grads, n_buckets: int = 50) -> AlignmentTable:
    omega = np.asarray(omega, dtype=np.float64)
    align = sample_alignment(G_train, group_grads)
    if len(omega) != len(align):
        raise ValueError(f"{len(omega)} weights for {len(align)} gradients")
    if len(omega) < n_buckets:
        warnings.warn(f"{len(omega)} samples < {n_buckets} buckets; using {len(omega)}",
                      RuntimeWarning, stacklevel=2)
        n_buckets = len(omega)
    order = np.argsort(omega, kind="stable")
    parts = np.array_split(order, n_buckets)
    bw = [float(omega[p].mean()) for p in parts]
    ba = [float(align[p].mean()) for p in parts]
    sizes = [int(len(p)) for p in parts]
    base = dict(weights=omega.tolist(), alignment=align.tolist(), bucket_weight=bw,
                bucket_alignment=ba, bucket_sizes=sizes)
    spread = np.ptp(bw)
    if spread <= 1e-12 * max(abs(bw[0]), 1e-300):
        return AlignmentTable(**base, correlation=None, degenerate=True, reason="constant weights")
    if np.ptp(ba) == 0:
        return AlignmentTable(**base, correlation=None, degenerate=True,
                              reason="constant alignment")
    rho = float(stats.spearmanr(bw, ba).statistic)
    return AlignmentTable(**base, correlation=rho, degenerate=False)


# ---------------------------------------------------------------------------
# report and export
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    run_id: str
    config_hash: str
    seeds: dict
    dissimilarity_before: DissimilarityMatrix | None = None
    dissimilarity_after: DissimilarityMatrix | None = None
    losses_before: GroupLosses | None = None
    losses_after: GroupLosses | None = None
    lemma43: dict | None = None
    lemma42: dict | None = None
    alignment: AlignmentTable | None = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"run_id": self.run_id, "config_hash": self.config_hash, "seeds": self.seeds,
               "flags": self.flags}
        for name in ("dissimilarity_before", "dissimilarity_after", "losses_before",
                     "losses_after", "alignment"):
            val = getattr(self, name)
            out[name] = None if val is None else val.to_dict()
        out["lemma43"] = self.lemma43
        out["lemma42"] = self.lemma42
        return out

    def check_finite(self):
        def walk(x, path):
            if isinstance(x, float) and not math.isfinite(x):
                raise NonFiniteError(f"non-finite value at {path}")
            if isinstance(x, dict):
                for k, v in x.items():
                    walk(v, f"{path}.{k}")
            elif isinstance(x, (list, tuple)):
                for i, v in enumerate(x):
                    walk(v, f"{path}[{i}]")
        walk(self.to_dict(), "report")
        return self

    def to_json(self) -> str:
        return json.dumps(self.check_finite().to_dict(), indent=1, sort_keys=True)


def write_matrix_csv(path, m: DissimilarityMatrix):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + list(m.labels))
        for label, row in zip(m.labels, m.values):
            w.writerow([label] + ["missing" if math.isnan(x) else repr(float(x)) for x in row])


def write_group_loss_csv(path, before: GroupLosses | None, after: GroupLosses):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "count", "before", "after"])
        for g, (c, a) in enumerate(zip(after.counts, after.values)):
            b = "" if before is None else repr(float(before.values[g]))
            w.writerow([f"g{g}", c, b, repr(float(a))])


def write_alignment_csv(path, table: AlignmentTable):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bucket", "size", "mean_weight", "mean_alignment"])
        for i, (n, bw, ba) in enumerate(zip(table.bucket_sizes, table.bucket_weight,
                                            table.bucket_alignment)):
            w.writerow([i, n, repr(bw), repr(ba)])


def write_deltas_csv(path, deltas):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "uniform", "weighted", "delta"])
        for d in deltas:
            w.writerow([f"g{d.group}", repr(d.uniform), repr(d.weighted), repr(d.delta)])


def export(report: DiagnosticsReport, reports_dir, csv_dir):
    reports_dir, csv_dir = Path(reports_dir), Path(csv_dir)
    reports_dir.mkdir(parents=True, exist_ok=True)
    csv_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / f"{report.run_id}.diagnostics.json").write_text(report.to_json())
    if report.dissimilarity_before is not None:
        write_matrix_csv(csv_dir / f"{report.run_id}.dissimilarity_before.csv",
                         report.dissimilarity_before)
    if report.dissimilarity_after is not None:
        write_matrix_csv(csv_dir / f"{report.run_id}.dissimilarity_after.csv",
                         report.dissimilarity_after)
    if report.losses_after is not None:
        write_group_loss_csv(csv_dir / f"{report.run_id}.group_loss.csv", report.losses_before,
                             report.losses_after)
    if report.alignment is not None:
        write_alignment_csv(csv_dir / f"{report.run_id}.alignment.csv", report.alignment)
