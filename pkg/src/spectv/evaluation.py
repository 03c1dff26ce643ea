"""Patient-level cross-validation, ROC/AUC, and the analysis harnesses:
band importance, scales-per-band ablation, component-count sweep, and
class-wise mean spectra.

Feature extraction (flow + transform + mask) is fold-independent and done
once up front; folds are stratified partitions at patient granularity, so no
patch of a held-out patient can influence training.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (DEFAULT_MASK, Label3, Manifest, PATCH_CENTER, PatchRecord,
                   masked_pixels, remap_lu, training_rows)
from .ensemble import BandConfig, EnsembleModel, fit_band_ensemble, predict_tags
from .errors import ContractViolation
from .flow import FlowConfig, tv_flow
from .transform import enhance_vectors, stv_transform

METRIC_NAMES = ("auc", "accuracy", "specificity", "recall", "precision")


# --- features ---------------------------------------------------------------

@dataclass
class PatchFeatures:
    record: PatchRecord
    signatures: np.ndarray     # (mask size, n_components), raw phi values
    center_values: np.ndarray  # (mask size,) input intensities at the mask


@dataclass
class FeatureTable:
    patches: list[PatchFeatures]
    flow_config: FlowConfig

    @property
    def n_components(self) -> int:
        return self.patches[0].signatures.shape[1]

    def patients(self) -> list[str]:
        out: list[str] = []
        for p in self.patches:
            if p.record.patient_id not in out:
                out.append(p.record.patient_id)
        return out

    def patient_status(self, pid: str) -> bool:
        return any(p.record.patient_id == pid and p.record.label == Label3.PATH_HU
                   for p in self.patches)


def patch_features(image: np.ndarray, record: PatchRecord,
                   flow_config: FlowConfig, *, center=PATCH_CENTER,
                   mask=DEFAULT_MASK) -> PatchFeatures:
    """Raw per-pixel scale signatures at the masked pixels of one patch."""
    pixels = masked_pixels(center, mask, shape=image.shape)
    rows = np.array([p[0] for p in pixels])
    cols = np.array([p[1] for p in pixels])
    stack = stv_transform(tv_flow(image, flow_config))
    signatures = np.ascontiguousarray(stack.components[:, rows, cols].T)
    return PatchFeatures(record, signatures, image[rows, cols].copy())


def extract_features(manifest: Manifest, flow_config: FlowConfig | None = None, *,
                     images: dict | None = None, threads: int = 1,
                     center=PATCH_CENTER, mask=DEFAULT_MASK) -> FeatureTable:
    """Decompose every manifest patch; ``images`` may pre-supply rasters keyed
    by record key (otherwise they are read from disk).  Output is independent
    of ``threads``.
    """
    from .containers import read_raster

    if flow_config is None:
        flow_config = FlowConfig()

    def load(rec: PatchRecord) -> np.ndarray:
        if images is not None and rec.key in images:
            return images[rec.key]
        return read_raster(manifest.root / rec.path)

    records = manifest.records
    if threads <= 1:
        done = [patch_features(load(r), r, flow_config, center=center, mask=mask)
                for r in records]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(
                lambda r: patch_features(load(r), r, flow_config, center=center, mask=mask),
                records))
    return FeatureTable(done, flow_config)


# --- folds ------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]
    seed: int

    def fold_of(self, pid: str) -> int:
        return self.assignment[pid]


def _stratified_folds(pairs: list[tuple[str, bool]], k: int, seed: int) -> FoldPlan:
    if k < 2:
        raise ContractViolation(f"fold count must be >= 2, got {k}")
    if k > len(pairs):
        raise ContractViolation(f"{k} folds for {len(pairs)} patients")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF01D)))
    assignment: dict[str, int] = {}
    for status in (True, False):
        group = [pid for pid, st in pairs if st == status]
        order = rng.permutation(len(group))
        for slot, idx in enumerate(order):
            assignment[group[idx]] = slot % k
    return FoldPlan(k, assignment, seed)


def kfold_by_patient(manifest: Manifest, k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified partition of patients into k folds (pathological fraction
    balanced to within one patient per fold)."""
    pairs = [(pid, manifest.patient_status(pid)) for pid in manifest.patients()]
    return _stratified_folds(pairs, k, seed)


# --- ROC and threshold metrics ----------------------------------------------

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores, truths) -> RocCurve:
    """Empirical ROC and trapezoidal AUC (ties count one half).

    Equals the pairwise concordance probability: P(score+ > score-) +
    P(tie)/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    if scores.shape != truths.shape or scores.ndim != 1:
        raise ContractViolation("scores and truths must be matching 1-D vectors")
    n_pos = int(truths.sum())
    n_neg = truths.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("need at least one positive and one negative truth")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truths[order]
    # group tied scores: one operating point per distinct threshold
    boundary = np.nonzero(np.diff(s))[0]
    stops = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(t)[stops]
    fp = np.cumsum(~t)[stops]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], s[stops]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr, tpr, thresholds, auc)


def metrics_at_cutoff(scores, truths, cutoff: float) -> dict[str, float | None]:
    """Confusion-matrix metrics with decision = score > cutoff; precision is
    None when nothing is predicted positive."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    pred = scores > cutoff
    tp = int((pred & truths).sum())
    fp = int((pred & ~truths).sum())
    tn = int((~pred & ~truths).sum())
    fn = int((~pred & truths).sum())
    if tp + fn == 0 or tn + fp == 0:
        raise ContractViolation("need at least one positive and one negative truth")
    return {
        "accuracy": (tp + tn) / truths.size,
        "specificity": tn / (tn + fp),
        "recall": tp / (tp + fn),
        "precision": tp / (tp + fp) if tp + fp > 0 else None,
    }


# --- cross-validation harness -------------------------------------------------

@dataclass
class PatientScore:
    patient_id: str
    truth: bool
    score: float
    vertebra_scores: dict[str, float]


@dataclass
class FoldResult:
    fold: int
    model: EnsembleModel
    patients: list[PatientScore]
    roc: RocCurve
    metrics: dict[str, float | None]
    # per test patch: tag matrix (mask pixels x bands), keyed by record key
    patch_tags: dict[tuple, np.ndarray]


@dataclass
class MetricsReport:
    cutoff: float
    metrics: dict[str, tuple[float, float]]  # name -> (mean across folds, sd)


@dataclass
class CvResult:
    plan: FoldPlan
    band_config: BandConfig
    mode: str
    p_enh: float
    folds: list[FoldResult]
    report: MetricsReport


def _fold_mean_sd(values: list[float | None]) -> tuple[float, float]:
    present = [v for v in values if v is not None]
    if not present:
        return (float("nan"), float("nan"))
    arr = np.array(present, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _aggregate_report(folds: list[FoldResult], cutoff: float) -> MetricsReport:
    metrics = {"auc": _fold_mean_sd([f.roc.auc for f in folds])}
    for name in METRIC_NAMES[1:]:
        metrics[name] = _fold_mean_sd([f.metrics[name] for f in folds])
    return MetricsReport(cutoff, metrics)


def _patient_scores_from_tags(table: FeatureTable, pids: list[str],
                              tags: dict[tuple, np.ndarray],
                              exclude_band: int | None = None) -> list[PatientScore]:
    """Pixel -> patch -> vertebra -> patient aggregation from cached tags."""
    by_patient: dict[str, dict[str, list[float]]] = {pid: {} for pid in pids}
    for p in table.patches:
        rec = p.record
        if rec.patient_id not in by_patient or rec.key not in tags:
            continue
        t = tags[rec.key]
        if exclude_band is not None:
            t = np.delete(t, exclude_band, axis=1)
        patch_score = float(t.mean(axis=1).mean())
        by_patient[rec.patient_id].setdefault(rec.vertebra_id, []).append(patch_score)
    out = []
    for pid in pids:
        vscores = {vid: float(np.mean(ps)) for vid, ps in by_patient[pid].items()}
        score = max(vscores.values())
        out.append(PatientScore(pid, table.patient_status(pid), score, vscores))
    return out


def run_cv(table: FeatureTable, band_config: BandConfig | None = None, *,
           mode: str = "tree", seed: int = 0, k: int = 10,
           cutoff: float = 0.45, p_enh: float = 1.0,
           duplicate_lu: bool = True, n_trees: int = 50) -> CvResult:
    """Patient-level k-fold cross-validation of the band ensemble.

    Training folds use LU duplication; evaluation never does.  Deterministic
    in (table, config, seed).
    """
    if band_config is None:
        band_config = BandConfig(n_components=table.n_components)
    if band_config.n_components > table.n_components:
        raise ContractViolation(
            f"band config expects {band_config.n_components} components, "
            f"table has {table.n_components}")
    nc = band_config.n_components
    pairs = [(pid, table.patient_status(pid)) for pid in table.patients()]
    plan = _stratified_folds(pairs, k, seed)
    # per-patch enhanced feature rows, truncated to the configured components
    enhanced: dict[tuple, np.ndarray] = {}
    for p in table.patches:
        enhanced[p.record.key] = enhance_vectors(p.signatures[:, :nc], p_enh)
    manifest = Manifest([p.record for p in table.patches])
    folds = []
    for fold in range(k):
        test_pids = [pid for pid, _ in pairs if plan.fold_of(pid) == fold]
        train_recs = Manifest([r for r in manifest.records
                               if plan.fold_of(r.patient_id) != fold])
        rows = training_rows(train_recs, duplicate_lu=duplicate_lu)
        X = np.concatenate([enhanced[rec.key] for rec, _ in rows], axis=0)
        y = np.concatenate([[int(label)] * enhanced[rec.key].shape[0]
                            for rec, label in rows])
        model = fit_band_ensemble(X, y, band_config, mode, seed=seed * 1000 + fold,
                                  n_trees=n_trees, cutoff=cutoff)
        tags = {}
        for p in table.patches:
            if p.record.patient_id in test_pids:
                tags[p.record.key] = predict_tags(model, enhanced[p.record.key])
        patients = _patient_scores_from_tags(table, test_pids, tags)
        scores = np.array([p.score for p in patients])
        truths = np.array([p.truth for p in patients])
        roc = roc_auc(scores, truths)
        folds.append(FoldResult(fold, model, patients, roc,
                                metrics_at_cutoff(scores, truths, cutoff), tags))
    return CvResult(plan, band_config, mode, p_enh, folds,
                    _aggregate_report(folds, cutoff))


# --- analysis harnesses -------------------------------------------------------

def band_importance(table: FeatureTable, cv: CvResult) -> np.ndarray:
    """AUC drop per band: mean fold AUC with all bands minus the mean fold AUC
    with the band's learner excluded from the tag average."""
    n_bands = cv.band_config.n_bands
    if n_bands < 2:
        raise ContractViolation("band importance needs at least two bands")
    base = float(np.mean([f.roc.auc for f in cv.folds]))
    drops = np.empty(n_bands)
    for b in range(n_bands):
        fold_aucs = []
        for f in cv.folds:
            pids = [p.patient_id for p in f.patients]
            patients = _patient_scores_from_tags(table, pids, f.patch_tags,
                                                 exclude_band=b)
            scores = np.array([p.score for p in patients])
            truths = np.array([p.truth for p in patients])
            fold_aucs.append(roc_auc(scores, truths).auc)
        drops[b] = base - float(np.mean(fold_aucs))
    return drops


def ablation_scales(table: FeatureTable, scales, modes=("tree",), *,
                    overlapping_values=(False,), seed: int = 0, k: int = 10,
                    cutoff: float = 0.45) -> list[dict]:
    """One cross-validated row per (mode, scales_per_band, overlapping)."""
    rows = []
    for mode in modes:
        for overlapping in overlapping_values:
            for s in scales:
                config = BandConfig(table.n_components, s, overlapping)
                cv = run_cv(table, config, mode=mode, seed=seed, k=k, cutoff=cutoff)
                row = {"mode": mode, "scales_per_band": s, "overlapping": overlapping,
                       "cutoff": cutoff}
                for name in METRIC_NAMES:
                    row[name] = cv.report.metrics[name][0]
                rows.append(row)
    return rows


def component_sweep(table: FeatureTable, counts=None, *, scales_per_band: int = 5,
                    mode: str = "tree", seed: int = 0, k: int = 10,
                    cutoff: float = 0.45) -> list[tuple[int, float]]:
    """AUC as a function of the number of components: truncate the raw
    signatures, re-enhance, rebuild bands, cross-validate."""
    if counts is None:
        counts = list(range(20, 121, 10))
    out = []
    for count in counts:
        if count % scales_per_band != 0:
            raise ContractViolation(
                f"component count {count} not divisible by {scales_per_band}")
        if count > table.n_components:
            raise ContractViolation(
                f"component count {count} exceeds table ({table.n_components})")
        config = BandConfig(count, scales_per_band, False)
        cv = run_cv(table, config, mode=mode, seed=seed, k=k, cutoff=cutoff)
        out.append((count, cv.report.metrics["auc"][0]))
    return out


def mean_spectrum_by_class(table: FeatureTable) -> dict[Label3, np.ndarray]:
    """Class-wise mean spectral response restricted to the masked region:
    S_k = sum over mask pixels of f(x) * phi_k(x), averaged over patches."""
    sums: dict[Label3, np.ndarray] = {}
    counts: dict[Label3, int] = {}
    for p in table.patches:
        s = p.center_values @ p.signatures
        lab = p.record.label
        sums[lab] = sums.get(lab, 0.0) + s
        counts[lab] = counts.get(lab, 0) + 1
    missing = [lab.name for lab in Label3 if lab not in counts]
    if missing:
        raise ContractViolation(f"classes without patches: {missing}")
    return {lab: sums[lab] / counts[lab] for lab in sums}


def interband_correlation(table: FeatureTable, band_config: BandConfig | None = None) -> float:
    """Median |correlation| between distinct band feature blocks, a diagnostic
    for the low-correlation premise (no hard threshold in 2-D)."""
    if band_config is None:
        band_config = BandConfig(n_components=table.n_components)
    X = np.concatenate([p.signatures[:, :band_config.n_components]
                        for p in table.patches], axis=0)
    means = np.array([X[:, band_config.band_slice(j)].mean(axis=1)
                      for j in range(band_config.n_bands)])
    c = np.corrcoef(means)
    off = np.abs(c[np.triu_indices_from(c, k=1)])
    return float(np.median(off))


# --- report files -------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float) and float(value).is_integer():
        return repr(float(value))
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """Plain deterministic CSV (LF endings, repr floats, no timestamps)."""
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_cv_report(path, cv: CvResult) -> None:
    """One row per fold plus mean/sd summary rows."""
    header = ["fold"] + list(METRIC_NAMES) + ["cutoff"]
    rows = []
    for f in cv.folds:
        rows.append([f.fold, f.roc.auc] +
                    [f.metrics[name] for name in METRIC_NAMES[1:]] +
                    [cv.report.cutoff])
    for stat, pick in (("mean", 0), ("sd", 1)):
        rows.append([stat] + [cv.report.metrics[name][pick] for name in METRIC_NAMES]
                    + [cv.report.cutoff])
    write_csv(path, header, rows)


def write_roc_curves(path, cv: CvResult) -> None:
    rows = []
    for f in cv.folds:
        for x, y in zip(f.roc.fpr, f.roc.tpr):
            rows.append([f.fold, x, y])
    write_csv(path, ["fold", "fpr", "tpr"], rows)
