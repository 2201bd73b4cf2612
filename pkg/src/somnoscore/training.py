"""Per-fold training loop and subject-wise cross-validation.

Each optimization step draws a fresh class-balanced batch, averages the
per-window gradients, applies one momentum-SGD update, and periodically
scores the held-out validation subjects. The parameters kept are always the
ones with the best validation mean F1; training stops after a run of
non-improving evaluations or at the iteration cap. Test subjects influence
nothing until the final scoring pass.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model
from .dataset import FoldSplit, balanced_batch, class_pools, make_folds, windows_for_subjects
from .edf_ingest import N_STAGES, Recording
from .evaluation import confusion, row_normalize
from .model import ModelConfig, ModelParameters


class TrainingError(Exception):
    pass


@dataclass
class EvalRecord:
    iteration: int
    training_loss: float
    val_mean_f1: float
    val_overall_accuracy: float
    wall_clock: float
    is_best: bool = False


@dataclass
class TrainingHistory:
    records: list[EvalRecord] = field(default_factory=list)

    def best(self) -> EvalRecord:
        flagged = [r for r in self.records if r.is_best]
        if len(flagged) != 1:
            raise TrainingError(f"history must flag exactly one best record, has {len(flagged)}")
        return flagged[0]

    def as_dicts(self) -> list[dict]:
        return [vars(r) for r in self.records]


@dataclass
class RecordingScore:
    subject_id: str
    night: int
    matrix: np.ndarray


@dataclass
class FoldResult:
    fold_index: int
    split: FoldSplit
    best_params: ModelParameters
    test_matrix: np.ndarray
    per_recording: list[RecordingScore]
    history: TrainingHistory
    checkpoint_path: Path | None = None


def _validation_scores(counts: np.ndarray) -> tuple[float, float]:
    """(mean F1, overall accuracy), averaged over stages present in the data.

    The model-selection metric must stay defined even when a validation split
    happens to lack a stage; rows are normalized over all five predicted
    columns (predictions landing on an absent stage are still errors) and the
    one-vs-all reduction runs over the present stages only. Test-set reports
    use the strict metric suite.
    """
    present = np.flatnonzero(counts.sum(axis=1) > 0)
    if present.size == 0:
        raise TrainingError("validation confusion matrix is empty")
    r = row_normalize(counts)
    overall = float(np.trace(counts) / counts.sum())
    if present.size == 1:
        return float(r[present[0], present[0]]), overall
    f1s = []
    for c in present:
        sens = r[c, c]
        others = present[present != c]
        fpr = r[others, c].sum() / len(others)
        prec = sens / (sens + fpr) if sens + fpr > 0 else 0.0
        f1s.append(2 * prec * sens / (prec + sens) if prec + sens > 0 else 0.0)
    return float(np.mean(f1s)), overall


def _score_windows(params: ModelParameters, windows) -> np.ndarray:
    preds = [model.predict(params, w.signal()) for w in windows]
    return confusion(preds, [w.label for w in windows])


def batch_update(
    params: ModelParameters,
    batch,
    config: ModelConfig,
) -> float:
    """One SGD step on a batch: mean data gradient plus one decay term.

    Returns the batch objective (mean cross-entropy + L2 penalty).
    """
    accum: dict[str, np.ndarray] = {}
    loss_sum = 0.0
    for window in batch:
        probs, cache = model.forward(params, window.signal())
        loss_sum += float(-np.log(max(probs[int(window.label)], 1e-300)))
        grads = model.backward(params, cache, window.label, include_l2=False)
        for name, g in grads.items():
            if name in accum:
                accum[name] += g
            else:
                accum[name] = g.copy()
    inv = 1.0 / len(batch)
    for name in accum:
        accum[name] *= inv
    loss = loss_sum * inv
    if config.l2_lambda:
        for name in params.l2_weight_names():
            accum[name] += config.l2_lambda * params.tensors[name]
        weights = [params.tensors[n] for n in params.l2_weight_names()]
        loss += 0.5 * config.l2_lambda * float(sum(np.vdot(w, w).real for w in weights))
    model.sgd_step(params, accum, config.learning_rate, config.momentum)
    return loss


def train_fold(
    recordings: list[Recording],
    fold: FoldSplit,
    config: ModelConfig,
    rng: np.random.Generator,
) -> FoldResult:
    """Train on the fold's training subjects, select on validation mean F1,
    then score the test subject's recordings with the best parameters."""
    have = {r.subject_id for r in recordings}
    for subject in (*fold.test_subjects, *fold.validation_subjects, *fold.training_subjects):
        if subject not in have:
            raise TrainingError(f"fold subject {subject!r} not among loaded recordings")

    train_windows = windows_for_subjects(recordings, fold.training_subjects)
    val_windows = windows_for_subjects(recordings, fold.validation_subjects)
    assert all(w.subject_id in set(fold.training_subjects) for w in train_windows)
    assert all(w.subject_id in set(fold.validation_subjects) for w in val_windows)
    if not val_windows:
        raise TrainingError("validation subjects contributed no windows")
    pools = class_pools(train_windows)
    pools.require_all_stages()

    params = model.init_params(config, rng)
    history = TrainingHistory()
    best_params = params.copy()
    best_f1 = -np.inf
    best_index = -1
    bad_evals = 0
    loss_window: list[float] = []
    t0 = time.monotonic()

    for iteration in range(1, config.max_iterations + 1):
        batch = balanced_batch(pools, config.batch_size, rng)
        try:
            loss = batch_update(params, batch, config)
        except FloatingPointError as exc:
            refs = [w.recording_ref for w in batch[:5]]
            raise TrainingError(
                f"non-finite loss/gradient at iteration {iteration}; "
                f"first batch windows: {refs}") from exc
        loss_window.append(loss)

        if iteration % config.eval_every == 0 or iteration == config.max_iterations:
            counts = _score_windows(params, val_windows)
            mean_f1, overall = _validation_scores(counts)
            record = EvalRecord(
                iteration=iteration,
                training_loss=float(np.mean(loss_window)),
                val_mean_f1=mean_f1,
                val_overall_accuracy=overall,
                wall_clock=time.monotonic() - t0,
            )
            history.records.append(record)
            loss_window.clear()
            if mean_f1 > best_f1:
                best_f1 = mean_f1
                best_params = params.copy()
                best_index = len(history.records) - 1
                bad_evals = 0
            else:
                bad_evals += 1
            if bad_evals >= config.patience:
                break

    if not history.records:
        raise TrainingError("no evaluation ever ran; check eval_every vs max_iterations")
    history.records[best_index].is_best = True

    per_recording = []
    test_set = set(fold.test_subjects)
    for rec in recordings:
        if rec.subject_id in test_set:
            windows = windows_for_subjects([rec], test_set)
            per_recording.append(RecordingScore(
                rec.subject_id, rec.night, _score_windows(best_params, windows)))
    test_matrix = sum((s.matrix for s in per_recording),
                      np.zeros((N_STAGES, N_STAGES), dtype=np.int64))
    return FoldResult(fold.fold_index, fold, best_params, test_matrix, per_recording, history)


def corpus_fingerprint(recordings: list[Recording]) -> str:
    """Content hash of the loaded corpus, for run manifests."""
    h = hashlib.sha256()
    for rec in sorted(recordings, key=lambda r: (r.subject_id, r.night)):
        h.update(rec.subject_id.encode())
        h.update(str(rec.night).encode())
        h.update(np.ascontiguousarray(rec.samples).tobytes())
        h.update(bytes(int(s) for s in rec.epoch_labels))
    return h.hexdigest()


def _fold_dir(out_dir: Path, fold_index: int) -> Path:
    return Path(out_dir) / f"fold_{fold_index:02d}"


def save_fold_result(result: FoldResult, out_dir: Path, seed: int) -> Path:
    fold_dir = _fold_dir(out_dir, result.fold_index)
    fold_dir.mkdir(parents=True, exist_ok=True)
    ckpt = fold_dir / "best.somn"
    model.save_checkpoint(result.best_params, ckpt)
    payload = {
        "fold": result.fold_index,
        "seed": seed,
        "test": list(result.split.test_subjects),
        "val": list(result.split.validation_subjects),
        "train": list(result.split.training_subjects),
        "history": result.history.as_dicts(),
        "test_matrix": result.test_matrix.tolist(),
        "per_recording": [
            {"subject_id": s.subject_id, "night": s.night, "matrix": s.matrix.tolist()}
            for s in result.per_recording
        ],
        "checkpoint": ckpt.name,
    }
    (fold_dir / "result.json").write_text(json.dumps(payload, indent=2) + "\n")
    result.checkpoint_path = ckpt
    return fold_dir


def load_fold_result_json(out_dir: Path, fold_index: int) -> dict | None:
    path = _fold_dir(out_dir, fold_index) / "result.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


@dataclass
class CrossValidationOutcome:
    fold_results: dict[int, FoldResult]
    skipped: list[int]
    failures: dict[int, str]
    aggregate: np.ndarray
    per_recording: list[RecordingScore]


def run_crossvalidation(
    recordings: list[Recording],
    config: ModelConfig,
    seed: int,
    out_dir: Path | None = None,
    fold_indices: list[int] | None = None,
    parallel: int = 1,
) -> CrossValidationOutcome:
    """Run the 20 leave-one-subject-out folds and sum their test matrices.

    Fold RNG streams derive from (seed, fold), so folds are independent of
    execution order and may run concurrently. With an output directory, each
    finished fold is serialized immediately and folds with existing results
    are skipped (crash-resume). One fold's failure does not abort the rest.
    """
    subjects = sorted({r.subject_id for r in recordings})
    folds = make_folds(subjects, seed)
    selected = folds if fold_indices is None else [folds[i] for i in fold_indices]

    results: dict[int, FoldResult] = {}
    skipped: list[int] = []
    failures: dict[int, str] = {}
    aggregate = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    per_recording: list[RecordingScore] = []

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "seed": seed,
            "config": config.to_json_dict(),
            "subjects": subjects,
            "corpus_sha256": corpus_fingerprint(recordings),
            "folds": [vars(f) | {"test_subjects": list(f.test_subjects),
                                 "validation_subjects": list(f.validation_subjects),
                                 "training_subjects": list(f.training_subjects)}
                      for f in folds],
        }
        (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    todo = []
    for fold in selected:
        prior = load_fold_result_json(out_dir, fold.fold_index) if out_dir else None
        if prior is not None:
            skipped.append(fold.fold_index)
            aggregate += np.asarray(prior["test_matrix"], dtype=np.int64)
            for item in prior["per_recording"]:
                per_recording.append(RecordingScore(
                    item["subject_id"], item["night"],
                    np.asarray(item["matrix"], dtype=np.int64)))
            continue
        todo.append(fold)

    def run_one(fold: FoldSplit):
        rng = np.random.default_rng([seed, fold.fold_index])
        return train_fold(recordings, fold, config, rng)

    if parallel > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(lambda f: _guarded(run_one, f), todo))
    else:
        outcomes = [_guarded(run_one, f) for f in todo]

    for fold, outcome in zip(todo, outcomes):
        if isinstance(outcome, str):
            failures[fold.fold_index] = outcome
            continue
        results[fold.fold_index] = outcome
        aggregate += outcome.test_matrix
        per_recording.extend(outcome.per_recording)
        if out_dir is not None:
            save_fold_result(outcome, out_dir, seed)

    return CrossValidationOutcome(results, skipped, failures, aggregate, per_recording)


def _guarded(fn, fold):
    try:
        return fn(fold)
    except Exception as exc:  # isolate fold failures
        return f"{type(exc).__name__}: {exc}"
