"""Cross-validation harness: folds, training loop, aggregation, metrics.

Evaluation is leave-one-unit-out where a unit is a speaker or a session.
Each fold trains a fresh model on the training speakers' overlapping
segments and scores the held-out utterances by averaging segment
posteriors. Metrics are computed on utterance-level confusion matrices
in exact rational arithmetic, so identities like WAR == UAR on balanced
test sets hold bit-for-bit.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import multiprocessing as mp

import numpy as np

from .autodiff import Adam
from .features import N_MELS, SEG_FRAMES, extract_segments, mel_filterbank
from .model import AtfnnModel, ModelConfig, posteriors, train_step

MANIFEST_FIELDS = ("utterance_id", "path", "speaker_id", "session_id", "label_name")
INDEX_FIELDS = ("utterance_id", "mode", "segment_index", "path", "audio_sha256")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    speaker_id: str
    session_id: str | None
    label: int
    label_name: str


def read_manifest(path) -> tuple[list[ManifestEntry], list[str]]:
    """Load a manifest CSV; relative audio paths resolve against its directory.

    Returns (entries, label_names) with integer labels assigned by sorted
    unique label name.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != list(MANIFEST_FIELDS):
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_FIELDS)}, "
                             f"got {reader.fieldnames}")
        rows = list(reader)
    label_names = sorted({r["label_name"] for r in rows})
    label_index = {name: i for i, name in enumerate(label_names)}
    entries: list[ManifestEntry] = []
    seen = set()
    for r in rows:
        uid = r["utterance_id"]
        if uid in seen:
            raise ValueError(f"{path}: duplicate utterance_id {uid!r}")
        seen.add(uid)
        audio = Path(r["path"])
        if not audio.is_absolute():
            audio = path.parent / audio
        entries.append(ManifestEntry(
            utterance_id=uid,
            path=str(audio),
            speaker_id=r["speaker_id"],
            session_id=r["session_id"] or None,
            label=label_index[r["label_name"]],
            label_name=r["label_name"],
        ))
    return entries, label_names


@dataclass(frozen=True)
class Fold:
    unit_id: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    mode: str


def make_folds(entries: list[ManifestEntry], mode: str = "speaker") -> FoldPlan:
    """One fold per distinct speaker (or session), ordered by unit id.

    The held-out unit's utterances form the test set; everything else
    trains. Needs at least two distinct units.
    """
    if mode not in ("speaker", "session"):
        raise ValueError(f"unknown fold mode {mode!r}")
    if mode == "session" and any(e.session_id is None for e in entries):
        raise ValueError("session mode requires a session_id on every entry")
    unit_of = (lambda e: e.speaker_id) if mode == "speaker" else (lambda e: e.session_id)
    units = sorted({unit_of(e) for e in entries})
    if len(units) < 2:
        raise ValueError(f"need at least 2 distinct {mode}s, found {len(units)}")
    folds = []
    for unit in units:
        test = tuple(e.utterance_id for e in entries if unit_of(e) == unit)
        train = tuple(e.utterance_id for e in entries if unit_of(e) != unit)
        folds.append(Fold(unit_id=unit, train_ids=train, test_ids=test))
    return FoldPlan(folds=tuple(folds), mode=mode)


# -- features --------------------------------------------------------------


class FeatureStore:
    """Per-utterance segment stacks for both segmentation modes."""

    def __init__(self):
        self._data: dict[tuple[str, str], np.ndarray] = {}

    def put(self, utterance_id: str, mode: str, segments: np.ndarray) -> None:
        self._data[(utterance_id, mode)] = np.asarray(segments)

    def get(self, utterance_id: str, mode: str) -> np.ndarray:
        try:
            return self._data[(utterance_id, mode)]
        except KeyError:
            raise KeyError(f"no {mode}-mode features for utterance {utterance_id!r}; "
                           "run extraction first") from None

    @classmethod
    def from_entries(cls, entries: list[ManifestEntry]) -> "FeatureStore":
        """Extract features for every manifest entry directly from audio."""
        store = cls()
        fb = mel_filterbank()
        for e in entries:
            for mode in ("train", "eval"):
                store.put(e.utterance_id, mode, extract_segments(e.path, mode, fb))
        return store


def load_feature_cache(index_path) -> FeatureStore:
    """Rehydrate a FeatureStore from an extraction index CSV.

    Segment files are raw little-endian float64 grids; paths in the index
    are relative to the index's directory.
    """
    index_path = Path(index_path)
    base = index_path.parent
    groups: dict[tuple[str, str], list[tuple[int, str]]] = {}
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != INDEX_FIELDS:
            raise ValueError(f"{index_path}: expected header {','.join(INDEX_FIELDS)}, "
                             f"got {reader.fieldnames}")
        for row in reader:
            key = (row["utterance_id"], row["mode"])
            groups.setdefault(key, []).append((int(row["segment_index"]), row["path"]))
    store = FeatureStore()
    for (uid, mode), items in groups.items():
        items.sort()
        arrs = []
        for k, rel in items:
            raw = np.fromfile(base / rel, dtype="<f8")
            if raw.size != N_MELS * SEG_FRAMES:
                raise ValueError(f"{base / rel}: expected {N_MELS * SEG_FRAMES} doubles, got {raw.size}")
            arrs.append(raw.reshape(N_MELS, SEG_FRAMES))
        store.put(uid, mode, np.stack(arrs))
    return store


# -- aggregation and metrics -------------------------------------------------


def aggregate_utterance(segment_posteriors) -> tuple[int, np.ndarray]:
    """Mean the segment posteriors; argmax with ties to the lowest index."""
    posts = np.asarray(segment_posteriors, dtype=np.float64)
    if posts.ndim != 2 or posts.shape[0] == 0:
        raise ValueError("need at least one segment posterior")
    mean = posts.mean(axis=0)
    return int(np.argmax(mean)), mean


def metrics(conf) -> tuple[float, float]:
    """(WAR, UAR) of a confusion matrix with true rows, predicted columns.

    Both are evaluated as exact rationals before conversion to float.
    """
    conf = np.asarray(conf)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1] or conf.shape[0] == 0:
        raise ValueError(f"confusion matrix must be square and non-empty, got {conf.shape}")
    total = int(conf.sum())
    if total <= 0:
        raise ValueError("confusion matrix has no counts")
    row_sums = conf.sum(axis=1)
    if np.any(row_sums == 0):
        empty = [i for i, s in enumerate(row_sums) if s == 0]
        raise ValueError(f"classes {empty} have no test samples; UAR undefined")
    war = Fraction(int(np.trace(conf)), total)
    c = conf.shape[0]
    uar = sum(Fraction(int(conf[j, j]), int(row_sums[j])) for j in range(c)) / c
    return float(war), float(uar)


def row_normalize(conf) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    sums = conf.sum(axis=1, keepdims=True)
    return np.divide(conf, sums, out=np.zeros_like(conf), where=sums > 0)


# -- fold training ------------------------------------------------------------


@dataclass
class TrainSettings:
    lr: float = 5e-4
    batch_size: int = 128
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    dtype: str = "float64"   # "float32" is the fast mode for large runs


@dataclass
class FoldResult:
    unit_id: str
    confusion: np.ndarray
    war: float
    uar: float
    losses: list[float]
    segment_confusion: np.ndarray
    params: dict[str, np.ndarray]


class FoldError(RuntimeError):
    pass


def run_fold(fold_index: int, fold: Fold, entries: list[ManifestEntry],
             store: FeatureStore, model_cfg: ModelConfig,
             settings: TrainSettings) -> FoldResult:
    """Train a fresh model on a fold and score its held-out utterances."""
    try:
        return _run_fold_inner(fold_index, fold, entries, store, model_cfg, settings)
    except Exception as e:
        raise FoldError(f"fold {fold_index} (held-out {fold.unit_id!r}): {e}") from e


def _run_fold_inner(fold_index, fold, entries, store, model_cfg, settings):
    by_id = {e.utterance_id: e for e in entries}
    fold_seed = settings.seed + fold_index
    rng = np.random.default_rng(fold_seed)
    dtype = np.dtype(settings.dtype)

    xs, ys = [], []
    for uid in fold.train_ids:
        segs = store.get(uid, "train")
        xs.append(segs)
        ys.append(np.full(len(segs), by_id[uid].label, dtype=np.int64))
    x_train = np.concatenate(xs).astype(dtype)
    y_train = np.concatenate(ys)

    model = AtfnnModel(model_cfg, seed=fold_seed, dtype=dtype)
    adam = Adam(model.params, lr=settings.lr)
    losses: list[float] = []
    step = 0
    done = False
    for _ in range(settings.epochs):
        if done:
            break
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), settings.batch_size):
            if settings.max_steps is not None and step >= settings.max_steps:
                done = True
                break
            idx = order[start:start + settings.batch_size]
            losses.append(train_step(model, adam, x_train[idx], y_train[idx]))
            step += 1

    confusion, seg_confusion = score_fold(model, fold, entries, store)
    war, uar = metrics(confusion)
    params = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    return FoldResult(unit_id=fold.unit_id, confusion=confusion, war=war, uar=uar,
                      losses=losses, segment_confusion=seg_confusion, params=params)


def score_fold(model: AtfnnModel, fold: Fold, entries: list[ManifestEntry],
               store: FeatureStore) -> tuple[np.ndarray, np.ndarray]:
    """Utterance- and segment-level confusion matrices for a fold's test set.

    All held-out segments are scored in one batched pass, then posterior
    rows are regrouped per utterance for aggregation.
    """
    by_id = {e.utterance_id: e for e in entries}
    num_classes = model.config.num_classes
    test_segs = [store.get(uid, "eval") for uid in fold.test_ids]
    counts = [len(s) for s in test_segs]
    all_posts = posteriors(model, np.concatenate(test_segs).astype(model.dtype))
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    seg_confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    offset = 0
    for uid, n in zip(fold.test_ids, counts):
        posts = all_posts[offset:offset + n]
        offset += n
        true = by_id[uid].label
        pred, _ = aggregate_utterance(posts)
        confusion[true, pred] += 1
        for p in np.argmax(posts, axis=1):
            seg_confusion[true, p] += 1
    return confusion, seg_confusion


# -- full runs and reports -----------------------------------------------------

_POOL_STATE: dict = {}


def _pool_init(entries, store, model_cfg, settings, folds):
    _POOL_STATE.update(entries=entries, store=store, model_cfg=model_cfg,
                       settings=settings, folds=folds)


def _pool_run(fold_index: int) -> FoldResult:
    s = _POOL_STATE
    return run_fold(fold_index, s["folds"][fold_index], s["entries"],
                    s["store"], s["model_cfg"], s["settings"])


def run_crossval(entries: list[ManifestEntry], store: FeatureStore,
                 model_cfg: ModelConfig, settings: TrainSettings,
                 mode: str = "speaker", jobs: int = 1) -> list[FoldResult]:
    """Run every fold of the leave-one-unit-out plan; order follows the plan."""
    plan = make_folds(entries, mode)
    indices = range(len(plan.folds))
    if jobs <= 1:
        return [run_fold(i, plan.folds[i], entries, store, model_cfg, settings)
                for i in indices]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx,
                             initializer=_pool_init,
                             initargs=(entries, store, model_cfg, settings, plan.folds)) as ex:
        return list(ex.map(_pool_run, indices))


def build_report(results: list[FoldResult], label_names: list[str],
                 config_echo: dict) -> dict:
    """Assemble the JSON-ready evaluation report."""
    if not results:
        raise ValueError("no fold results")
    pooled = np.zeros_like(results[0].confusion)
    for r in results:
        pooled = pooled + r.confusion
    war, uar = metrics(pooled)
    return {
        "labels": list(label_names),
        "config": config_echo,
        "per_fold": [
            {
                "held_out": r.unit_id,
                "confusion": r.confusion.tolist(),
                "confusion_normalized": row_normalize(r.confusion).tolist(),
                "war": r.war,
                "uar": r.uar,
                "segment_confusion": r.segment_confusion.tolist(),
                "loss_curve": [float(v) for v in r.losses],
            }
            for r in results
        ],
        "pooled": {
            "confusion": pooled.tolist(),
            "confusion_normalized": row_normalize(pooled).tolist(),
            "war": war,
            "uar": uar,
        },
    }
