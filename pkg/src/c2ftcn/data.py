"""Feature/label file formats, dataset directories and a synthetic generator.

A dataset directory holds::

    mapping.txt        "index name" per action class
    activities.txt     "index name" per complex activity
    videos.txt         "video_id activity_name" per video
    features/<id>.c2ff binary features (see ``write_features``)
    labels/<id>.txt    one action name per frame
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"C2FF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


@dataclasses.dataclass
class VideoRecord:
    id: str
    features: np.ndarray      # (T, d)
    frame_labels: np.ndarray  # (T,)
    activity: int

    def __post_init__(self):
        if len(self.features) != len(self.frame_labels):
            raise ValueError(f"{self.id}: {len(self.features)} feature rows vs {len(self.frame_labels)} labels")


@dataclasses.dataclass
class Dataset:
    videos: list[VideoRecord]
    class_names: list[str]
    activity_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_activities(self) -> int:
        return len(self.activity_names)

    @property
    def dim(self) -> int:
        return self.videos[0].features.shape[1]

    def subset(self, ids) -> "Dataset":
        by_id = {v.id: v for v in self.videos}
        return Dataset([by_id[i] for i in ids], self.class_names, self.activity_names)

    def ids(self) -> list[str]:
        return [v.id for v in self.videos]


# ------------------------------------------------------------------ feature files

def write_features(path, f: np.ndarray) -> None:
    f = np.asarray(f)
    if f.ndim != 2:
        raise ValueError("features must be a (T, d) matrix")
    T, d = f.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, d))
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def load_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: header truncated at byte {len(buf)} (need {_HEADER.size})")
    magic, version, T, d = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    expected = T * d * 4
    actual = len(buf) - _HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload at byte {_HEADER.size} has {actual} bytes, expected {expected}")
    f = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(T, d).astype(np.float32)
    bad = ~np.isfinite(f)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError(f"{path}: non-finite value at byte {_HEADER.size + 4 * flat}")
    return f


# ------------------------------------------------------------------ text files

def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_mapping(path) -> dict[str, int]:
    """Parse ``index name`` lines into a name -> index dict."""
    mapping = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or not parts[0].lstrip("-").isdigit():
            raise FormatError(f"{path}:{lineno}: expected 'index name', got {line!r}")
        mapping[parts[1]] = int(parts[0])
    return mapping


def write_mapping(path, names) -> None:
    Path(path).write_text("".join(f"{i} {n}\n" for i, n in enumerate(names)), encoding="utf-8")


def load_labels(path, mapping: dict[str, int]) -> np.ndarray:
    out = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        name = line.strip()
        if name not in mapping:
            raise FormatError(f"{path}:{lineno}: unknown action {name!r}")
        out.append(mapping[name])
    return np.asarray(out, dtype=np.int64)


def load_split(path) -> list[str]:
    return [ln.strip() for ln in _read_lines(path) if ln.strip()]


def _names_by_index(mapping: dict[str, int]) -> list[str]:
    names = [None] * len(mapping)
    for name, idx in mapping.items():
        if not 0 <= idx < len(mapping) or names[idx] is not None:
            raise FormatError(f"mapping indices must be a permutation of 0..{len(mapping) - 1}")
        names[idx] = name
    return names


def load_dataset(root, ids=None) -> Dataset:
    root = Path(root)
    mapping = load_mapping(root / "mapping.txt")
    act_map = load_mapping(root / "activities.txt")
    wanted = None if ids is None else set(ids)
    videos = []
    for lineno, line in enumerate(_read_lines(root / "videos.txt"), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{root / 'videos.txt'}:{lineno}: expected 'video_id activity'")
        vid, act = parts
        if wanted is not None and vid not in wanted:
            continue
        if act not in act_map:
            raise FormatError(f"{root / 'videos.txt'}:{lineno}: unknown activity {act!r}")
        feats = load_features(root / "features" / f"{vid}.c2ff")
        labels = load_labels(root / "labels" / f"{vid}.txt", mapping)
        videos.append(VideoRecord(vid, feats, labels, act_map[act]))
    if wanted is not None and len(videos) != len(wanted):
        missing = wanted - {v.id for v in videos}
        raise FormatError(f"videos not listed in videos.txt: {sorted(missing)}")
    return Dataset(videos, _names_by_index(mapping), _names_by_index(act_map))


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    write_mapping(root / "mapping.txt", ds.class_names)
    write_mapping(root / "activities.txt", ds.activity_names)
    lines = []
    for v in ds.videos:
        write_features(root / "features" / f"{v.id}.c2ff", v.features)
        (root / "labels" / f"{v.id}.txt").write_text(
            "".join(ds.class_names[k] + "\n" for k in v.frame_labels), encoding="utf-8")
        lines.append(f"{v.id} {ds.activity_names[v.activity]}\n")
    (root / "videos.txt").write_text("".join(lines), encoding="utf-8")


# ------------------------------------------------------------------ synthetic data

@dataclasses.dataclass
class SyntheticSpec:
    seed: int = 0
    num_videos: int = 20
    num_classes: int = 6
    num_activities: int = 3
    dim: int = 16
    min_len: int = 448
    max_len: int = 576
    min_actions: int = 3
    max_actions: int = 8
    min_segment: int = 24
    noise: float = 0.0
    mean_scale: float = 1.0
    subsets: tuple[tuple[int, ...], ...] | None = None

    def activity_subsets(self) -> list[tuple[int, ...]]:
        """Per-activity action sets; by default the classes are dealt round-robin into disjoint groups."""
        if self.subsets is not None:
            subsets = [tuple(s) for s in self.subsets]
        else:
            subsets = [tuple(range(k, self.num_classes, self.num_activities))
                       for k in range(self.num_activities)]
        if len(subsets) != self.num_activities:
            raise ValueError("one action subset per activity is required")
        for s in subsets:
            if not s or any(not 0 <= c < self.num_classes for c in s):
                raise ValueError(f"invalid action subset {s}")
        return subsets


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Piecewise-constant class means plus isotropic Gaussian noise, one activity per video."""
    rng = np.random.default_rng(spec.seed)
    subsets = spec.activity_subsets()
    means = rng.normal(scale=spec.mean_scale, size=(spec.num_classes, spec.dim))
    videos = []
    for i in range(spec.num_videos):
        act = int(rng.integers(spec.num_activities))
        choices = subsets[act]
        n_act = int(rng.integers(spec.min_actions, spec.max_actions + 1))
        seq = [int(rng.choice(choices))]
        while len(seq) < n_act:
            options = [c for c in choices if c != seq[-1]] or list(choices)
            seq.append(int(rng.choice(options)))
        T = int(rng.integers(spec.min_len, spec.max_len + 1))
        n_act = min(n_act, T // spec.min_segment)
        seq = seq[:max(n_act, 1)]
        slack = T - spec.min_segment * len(seq)
        cuts = np.sort(rng.integers(0, slack + 1, size=len(seq) - 1))
        extra = np.diff(np.concatenate([[0], cuts, [slack]]))
        durations = spec.min_segment + extra
        labels = np.repeat(np.asarray(seq, dtype=np.int64), durations)
        feats = means[labels] + spec.noise * rng.normal(size=(T, spec.dim))
        videos.append(VideoRecord(f"vid{i:04d}", feats.astype(np.float32), labels, act))
    class_names = [f"action{c}" for c in range(spec.num_classes)]
    activity_names = [f"activity{k}" for k in range(spec.num_activities)]
    return Dataset(videos, class_names, activity_names)


def activity_action_sets(ds: Dataset) -> dict[int, set[int]]:
    """Actions observed in the ground truth of each activity."""
    sets: dict[int, set[int]] = {}
    for v in ds.videos:
        sets.setdefault(v.activity, set()).update(np.unique(v.frame_labels).tolist())
    return sets


def kfold_splits(ids, k: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    ids = list(ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of videos ({len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    out = []
    for i, test in enumerate(folds):
        test_set = set(test.tolist())
        out.append(([ids[j] for j in order if j not in test_set], [ids[j] for j in test]))
    return out
