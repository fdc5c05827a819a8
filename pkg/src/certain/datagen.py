"""Synthetic paired sequence/image datasets.

Each sample is driven by a latent ``z ~ N(0, I_4)``. The sequence modality is a
linear trend plus AR(1) noise whose level and slope are linear in ``z``; the
image is a smooth bump whose position, width and height are functions of ``z``. Labels are
Bernoulli with a logistic link on ``z``. A fraction ``mismatch_rate`` of samples
get an image drawn from an independent latent, so their two modalities disagree.

Every sample uses its own RNG stream keyed by ``(seed, split, index)``, which
keeps generation deterministic and independent of sample order.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import corruptions
from .errors import ConfigError, ParseError

LATENT_DIM = 4
AGE_BANDS = ("A1", "A2", "A3")
SEXES = ("M", "F")
SPLITS = ("train", "val", "test", "test_shifted")
_SPLIT_TAGS = {"train": 0, "val": 1, "test": 2}
_ID_PREFIX = {"train": "tr", "val": "va", "test": "te"}
# standard normal tertiles
_AGE_CUTS = (-0.4307272992954576, 0.4307272992954576)
_WORLD_SEED = 20240607

LABEL_WEIGHTS = np.array([1.6, -1.2, 0.8, 0.0])
LABEL_BIAS = -1.4
AR_COEF = 0.7
AR_NOISE = 0.3
IMG_NOISE = 0.02
FORMAT = "certain-dataset/1"


@dataclass
class DatasetManifest:
    seed: int = 0
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 400
    dims: tuple = (48, 8, 16, 16)
    mismatch_rate: float = 0.2
    shift_spec: list = field(default_factory=lambda: [
        "seq:time_reverse", "seq:drop_initial", "img:invert", "img:vflip"])

    def validate(self):
        for name in ("n_train", "n_val", "n_test"):
            n = getattr(self, name)
            if not isinstance(n, (int, np.integer)) or n < 1:
                raise ConfigError(f"{name} must be a positive integer, got {n!r}")
        if len(self.dims) != 4:
            raise ConfigError(f"dims must be (T, F, H, W), got {self.dims!r}")
        if any(int(d) < m for d, m in zip(self.dims, (4, 2, 4, 4))):
            raise ConfigError(f"dims must be at least (4, 2, 4, 4), got {tuple(self.dims)}")
        if not 0.0 <= self.mismatch_rate <= 1.0:
            raise ConfigError("mismatch_rate must lie in [0, 1]")
        for spec in self.shift_spec:
            try:
                corruptions.parse_kind(spec)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    def to_json(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["format"] = FORMAT
        return d

    @classmethod
    def from_json(cls, d):
        d = {k: v for k, v in d.items() if k != "format"}
        d["dims"] = tuple(d["dims"])
        return cls(**d)


@dataclass(eq=False)
class MultimodalSample:
    id: str
    seq: np.ndarray
    img: np.ndarray
    label: int
    group: dict
    mismatched: bool = False

    def __eq__(self, other):
        if not isinstance(other, MultimodalSample):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and self.group == other.group and self.mismatched == other.mismatched
                and np.array_equal(self.seq, other.seq)
                and np.array_equal(self.img, other.img))


@dataclass(eq=False)
class Dataset:
    manifest: DatasetManifest
    train: list
    val: list
    test: list
    test_shifted: list

    def split(self, name):
        return getattr(self, name)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.manifest == other.manifest
                and all(getattr(self, s) == getattr(other, s) for s in SPLITS))


class _World:
    """Fixed generative weights, shared by every dataset of the same dims.

    Label information sits in the sequence slope (direction of time matters)
    and in the bump position (image orientation matters); the sequence level
    is mostly a nuisance driven by the label-free latent coordinate.
    """

    def __init__(self, dims):
        T, F, H, W = dims
        rng = np.random.default_rng([_WORLD_SEED, T, F, H, W])
        self.level = rng.normal(size=(F, LATENT_DIM)) * np.array([0.15, 0.15, 0.15, 1.0])
        self.slope = 2.0 * rng.normal(size=(F, LATENT_DIM)) * np.array([1.0, 1.0, 0.2, 0.1])
        self.dims = (T, F, H, W)
        yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        self.yy = yy / max(H - 1, 1)
        self.xx = xx / max(W - 1, 1)

    def seq(self, z, rng):
        T, F = self.dims[:2]
        t = (np.arange(T) / (T - 1) - 0.5)[:, None]
        trend = self.level @ z + t * (self.slope @ z)
        noise = np.empty((T, F))
        u = rng.normal(0.0, AR_NOISE, size=F)
        for i in range(T):
            u = AR_COEF * u + rng.normal(0.0, AR_NOISE, size=F)
            noise[i] = u
        return trend + noise

    def img(self, z, rng):
        cx = 0.15 + 0.7 / (1.0 + np.exp(-1.2 * (z[0] + 0.5 * z[2])))
        cy = 0.15 + 0.7 / (1.0 + np.exp(-1.2 * (z[2] - 0.5 * z[1])))
        width = 0.16 * np.exp(0.25 * np.tanh(z[3]))
        amp = 0.65 + 0.25 * np.tanh(z[1])
        d2 = (self.xx - cx) ** 2 + (self.yy - cy) ** 2
        field = 0.1 + amp * np.exp(-d2 / (2.0 * width ** 2))
        field = field + rng.normal(0.0, IMG_NOISE, size=field.shape)
        return np.clip(field, 0.0, 1.0)


def _group(z):
    a = z[3]
    band = AGE_BANDS[0] if a < _AGE_CUTS[0] else AGE_BANDS[1] if a < _AGE_CUTS[1] else AGE_BANDS[2]
    return {"age_band": band, "sex": SEXES[0] if z[2] < 0 else SEXES[1]}


def _make_sample(world, manifest, split, index):
    rng = np.random.default_rng([manifest.seed, _SPLIT_TAGS[split], index])
    z = rng.normal(size=LATENT_DIM)
    logit = LABEL_WEIGHTS @ z + LABEL_BIAS
    label = int(rng.random() < 1.0 / (1.0 + np.exp(-logit)))
    seq = world.seq(z, rng)
    mismatched = bool(rng.random() < manifest.mismatch_rate)
    img_latent = rng.normal(size=LATENT_DIM) if mismatched else z
    img = world.img(img_latent, rng)
    return MultimodalSample(
        id=f"{_ID_PREFIX[split]}{index:05d}", seq=seq, img=img, label=label,
        group=_group(z), mismatched=mismatched)


def shift_sample(sample, shift_spec, seed):
    """Corrupt both modalities of a copy of ``sample`` per ``shift_spec``.

    One sequence kind and one image kind are drawn per sample from the kinds
    listed in ``shift_spec``.
    """
    kinds = [corruptions.parse_kind(s) for s in shift_spec]
    seq_kinds = [k for m, k in kinds if m == "seq"]
    img_kinds = [k for m, k in kinds if m == "img"]
    rng = np.random.default_rng([seed, 7, int(sample.id[2:])])
    seq, img = sample.seq, sample.img
    if seq_kinds:
        seq = corruptions.corrupt_seq(seq, seq_kinds[rng.integers(len(seq_kinds))], rng=rng)
    if img_kinds:
        img = corruptions.corrupt_img(img, img_kinds[rng.integers(len(img_kinds))], rng=rng)
    return MultimodalSample(sample.id, seq.copy(), img.copy(), sample.label,
                            dict(sample.group), sample.mismatched)


def generate(manifest):
    """Generate the train/val/test/test_shifted splits described by ``manifest``."""
    manifest.validate()
    world = _World(tuple(int(d) for d in manifest.dims))
    splits = {}
    for split, n in (("train", manifest.n_train), ("val", manifest.n_val),
                     ("test", manifest.n_test)):
        splits[split] = [_make_sample(world, manifest, split, i) for i in range(n)]
    splits["test_shifted"] = [shift_sample(s, manifest.shift_spec, manifest.seed)
                              for s in splits["test"]]
    return Dataset(manifest=manifest, **splits)


def mix_shifted(test, test_shifted, fraction, seed):
    """Replace a random ``fraction`` of test samples by their shifted copies."""
    if len(test) != len(test_shifted):
        raise ConfigError("test and test_shifted differ in length")
    rng = np.random.default_rng([seed, 11])
    n_shift = int(round(fraction * len(test)))
    chosen = set(rng.permutation(len(test))[:n_shift].tolist())
    mixed = [test_shifted[i] if i in chosen else test[i] for i in range(len(test))]
    flags = np.array([i in chosen for i in range(len(test))])
    return mixed, flags


def split_cv(train, folds=5, seed=0):
    """Shuffle-and-partition ``train`` into ``folds`` (train_fold, val_fold) pairs."""
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if folds > len(train):
        raise ConfigError(f"cannot split {len(train)} samples into {folds} folds")
    order = np.random.default_rng([seed, 5]).permutation(len(train))
    parts = np.array_split(order, folds)
    out = []
    for k in range(folds):
        val_idx = set(parts[k].tolist())
        out.append(([train[i] for i in order if i not in val_idx],
                     [train[i] for i in parts[k]]))
    return out


def stack(samples):
    """Stack samples into ``(seq (N,T,F), img (N,H,W), labels (N,))`` arrays."""
    seq = np.stack([s.seq for s in samples])
    img = np.stack([s.img for s in samples])
    labels = np.array([-1 if s.label is None else s.label for s in samples])
    return seq, img, labels


# --- serialization -------------------------------------------------------

def sample_to_record(sample, extra=None):
    rec = {
        "id": sample.id,
        "seq": sample.seq.tolist(),
        "img": sample.img.tolist(),
        "label": None if sample.label is None else int(sample.label),
        "group": sample.group,
        "mismatched": bool(sample.mismatched),
    }
    if extra:
        rec.update(extra)
    return rec


_REQUIRED = ("id", "seq", "img", "label", "group", "mismatched")


def record_to_sample(rec, line, allow_null_label=False):
    for key in _REQUIRED:
        if key not in rec:
            raise ParseError(f"missing field {key!r}", line=line, field=key)
    label = rec["label"]
    if label is None and not allow_null_label:
        raise ParseError("label is null", line=line, field="label")
    if label is not None and label not in (0, 1):
        raise ParseError(f"label must be 0 or 1, got {label!r}", line=line, field="label")
    try:
        seq = np.asarray(rec["seq"], dtype=np.float64)
        img = np.asarray(rec["img"], dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError("seq/img are not numeric matrices", line=line) from None
    if seq.ndim != 2 or img.ndim != 2:
        raise ParseError("seq and img must be 2-D matrices", line=line)
    group = rec["group"]
    if (not isinstance(group, dict) or group.get("age_band") not in AGE_BANDS
            or group.get("sex") not in SEXES):
        raise ParseError(f"invalid group {group!r}", line=line, field="group")
    return MultimodalSample(rec["id"], seq, img, label, dict(group), bool(rec["mismatched"]))


def write_jsonl(samples, path, extras=None):
    path = Path(path)
    with path.open("w") as fh:
        for i, s in enumerate(samples):
            extra = extras[i] if extras is not None else None
            fh.write(json.dumps(sample_to_record(s, extra), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path, allow_null_label=False):
    """Read samples from a JSON Lines file; returns ``(samples, raw_records)``."""
    samples, records = [], []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", line=lineno)
            samples.append(record_to_sample(rec, lineno, allow_null_label))
            records.append(rec)
    return samples, records


def save(dataset, path):
    """Write every split as ``<split>.jsonl`` plus ``dataset.manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        write_jsonl(dataset.split(split), path / f"{split}.jsonl")
    manifest = dataset.manifest.to_json()
    manifest["counts"] = {s: len(dataset.split(s)) for s in SPLITS}
    (path / "dataset.manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load(path):
    path = Path(path)
    mpath = path / "dataset.manifest.json"
    if not mpath.exists():
        raise ConfigError(f"no dataset manifest at {mpath} (run `certain generate` first)")
    raw = json.loads(mpath.read_text())
    counts = raw.pop("counts", None)
    manifest = DatasetManifest.from_json(raw)
    splits = {}
    for split in SPLITS:
        splits[split], _ = read_jsonl(path / f"{split}.jsonl")
        if counts is not None and counts[split] != len(splits[split]):
            raise ParseError(f"{split}.jsonl holds {len(splits[split])} records, "
                             f"manifest says {counts[split]}")
    ids = [s.id for split in ("train", "val", "test") for s in splits[split]]
    if len(ids) != len(set(ids)):
        raise ParseError("splits share sample ids")
    return Dataset(manifest=manifest, **splits)
