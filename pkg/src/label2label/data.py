"""Synthetic correlated-attribute benchmark, its Bayes oracle, and dataset files.

Each sample draws K binary latent factors; attribute j copies factor
``attr_map[j]`` and is flipped with probability ``flip_eps``. Attribute j
owns a square patch of the image: a diagonal stripe for value 1, the
anti-diagonal for value 0. With probability ``occlusion_rho`` the patch is
zeroed, so the attribute can only be inferred through its siblings.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels, tensor_io
from .errors import KTooLarge, LabelDomainError, ManifestError, TensorFormatError

MAX_ORACLE_FACTORS = 16


@dataclass
class SynthSpec:
    n_attributes: int = 8
    n_factors: int = 3
    flip_eps: float = 0.05
    occlusion_rho: float = 0.3
    image_size: int = 16
    patch: int = 4
    noise_sigma: float = 0.05
    factor_prior: float = 0.5
    seed: int = 0
    attr_map: list = field(default=None)

    def __post_init__(self):
        if self.attr_map is None:
            self.attr_map = [j % self.n_factors for j in range(self.n_attributes)]
        self.attr_map = [int(g) for g in self.attr_map]
        if not 1 <= self.n_factors <= self.n_attributes:
            raise ValueError("need 1 <= K <= M")
        if len(self.attr_map) != self.n_attributes or not all(0 <= g < self.n_factors for g in self.attr_map):
            raise ValueError("attr_map must send every attribute to a factor in [0, K)")
        if not (0 <= self.flip_eps < 1 and 0 <= self.occlusion_rho < 1):
            raise ValueError("flip_eps and occlusion_rho must lie in [0, 1)")
        if self.image_size % 4 or self.image_size % self.patch:
            raise ValueError("image size must be divisible by 4 and by the patch size")
        if (self.image_size // self.patch) ** 2 < self.n_attributes:
            raise ValueError("image has fewer patch cells than attributes")

    @property
    def grid(self):
        return self.image_size // self.patch

    def patch_origin(self, j):
        return (j // self.grid) * self.patch, (j % self.grid) * self.patch

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthSample:
    image: np.ndarray  # (H0, W0, 1)
    labels: np.ndarray  # (M,)
    factors: np.ndarray  # (K,) hidden
    occluded: np.ndarray  # (M,) hidden


def _patterns(p):
    diag = np.eye(p)
    return np.fliplr(diag), diag  # value 0, value 1


def render(labels, occluded, spec, rng):
    s = spec.image_size
    img = rng.normal(0.0, spec.noise_sigma, size=(s, s))
    pats = _patterns(spec.patch)
    for j, (v, occ) in enumerate(zip(labels, occluded)):
        r, c = spec.patch_origin(j)
        if occ:
            img[r:r + spec.patch, c:c + spec.patch] = 0.0
        else:
            img[r:r + spec.patch, c:c + spec.patch] += pats[int(v)]
    return img[:, :, None]


def sample_one(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    z = (rng.random(spec.n_factors) < spec.factor_prior).astype(np.int64)
    flips = (rng.random(spec.n_attributes) < spec.flip_eps).astype(np.int64)
    y = z[np.asarray(spec.attr_map)] ^ flips
    occ = (rng.random(spec.n_attributes) < spec.occlusion_rho).astype(np.int64)
    return SynthSample(render(y, occ, spec, rng), y, z, occ)


def read_patches(images, spec):
    """(visible, observed) per attribute, recovered from the pixels alone."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n = images.shape[0]
    p = spec.patch
    p0, p1 = _patterns(p)
    visible = np.zeros((n, spec.n_attributes), dtype=bool)
    observed = np.zeros((n, spec.n_attributes), dtype=np.int64)
    for j in range(spec.n_attributes):
        r, c = spec.patch_origin(j)
        blk = images[:, r:r + p, c:c + p, 0]
        visible[:, j] = np.any(blk != 0.0, axis=(1, 2))
        observed[:, j] = ((blk * p1).sum(axis=(1, 2)) > (blk * p0).sum(axis=(1, 2))).astype(np.int64)
    return visible, observed


def bayes_oracle(visible, observed, spec):
    """Exact P(y_j = 1 | visible patches) for a batch (N, M) of observations."""
    if spec.n_factors > MAX_ORACLE_FACTORS:
        raise KTooLarge(f"enumeration capped at K <= {MAX_ORACLE_FACTORS}")
    visible = np.atleast_2d(visible)
    observed = np.atleast_2d(observed)
    return _kernels.bayes_posterior(visible, observed, spec.attr_map, spec.n_factors,
                                    spec.flip_eps, spec.factor_prior)


def bayes_oracle_sample(sample, spec):
    return bayes_oracle(~sample.occluded.astype(bool), sample.labels, spec)[0]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _split_ids(n, sizes, seed):
    perm = np.random.default_rng([seed, 0xA11]).permutation(n)
    out, start = {}, 0
    for name, k in zip(("train", "val", "test"), sizes):
        out[name] = sorted(int(i) for i in perm[start:start + k])
        start += k
    return out


def default_split_sizes(n):
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def generate(spec, n, out_dir, split_sizes=None):
    """Write a dataset directory; identical spec, n and splits give identical bytes."""
    if n < 1:
        raise ValueError("need at least one sample")
    split_sizes = tuple(split_sizes) if split_sizes else default_split_sizes(n)
    if sum(split_sizes) != n or any(k < 0 for k in split_sizes):
        raise ValueError(f"split sizes {split_sizes} must be non-negative and sum to {n}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    m, k = spec.n_attributes, spec.n_factors
    names = [f"attr_{j}" for j in range(m)]
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="", encoding="utf-8") as lf, \
            open(os.path.join(out_dir, "hidden.csv"), "w", newline="", encoding="utf-8") as hf:
        lw = csv.writer(lf, lineterminator="\n")
        hw = csv.writer(hf, lineterminator="\n")
        lw.writerow(["sample_id"] + names)
        hw.writerow(["sample_id"] + [f"z_{i}" for i in range(k)] + [f"occluded_{j}" for j in range(m)])
        for i in range(n):
            smp = sample_one(spec, i)
            tensor_io.save(os.path.join(out_dir, "images", f"sample_{i}.l2lt"), smp.image)
            lw.writerow([i] + smp.labels.tolist())
            hw.writerow([i] + smp.factors.tolist() + smp.occluded.tolist())
    manifest = {
        "format": "label2label-dataset",
        "version": 1,
        "attribute_names": names,
        "n_samples": n,
        "image_shape": [spec.image_size, spec.image_size, 1],
        "images": "images/sample_{id}.l2lt",
        "labels": "labels.csv",
        "hidden": "hidden.csv",
        "splits": _split_ids(n, split_sizes, spec.seed),
        "synth_spec": spec.to_dict(),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


@dataclass
class Dataset:
    images: np.ndarray  # (N, H0, W0, C)
    labels: np.ndarray  # (N, M)
    ids: np.ndarray  # (N,)
    attribute_names: list
    spec: SynthSpec = None
    occluded: np.ndarray = None

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        for i in range(len(self.ids)):
            yield self.images[i], self.labels[i]

    def subset(self, rows):
        rows = np.asarray(rows)
        occ = None if self.occluded is None else self.occluded[rows]
        return Dataset(self.images[rows], self.labels[rows], self.ids[rows], self.attribute_names, self.spec, occ)

    def batches(self, batch_size, rng=None):
        """Index batches; a seeded permutation when ``rng`` is given, else file order."""
        order = np.arange(len(self.ids)) if rng is None else rng.permutation(len(self.ids))
        for start in range(0, len(order), batch_size):
            yield order[start:start + batch_size]

    def oracle_posterior(self):
        if self.spec is None:
            raise ManifestError("dataset carries no generator spec")
        visible, observed = read_patches(self.images, self.spec)
        return bayes_oracle(visible, observed, self.spec)


def _read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    for key in ("attribute_names", "n_samples", "images", "labels", "splits"):
        if key not in man:
            raise ManifestError(f"{path}: missing key {key!r}")
    return man


def _read_labels(path, m):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or header[0] != "sample_id" or len(header) != m + 1:
            raise ManifestError(f"{path}: bad header {header}")
        for lineno, row in enumerate(rd, start=2):
            if len(row) != m + 1:
                raise ManifestError(f"{path}: row {lineno} has {len(row)} fields")
            vals = []
            for col, v in enumerate(row[1:], start=1):
                if v not in ("0", "1"):
                    raise LabelDomainError(f"{path}: row {lineno}, column {header[col]}: value {v!r} not in {{0,1}}")
                vals.append(int(v))
            rows[int(row[0])] = vals
    return rows


def load_dataset(manifest_path, split=None):
    """Load a dataset (optionally one split) in ascending sample-id order."""
    man = _read_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    names = man["attribute_names"]
    labels = _read_labels(os.path.join(root, man["labels"]), len(names))
    if len(labels) != man["n_samples"]:
        raise ManifestError(f"labels.csv has {len(labels)} rows, manifest says {man['n_samples']}")
    if split is None:
        ids = sorted(labels)
    else:
        if split not in man["splits"]:
            raise ManifestError(f"unknown split {split!r}")
        ids = list(man["splits"][split])
    imgs = []
    for i in ids:
        if i not in labels:
            raise ManifestError(f"sample {i} has no label row")
        p = os.path.join(root, man["images"].format(id=i))
        try:
            imgs.append(tensor_io.load(p))
        except OSError as exc:
            raise TensorFormatError(f"{p}: {exc}") from exc
    spec = SynthSpec(**man["synth_spec"]) if man.get("synth_spec") else None
    occ = None
    if man.get("hidden"):
        hp = os.path.join(root, man["hidden"])
        if os.path.exists(hp):
            occ = _read_occlusion(hp, len(names))
            occ = np.array([occ[i] for i in ids], dtype=np.int64).reshape(len(ids), len(names))
    images = np.stack(imgs) if imgs else np.zeros((0,) + tuple(man.get("image_shape", (0, 0, 1))))
    lab = np.array([labels[i] for i in ids], dtype=np.int64).reshape(len(ids), len(names))
    return Dataset(images, lab, np.array(ids, dtype=np.int64), names, spec, occ)


def _read_occlusion(path, m):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        start = len(header) - m
        for row in rd:
            out[int(row[0])] = [int(v) for v in row[start:]]
    return out


def manifest_spec(manifest_path):
    man = _read_manifest(manifest_path)
    return SynthSpec(**man["synth_spec"]) if man.get("synth_spec") else None


def marginal_majority(train_labels):
    """Per-attribute majority class of the training labels."""
    train_labels = np.asarray(train_labels)
    return (train_labels.mean(axis=0) > 0.5).astype(np.int64)
