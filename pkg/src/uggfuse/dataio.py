"""Synthetic identity data, the noise protocols, and the feature-file codec.

The generator plants a per-identity, per-modality clean token layout (a patch
pattern plus a signature vector shared by every patch) and then corrupts each
drawn instance independently: per-patch Gaussian noise with a heteroscedastic
subset at 5x strength, contiguous occlusion blocks zeroed after the noise, and
modality conflicts that swap one modality's clean content to another identity.
Class tokens are the mean of the clean locals plus baseline noise, so they
survive occlusion.

Everything is a pure function of its spec, including all randomness.
"""

from __future__ import annotations

import fcntl
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ContractViolationError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .gpgr import MODALITIES, PatchFeatureSet
from .numerics import RngStream

SPLITS = ("train", "query", "gallery")
NOISE_KINDS = ("gaussian", "arbitrary")
NOISE_TARGETS = ("train-and-test", "test-only")

FEATURE_MAGIC = b"UGGF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQQQQQ")  # magic, version, S, n, D, M, label offset

SALT_PEPPER_PATCH_FRACTION = 0.05
SIGN_FLIP_ENTRY_FRACTION = 0.01
HETERO_NOISE_MULTIPLIER = 5.0
# identity evidence is localized: a strong mark on a few patch positions over a
# low-amplitude appearance pattern, so plain pooling dilutes what patch-level
# processing can still pick out
SIGNATURE_PATCH_FRACTION = 0.2
PROTO_SCALE = 0.25


# -- specs ---------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic corpus; defaults give the standard benchmark."""

    num_ids: int = 20
    per_id: int = 10
    dim: int = 64
    n_local: int = 128
    signal: float = 1.0
    noise_std: float = 0.35
    hetero_frac: float = 0.25
    occl_prob: float = 0.2
    occl_block: int = 4
    conflict_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.num_ids, self.per_id, self.dim, self.n_local) < 1:
            raise ConfigError("counts and dimensions must be >= 1")
        if self.num_ids < 2:
            raise ConfigError("need >= 2 identities")
        for name in ("hetero_frac", "occl_prob", "conflict_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.signal < 0 or self.noise_std < 0:
            raise ConfigError("signal and noise_std must be >= 0")
        if self.occl_block < 1:
            raise ConfigError("occl_block must be >= 1")
        if self.occl_prob > 0 and self.occl_block > self.n_local:
            raise ConfigError("occl_block must not exceed n_local")


def benchmark_spec(seed: int = 0, **overrides) -> SyntheticSpec:
    """The desk-scale benchmark: 20 ids x 10 instances, D=64, n=16."""
    kw = dict(num_ids=20, per_id=10, dim=64, n_local=16, seed=seed)
    kw.update(overrides)
    return SyntheticSpec(**kw)


@dataclass(frozen=True)
class NoiseSpec:
    """One robustness condition: corruption kind, intensity, and placement."""

    kind: str = "gaussian"
    epsilon: float = 0.0
    target: str = "test-only"
    seed: int = 0
    modalities: tuple = MODALITIES

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"noise kind must be one of {NOISE_KINDS}")
        if self.epsilon < 0:
            raise ConfigError("noise intensity must be >= 0")
        if self.target not in NOISE_TARGETS:
            raise ConfigError(f"noise target must be one of {NOISE_TARGETS}")
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad or not self.modalities:
            raise ConfigError(f"modalities must be a nonempty subset of {MODALITIES}")


# -- dataset -------------------------------------------------------------------


@dataclass
class Dataset:
    """Dense multi-modal token bank with identity labels and a split tag."""

    sample_ids: np.ndarray  # (S,) unique int64
    labels: np.ndarray  # (S,) int64 drawn from a contiguous 0..K-1 identity set
    tokens: np.ndarray  # (S, M, n+1, D) float64
    split: str = "train"

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.split not in SPLITS:
            raise ContractViolationError(f"split must be one of {SPLITS}")
        s = self.sample_ids.shape[0]
        if self.labels.shape != (s,) or self.tokens.ndim != 4 or \
                self.tokens.shape[0] != s:
            raise ContractViolationError("sample_ids/labels/tokens disagree on count")
        if self.tokens.shape[1] != len(MODALITIES):
            raise ContractViolationError(
                f"expected {len(MODALITIES)} modalities, got {self.tokens.shape[1]}")
        if len(np.unique(self.sample_ids)) != s:
            raise ContractViolationError("sample ids must be unique")
        if not np.isfinite(self.tokens).all():
            raise ContractViolationError("tokens must be finite")
        ids = np.unique(self.labels)
        if s and not np.array_equal(ids, np.arange(ids[-1] + 1)):
            raise ContractViolationError("identity labels must be contiguous from 0")

    @property
    def num_samples(self) -> int:
        return self.sample_ids.shape[0]

    @property
    def n_local(self) -> int:
        return self.tokens.shape[2] - 1

    @property
    def dim(self) -> int:
        return self.tokens.shape[3]

    @property
    def num_ids(self) -> int:
        return int(self.labels.max()) + 1 if self.num_samples else 0

    def samples(self) -> list:
        """Per-sample view: (sample-id, identity, modality -> PatchFeatureSet)."""
        out = []
        for i in range(self.num_samples):
            feats = {m: PatchFeatureSet(modality=m, tokens=self.tokens[i, mi])
                     for mi, m in enumerate(MODALITIES)}
            out.append((int(self.sample_ids[i]), int(self.labels[i]), feats))
        return out

    def copy(self) -> "Dataset":
        return Dataset(self.sample_ids.copy(), self.labels.copy(),
                       self.tokens.copy(), self.split)


# -- generation ------------------------------------------------------------------


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw the full sample pool; split_instances carves it into splits.

    Clean content per (identity, modality): a low-amplitude appearance pattern
    over all patches plus a strong identity mark placed on a small fixed subset
    of patch positions. The class token is the mean of the clean locals. Noise,
    heteroscedastic patches, occlusion, and cross-identity conflicts are then
    applied per instance.
    """
    m = len(MODALITIES)
    proto = RngStream.named(spec.seed, "proto").standard_normal(
        (spec.num_ids, m, spec.n_local, spec.dim))
    marks = RngStream.named(spec.seed, "signature")
    signature = marks.standard_normal((spec.num_ids, m, spec.dim))
    q = max(1, round(SIGNATURE_PATCH_FRACTION * spec.n_local))
    clean = PROTO_SCALE * spec.signal * proto
    for ident in range(spec.num_ids):
        for mi in range(m):
            pos = marks.choice(spec.n_local, size=q, replace=False)
            clean[ident, mi, pos] += spec.signal * signature[ident, mi]
    draws = RngStream.named(spec.seed, "instance")

    total = spec.num_ids * spec.per_id
    tokens = np.zeros((total, m, spec.n_local + 1, spec.dim))
    labels = np.repeat(np.arange(spec.num_ids), spec.per_id)
    for s in range(total):
        ident = int(labels[s])
        for mi in range(m):
            src = ident
            if spec.conflict_prob > 0 and \
                    draws.uniform(0.0, 1.0) < spec.conflict_prob:
                off = int(draws.integers(1, spec.num_ids))
                src = (ident + off) % spec.num_ids
            base = clean[src, mi]
            mult = np.ones((spec.n_local, 1))
            if spec.hetero_frac > 0:
                hot = draws.uniform(0.0, 1.0, (spec.n_local,)) < spec.hetero_frac
                mult[hot] = HETERO_NOISE_MULTIPLIER
            local = base + spec.noise_std * mult * draws.standard_normal(
                (spec.n_local, spec.dim))
            cls = base.mean(axis=0) + spec.noise_std * draws.standard_normal(
                (spec.dim,))
            if spec.occl_prob > 0 and draws.uniform(0.0, 1.0) < spec.occl_prob:
                start = int(draws.integers(0, spec.n_local - spec.occl_block + 1))
                local[start:start + spec.occl_block] = 0.0
            tokens[s, mi, 0] = cls
            tokens[s, mi, 1:] = local
    return Dataset(sample_ids=np.arange(total), labels=labels, tokens=tokens,
                   split="train")


def split_instances(ds: Dataset, fractions=(0.6, 0.2, 0.2)):
    """Per-identity carve into (train, query, gallery) by instance order.

    Query/gallery each get at least one instance per identity; train keeps
    the remainder, so every identity appears in every split.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions must be three values summing to 1")
    parts = {name: [] for name in SPLITS}
    for ident in range(ds.num_ids):
        idx = np.flatnonzero(ds.labels == ident)
        c = len(idx)
        n_q = max(1, math.floor(fractions[1] * c))
        n_g = max(1, math.floor(fractions[2] * c))
        n_tr = c - n_q - n_g
        if n_tr < 1:
            raise ContractViolationError(
                f"identity {ident} has only {c} instances, cannot fill 3 splits")
        parts["train"].append(idx[:n_tr])
        parts["query"].append(idx[n_tr:n_tr + n_q])
        parts["gallery"].append(idx[n_tr + n_q:])
    out = []
    for name in SPLITS:
        sel = np.concatenate(parts[name])
        out.append(Dataset(ds.sample_ids[sel], ds.labels[sel],
                           ds.tokens[sel].copy(), name))
    return tuple(out)


# -- noise protocols --------------------------------------------------------------


def per_dim_std(ds: Dataset) -> np.ndarray:
    """Per-dimension std over every token in the dataset, shape (D,)."""
    return ds.tokens.reshape(-1, ds.dim).std(axis=0)


def inject_noise(ds: Dataset, noise: NoiseSpec, ref_std=None) -> Dataset:
    """Corrupted copy of ds; the input is never touched.

    gaussian adds N(0, (eps/255 * s_d)^2) per dimension d, with s_d the
    per-dimension std of the clean reference (the dataset itself unless
    `ref_std` pins the clean train split's scale). arbitrary picks one of
    {gaussian, patch zeroing, sign flips} uniformly per sample. eps = 0
    disables the protocol entirely, and a test-only target leaves
    train-split datasets untouched.
    """
    if noise.epsilon == 0:
        return ds.copy()
    if noise.target == "test-only" and ds.split == "train":
        return ds.copy()
    s_d = per_dim_std(ds) if ref_std is None else np.asarray(ref_std, dtype=np.float64)
    if s_d.shape != (ds.dim,) or not np.isfinite(s_d).all() or (s_d < 0).any():
        raise ContractViolationError("reference std must be a finite (D,) >= 0 vector")
    scale = noise.epsilon / 255.0 * s_d
    rng = RngStream.named(noise.seed, f"inject-{noise.kind}")
    tokens = ds.tokens.copy()
    mod_idx = [mi for mi, m in enumerate(MODALITIES) if m in noise.modalities]
    if noise.kind == "gaussian":
        for mi in mod_idx:
            tokens[:, mi] += scale * rng.standard_normal(tokens[:, mi].shape)
    else:
        modes = rng.integers(0, 3, (ds.num_samples,))
        for s in range(ds.num_samples):
            for mi in mod_idx:
                view = tokens[s, mi]
                if modes[s] == 0:
                    view += scale * rng.standard_normal(view.shape)
                elif modes[s] == 1:
                    hot = rng.uniform(0.0, 1.0, (ds.n_local,)) \
                        < SALT_PEPPER_PATCH_FRACTION
                    view[1:][hot] = 0.0
                else:
                    flips = rng.uniform(0.0, 1.0, view.shape) \
                        < SIGN_FLIP_ENTRY_FRACTION
                    view[flips] *= -1.0
    return Dataset(ds.sample_ids.copy(), ds.labels.copy(), tokens, ds.split)


# -- feature-file codec ------------------------------------------------------------


def write_features(ds: Dataset, path) -> None:
    """Single-file dump: fixed header, float32 LE payload, label table."""
    payload = ds.tokens.astype("<f4").tobytes()
    label_offset = _HEADER.size + len(payload)
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, ds.num_samples,
                          ds.n_local, ds.dim, len(MODALITIES), label_offset)
    table = [struct.pack("<B", SPLITS.index(ds.split))]
    for sid, lab in zip(ds.sample_ids, ds.labels):
        table.append(struct.pack("<Qq", int(sid), int(lab)))
    with open(path, "wb") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        fh.write(header + payload + b"".join(table))


def read_features(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise TruncatedPayloadError("file shorter than the magic")
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"expected magic {FEATURE_MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError("file ends inside the header")
    _, version, s, n, d, m, label_offset = _HEADER.unpack_from(blob)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(
            f"format version {version}, reader supports {FEATURE_VERSION}")
    if m != len(MODALITIES):
        raise ContractViolationError(
            f"file holds {m} modalities, pipeline expects {len(MODALITIES)}")
    payload_bytes = s * m * (n + 1) * d * 4
    if label_offset != _HEADER.size + payload_bytes:
        raise ContractViolationError("label table offset disagrees with payload size")
    expected = label_offset + 1 + s * 16
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"payload ends at byte {len(blob)}, header promises {expected}")
    if len(blob) > expected:
        raise ContractViolationError(
            f"{len(blob) - expected} trailing bytes after the label table")
    tokens = np.frombuffer(
        blob, dtype="<f4", count=s * m * (n + 1) * d, offset=_HEADER.size
    ).reshape(s, m, n + 1, d).astype(np.float64)
    split_code = blob[label_offset]
    if split_code >= len(SPLITS):
        raise ContractViolationError(f"unknown split code {split_code}")
    sample_ids = np.empty(s, dtype=np.int64)
    labels = np.empty(s, dtype=np.int64)
    off = label_offset + 1
    for i in range(s):
        sid, lab = struct.unpack_from("<Qq", blob, off)
        sample_ids[i], labels[i] = sid, lab
        off += 16
    return Dataset(sample_ids=sample_ids, labels=labels, tokens=tokens,
                   split=SPLITS[split_code])


def write_manifest(datasets, path, comment: str | None = None) -> None:
    """UTF-8 CSV of (sample-id, identity, split) across the given datasets."""
    # camera column reserved for future protocols; synthetic data has none
    lines = ([f"# {comment}"] if comment else []) + ["sample_id,identity,split"]
    for ds in datasets:
        for sid, lab in zip(ds.sample_ids, ds.labels):
            lines.append(f"{int(sid)},{int(lab)},{ds.split}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
