"""Flat key=value run configuration: registry, file/flag resolution, hashing.

One root `seed` key feeds every random stream (data synthesis, parameter
init, reparameterization draws, batch sampling, noise injection). Every key
carries a provenance note saying whether its default mirrors the method's
stated setting or is an artifact decision of this implementation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .dataio import NoiseSpec, SyntheticSpec
from .errors import ConfigError
from .objective import TrainConfig


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | bool
    default: object
    note: str


# kind, default, provenance note (shown by --help)
REGISTRY: dict = {
    "seed": Key("int", 0, "root seed for all named random streams [artifact]"),
    "data.D": Key("int", 64, "token feature dimension [artifact]"),
    "data.n": Key("int", 128, "local tokens per modality [method default]"),
    "synth.ids": Key("int", 20, "synthetic identity count [artifact]"),
    "synth.per_id": Key("int", 10, "instances per identity [artifact]"),
    "synth.signal": Key("float", 1.0, "identity signal scale [artifact]"),
    "synth.noise_std": Key("float", 0.35, "baseline patch noise std [artifact]"),
    "synth.hetero_frac": Key("float", 0.25, "fraction of 5x-noise patches [artifact]"),
    "synth.occl_prob": Key("float", 0.2, "per-modality occlusion probability [artifact]"),
    "synth.occl_block": Key("int", 4, "occluded contiguous patch count [artifact]"),
    "synth.conflict_prob": Key("float", 0.1, "modality identity-swap probability [artifact]"),
    "gpgr.L": Key("int", 2, "graph convolution layers [method default]"),
    "gpgr.tau": Key("str", "median", "heat-kernel bandwidth: median or a float [artifact]"),
    "gpgr.knn": Key("int", 0, "adjacency sparsification, 0 = dense [artifact]"),
    "gpgr.pooling": Key("str", "mean", "local-token pooling: mean or max [artifact]"),
    "ugmoe.C": Key("int", 4, "experts per modality [method default]"),
    "ugmoe.k": Key("int", 1, "donated top-k experts per other modality [method default]"),
    "ugmoe.hidden": Key("int", 0, "expert hidden width, 0 = D [artifact]"),
    "ugmoe.expert_input": Key("str", "x-tilde", "expert input: x-tilde or mu-tilde [artifact]"),
    "loss.lambda1": Key("float", 0.1, "KL weight [method default]"),
    "loss.lambda2": Key("float", 1e-4, "routing-loss weight [method default]"),
    "loss.lambda3": Key("float", 1e-4, "balance-loss weight [method default]"),
    "loss.margin": Key("float", 0.3, "triplet margin [artifact]"),
    "train.variant": Key("str", "e", "ablation variant a..e [artifact]"),
    "train.lr": Key("float", 3.5e-4, "Adam learning rate [method default]"),
    "train.epochs": Key("int", 40, "training epochs [method default]"),
    "train.P": Key("int", 4, "identities per batch [artifact]"),
    "train.K": Key("int", 4, "instances per identity per batch [artifact]"),
    "train.bn_neck": Key("bool", False, "batch-norm neck switch [artifact, off]"),
    "train.aux_heads": Key("bool", False, "per-modality CE heads switch [artifact, off]"),
    "train.warmup_steps": Key("int", 0, "linear lr warmup steps [artifact, off]"),
    "train.lr_decay": Key("str", "none", "lr schedule: none or cosine [artifact, off]"),
    "noise.kind": Key("str", "gaussian", "corruption family: gaussian or arbitrary [artifact]"),
    "noise.eps": Key("float", 0.0, "corruption intensity, 0 disables [method axis]"),
    "noise.target": Key("str", "test-only", "corruption placement [artifact]"),
    "noise.modalities": Key("str", "R,N,T", "comma list of corrupted modalities [artifact]"),
    "eval.metric": Key("str", "euclidean", "retrieval distance: euclidean or cosine [artifact]"),
    "sweep.eps": Key("str", "0,5,10,15,20,25,30", "sweep intensity grid [method axis]"),
    "sweep.seeds": Key("str", "0,1,2,3,4", "sweep/ablation seeds [artifact]"),
    "sweep.variants": Key("str", "a,b,c,d,e", "variants to sweep/ablate [artifact]"),
}


def _parse_value(key: str, text: str):
    kind = REGISTRY[key].kind
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {kind})") from None


def parse_config_file(path) -> dict:
    """key = value lines; # comments and blanks ignored; unknown keys rejected."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            bare = line.split("#", 1)[0].strip()
            if not bare:
                continue
            key, sep, value = bare.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            if key not in REGISTRY:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _parse_value(key, value)
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then file values, then --key flag overrides. Fully typed."""
    cfg = {key: spec.default for key, spec in REGISTRY.items()}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in REGISTRY:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _parse_value(key, str(value)) if isinstance(value, str) else value
    return cfg


def canonical_text(cfg: dict) -> str:
    """Deterministic rendering used for logging, artifacts, and the hash."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    """64-bit blake2b digest of the canonical text, 16 hex chars."""
    return hashlib.blake2b(canonical_text(cfg).encode("utf-8"),
                           digest_size=8).hexdigest()


def help_epilog() -> str:
    lines = ["configuration keys (override with --<key> <value>):"]
    for key, spec in REGISTRY.items():
        lines.append(f"  {key:22s} default {spec.default!r:18} {spec.note}")
    return "\n".join(lines)


# -- typed views -----------------------------------------------------------------


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(
        num_ids=cfg["synth.ids"], per_id=cfg["synth.per_id"], dim=cfg["data.D"],
        n_local=cfg["data.n"], signal=cfg["synth.signal"],
        noise_std=cfg["synth.noise_std"], hetero_frac=cfg["synth.hetero_frac"],
        occl_prob=cfg["synth.occl_prob"], occl_block=cfg["synth.occl_block"],
        conflict_prob=cfg["synth.conflict_prob"], seed=cfg["seed"])


def _tau(cfg: dict):
    raw = cfg["gpgr.tau"]
    if raw == "median":
        return raw
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"gpgr.tau must be 'median' or a float, got {raw!r}") from None


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        seed=cfg["seed"], variant=cfg["train.variant"], dim=cfg["data.D"],
        n_local=cfg["data.n"], layers=cfg["gpgr.L"], c=cfg["ugmoe.C"],
        k=cfg["ugmoe.k"], expert_hidden=cfg["ugmoe.hidden"],
        pooling=cfg["gpgr.pooling"], tau=_tau(cfg), knn=cfg["gpgr.knn"],
        expert_input=cfg["ugmoe.expert_input"], bn_neck=cfg["train.bn_neck"],
        aux_heads=cfg["train.aux_heads"], lambda1=cfg["loss.lambda1"],
        lambda2=cfg["loss.lambda2"], lambda3=cfg["loss.lambda3"],
        lr=cfg["train.lr"], epochs=cfg["train.epochs"], p_ids=cfg["train.P"],
        k_inst=cfg["train.K"], margin=cfg["loss.margin"],
        warmup_steps=cfg["train.warmup_steps"], lr_decay=cfg["train.lr_decay"])


def noise_spec(cfg: dict, epsilon: float | None = None,
               seed: int | None = None) -> NoiseSpec:
    mods = tuple(m.strip() for m in cfg["noise.modalities"].split(",") if m.strip())
    return NoiseSpec(kind=cfg["noise.kind"],
                     epsilon=cfg["noise.eps"] if epsilon is None else epsilon,
                     target=cfg["noise.target"],
                     seed=cfg["seed"] if seed is None else seed,
                     modalities=mods)


def int_list(cfg: dict, key: str) -> list:
    try:
        return [int(tok) for tok in str(cfg[key]).split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma list of integers") from None


def float_list(cfg: dict, key: str) -> list:
    try:
        return [float(tok) for tok in str(cfg[key]).split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma list of numbers") from None
