"""Training objective and optimizer loop for the fusion network.

Combines identity cross-entropy, batch-hard triplet, and the per-modality
uncertainty regularizers into one weighted scalar, then drives Adam over the
model's parameter registry with deterministic P x K identity sampling.
Forward/backward over a batch is one vectorized pass, which also fixes the
gradient reduction order; exactly one writer ever touches the parameters.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ContractViolationError, NonFiniteLossError
from .gpgr import MEDIAN_TAU, MODALITIES
from .model import Model, ModelConfig, VARIANTS, variant_flags
from .numerics import RngStream, Tensor, grad_check
from .numerics import engine as eg

HISTORY_COLUMNS = ("step", "ce", "tri", "kl_cs", "lr_loss", "le_loss", "total")

LR_DECAYS = ("none", "cosine")


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    """Everything fit() needs; model-shape fields pass through to ModelConfig."""

    seed: int = 0
    variant: str = "e"
    dim: int = 128
    n_local: int = 128
    layers: int = 2
    c: int = 4
    k: int = 1
    expert_hidden: int = 0
    pooling: str = "mean"
    tau: object = MEDIAN_TAU
    knn: int = 0
    expert_input: str = "x-tilde"
    bn_neck: bool = False
    aux_heads: bool = False
    lambda1: float = 0.1
    lambda2: float = 1e-4
    lambda3: float = 1e-4
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 40
    p_ids: int = 4
    k_inst: int = 4
    margin: float = 0.3
    warmup_steps: int = 0
    lr_decay: str = "none"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("lambda weights must be >= 0")
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigError("need lr > 0 and epochs >= 1")
        if self.p_ids < 2 or self.k_inst < 2:
            raise ConfigError("P x K sampling needs P >= 2 and K >= 2")
        if self.lr_decay not in LR_DECAYS:
            raise ConfigError(f"lr_decay must be one of {LR_DECAYS}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")

    @property
    def batch(self) -> int:
        return self.p_ids * self.k_inst

    def model_config(self, num_ids: int) -> ModelConfig:
        return ModelConfig(
            dim=self.dim, n_local=self.n_local, num_ids=num_ids,
            variant=self.variant, layers=self.layers, c=self.c, k=self.k,
            expert_hidden=self.expert_hidden, pooling=self.pooling,
            tau=self.tau, knn=self.knn, expert_input=self.expert_input,
            bn_neck=self.bn_neck, aux_heads=self.aux_heads)

    def snapshot(self) -> dict:
        """String-valued field dump used for checkpoint embedding."""
        out = {}
        for f in fields(self):
            out[f.name] = repr(getattr(self, f.name))
        return out

    @classmethod
    def from_snapshot(cls, snap: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {key: ast.literal_eval(value)
                  for key, value in snap.items() if key in names}
        return cls(**kwargs)


# -- loss bookkeeping ----------------------------------------------------------


@dataclass
class LossBreakdown:
    """Scalar values of every loss term at one step, plus the weighted total."""

    ce: float
    tri: float
    kl_cs: dict
    routing: dict
    balance: dict
    lambda1: float
    lambda2: float
    lambda3: float
    total: float

    _ORDER = ("ce", "tri", "kl_cs", "routing", "balance", "total")

    @classmethod
    def compute(cls, ce, tri, kl_cs, routing, balance,
                lambda1, lambda2, lambda3) -> "LossBreakdown":
        reg = sum(lambda1 * kl_cs[m] + lambda2 * routing[m] + lambda3 * balance[m]
                  for m in MODALITIES)
        return cls(ce=float(ce), tri=float(tri),
                   kl_cs={m: float(kl_cs[m]) for m in MODALITIES},
                   routing={m: float(routing[m]) for m in MODALITIES},
                   balance={m: float(balance[m]) for m in MODALITIES},
                   lambda1=lambda1, lambda2=lambda2, lambda3=lambda3,
                   total=float(ce) + float(tri) + float(reg))

    def recomputed_total(self) -> float:
        reg = sum(self.lambda1 * self.kl_cs[m] + self.lambda2 * self.routing[m]
                  + self.lambda3 * self.balance[m] for m in MODALITIES)
        return self.ce + self.tri + reg

    def validate(self):
        if abs(self.total - self.recomputed_total()) > 1e-9:
            raise ContractViolationError("loss decomposition identity violated")

    def first_non_finite(self) -> str | None:
        for name in self._ORDER:
            value = getattr(self, name)
            if isinstance(value, dict):
                for m in MODALITIES:
                    if not math.isfinite(value[m]):
                        return f"{name}[{m}]"
            elif not math.isfinite(value):
                return name
        return None

    def row(self, step: int) -> np.ndarray:
        return np.array([float(step), self.ce, self.tri,
                         sum(self.kl_cs.values()), sum(self.routing.values()),
                         sum(self.balance.values()), self.total])


def total_loss(ce: float, tri: float, kl_cs: dict, routing: dict, balance: dict,
               cfg: TrainConfig) -> LossBreakdown:
    """Weighted total loss with the variant's disabled terms zeroed."""
    flags = variant_flags(cfg.variant)
    zero = {m: 0.0 for m in MODALITIES}
    if not (flags["sample_uncertainty"] or flags["node_gaussians"]):
        kl_cs = zero
    if not flags["sample_uncertainty"]:
        routing = zero
    if not flags["moe"]:
        balance = zero
    parts = [ce, tri] + [kl_cs[m] for m in MODALITIES] + \
        [routing[m] for m in MODALITIES] + [balance[m] for m in MODALITIES]
    if not all(math.isfinite(float(v)) for v in parts):
        raise ContractViolationError("loss parts must be finite")
    out = LossBreakdown.compute(ce, tri, kl_cs, routing, balance,
                                cfg.lambda1, cfg.lambda2, cfg.lambda3)
    out.validate()
    return out


# -- task losses ---------------------------------------------------------------


def _check_labels(labels, batch: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,) or not np.issubdtype(labels.dtype, np.integer):
        raise ContractViolationError(f"labels must be ({batch},) integers")
    if num_classes is not None and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractViolationError("label out of range for the classifier head")
    return labels.astype(np.int64)


def cross_entropy_t(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = logits - eg.logsumexp(logits, axis=1, keepdims=True)
    picked = eg.take_along_axis(logp, labels[:, None], axis=1)
    return -picked.mean()


def cross_entropy_id(logits: np.ndarray, labels) -> float:
    """Mean negative log-softmax probability of the true identity."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or not np.isfinite(logits).all():
        raise ContractViolationError("logits must be a finite (B, num_ids) matrix")
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    shift = logits - logits.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def _triplet_masks(labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    if not pos.any(axis=1).all():
        raise ContractViolationError("every identity in the batch needs >= 2 instances")
    if not neg.any(axis=1).all():
        raise ContractViolationError("batch needs >= 2 identities")
    return pos, neg


def batch_hard_triplet_t(features: Tensor, labels, margin: float) -> Tensor:
    labels = _check_labels(labels, features.shape[0])
    pos, neg = _triplet_masks(labels)
    sq = (features * features).sum(axis=1, keepdims=True)
    gram = features @ eg.swapaxes(features, 0, 1)
    d = eg.sqrt(eg.clamp_min(sq + eg.swapaxes(sq, 0, 1) - 2.0 * gram, 1e-12))
    d_pos = (d + Tensor(np.where(pos, 0.0, -1e9))).max(axis=1)
    d_neg = (d + Tensor(np.where(neg, 0.0, 1e9))).min(axis=1)
    return eg.relu(d_pos - d_neg + margin).mean()


def batch_hard_triplet(features: np.ndarray, labels, margin: float = 0.3) -> float:
    """Mean hinge over anchors, hardest positive minus hardest negative."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or not np.isfinite(features).all():
        raise ContractViolationError("features must be a finite (B, F) matrix")
    labels = _check_labels(labels, features.shape[0])
    pos, neg = _triplet_masks(labels)
    sq = (features ** 2).sum(axis=1, keepdims=True)
    d = np.sqrt(np.maximum(sq + sq.T - 2.0 * features @ features.T, 0.0))
    d_pos = np.where(pos, d, -np.inf).max(axis=1)
    d_neg = np.where(neg, d, np.inf).min(axis=1)
    return float(np.maximum(d_pos - d_neg + margin, 0.0).mean())


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adam over a name->Tensor registry; state is exported for checkpoints."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.data = p.data - lr * (self.m[name] / b1c) / (
                np.sqrt(self.v[name] / b2c) + self.eps)

    def load(self, m: dict, v: dict, t: int):
        if set(m) != set(self.m) or set(v) != set(self.v):
            raise ContractViolationError("optimizer state names do not match")
        self.m = {k: np.asarray(a, dtype=np.float64).copy() for k, a in m.items()}
        self.v = {k: np.asarray(a, dtype=np.float64).copy() for k, a in v.items()}
        self.t = int(t)


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    lr = cfg.lr
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_decay == "cosine":
        span = max(1, total_steps - cfg.warmup_steps)
        prog = min(1.0, (step - cfg.warmup_steps) / span)
        return lr * 0.5 * (1.0 + math.cos(math.pi * prog))
    return lr


# -- checkpoint payload --------------------------------------------------------


@dataclass
class Checkpoint:
    """Full training state: parameters, optimizer moments, rng, history."""

    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int
    history: np.ndarray  # (steps, len(HISTORY_COLUMNS)) float64
    rng: dict  # stream name -> (seed, stream_id, counter)
    config: dict  # TrainConfig snapshot plus num_ids

    def num_ids(self) -> int:
        return int(self.config["num_ids"])

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_snapshot(self.config)

    def build_model(self) -> Model:
        cfg = self.train_config().model_config(self.num_ids())
        model = Model(cfg, RngStream.named(0, "init"))
        model.load_arrays(self.params)
        return model


# -- the training loop ---------------------------------------------------------


def _group_by_identity(labels: np.ndarray):
    classes, inv = np.unique(labels, return_inverse=True)
    groups = [np.flatnonzero(inv == c) for c in range(len(classes))]
    return classes, inv.astype(np.int64), groups


def _sample_batch(rng: RngStream, groups: list, p: int, k: int) -> np.ndarray:
    chosen = rng.choice(len(groups), size=p, replace=False)
    picks = [groups[c][rng.choice(len(groups[c]), size=k, replace=False)]
             for c in chosen]
    return np.concatenate(picks)


def _batch_terms(model: Model, tokens: np.ndarray, labels: np.ndarray,
                 cfg: TrainConfig, reparam=None, eps_override=None):
    """One train-mode forward plus the loss assembly, kept as Tensors."""
    out = model.forward(tokens, mode="train", reparam=reparam,
                        eps_override=eps_override)
    ce = cross_entropy_t(out.logits, labels)
    if model.cfg.aux_heads:
        aux = [cross_entropy_t(out.aux_logits[m], labels) for m in MODALITIES]
        ce = ce + (aux[0] + aux[1] + aux[2]) * (1.0 / 3.0)
    tri = batch_hard_triplet_t(out.pre_neck, labels, cfg.margin)
    total = ce + tri
    for m in MODALITIES:
        for lam, term in ((cfg.lambda1, out.kl_cs[m]), (cfg.lambda2, out.routing[m]),
                          (cfg.lambda3, out.balance[m])):
            if isinstance(term, Tensor):
                total = total + lam * term
    return out, ce, tri, total


def fit(config: TrainConfig, dataset, resume: Checkpoint | None = None,
        on_step=None) -> Checkpoint:
    """Train for config.epochs (continuing from `resume` if given).

    `dataset` provides .tokens (S, M, N+1, D) and integer .labels (S,).
    History gains one row per step; on_step(step, breakdown, forward_out) is
    called after each optimizer update when provided.
    """
    tokens = np.asarray(dataset.tokens, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    if tokens.ndim != 4 or tokens.shape[0] != labels.shape[0]:
        raise ContractViolationError("dataset tokens/labels disagree on sample count")
    classes, inv, groups = _group_by_identity(labels)
    num_ids = len(classes)
    if num_ids < config.p_ids:
        raise ContractViolationError(
            f"need >= {config.p_ids} identities for P x K sampling, got {num_ids}")
    min_count = min(len(g) for g in groups)
    if min_count < config.k_inst:
        raise ContractViolationError(
            f"every identity needs >= {config.k_inst} instances, min is {min_count}")

    model = Model(config.model_config(num_ids), RngStream.named(config.seed, "init"))
    sampler = RngStream.named(config.seed, "sampler")
    reparam = RngStream.named(config.seed, "reparam")
    adam = Adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps)

    snapshot = config.snapshot()
    snapshot["num_ids"] = str(num_ids)
    history: list[np.ndarray] = []
    start_epoch = 0
    if resume is not None:
        # continuing for more epochs is the point; everything else must match.
        # extra bookkeeping keys in the stored config are tolerated.
        mismatched = [k for k in snapshot if k != "epochs"
                      and resume.config.get(k) != snapshot[k]]
        if mismatched:
            raise ConfigError(
                "resume checkpoint was trained with a different config: "
                + ", ".join(sorted(mismatched)))
        model.load_arrays(resume.params)
        adam.load(resume.adam_m, resume.adam_v, resume.adam_t)
        sampler = RngStream.from_state(resume.rng["sampler"])
        reparam = RngStream.from_state(resume.rng["reparam"])
        history = [row for row in np.asarray(resume.history, dtype=np.float64)]
        start_epoch = resume.epoch

    steps_per_epoch = max(1, math.ceil(tokens.shape[0] / config.batch))
    total_steps = config.epochs * steps_per_epoch
    step = start_epoch * steps_per_epoch
    for _epoch in range(start_epoch, config.epochs):
        for _ in range(steps_per_epoch):
            idx = _sample_batch(sampler, groups, config.p_ids, config.k_inst)
            model.zero_grad()
            out, ce, tri, total = _batch_terms(
                model, tokens[idx], inv[idx], config, reparam=reparam)
            raw = LossBreakdown.compute(
                ce.item(), tri.item(),
                {m: _val(out.kl_cs[m]) for m in MODALITIES},
                {m: _val(out.routing[m]) for m in MODALITIES},
                {m: _val(out.balance[m]) for m in MODALITIES},
                config.lambda1, config.lambda2, config.lambda3)
            bad = raw.first_non_finite()
            if bad is not None:
                raise NonFiniteLossError(
                    f"loss term {bad} became non-finite at step {step}")
            breakdown = total_loss(raw.ce, raw.tri, raw.kl_cs, raw.routing,
                                   raw.balance, config)
            total.backward()
            adam.step(_lr_at(config, step, total_steps))
            history.append(breakdown.row(step))
            if on_step is not None:
                on_step(step, breakdown, out)
            step += 1

    return Checkpoint(
        params=model.export_arrays(),
        adam_m={k: a.copy() for k, a in adam.m.items()},
        adam_v={k: a.copy() for k, a in adam.v.items()},
        adam_t=adam.t, epoch=config.epochs,
        history=np.vstack(history) if history else
        np.zeros((0, len(HISTORY_COLUMNS))),
        rng={"sampler": sampler.state(), "reparam": reparam.state()},
        config=snapshot)


def _val(term) -> float:
    return term.item() if isinstance(term, Tensor) else float(term)


# -- whole-model gradient certification -----------------------------------------


def variant_grad_reports(variant: str, *, seed: int = 0, dim: int = 6,
                         n_local: int = 3, num_ids: int = 4, c: int = 3,
                         k: int = 1, layers: int = 2, p_ids: int = 4,
                         k_inst: int = 2, tolerance: float = 1e-4):
    """grad_check the full training objective for one ablation variant.

    Builds a micro model, pins the reparameterization noise, and probes every
    registered parameter. Returns the per-parameter report list.
    """
    cfg = TrainConfig(seed=seed, variant=variant, dim=dim, n_local=n_local,
                      layers=layers, c=c, k=k, p_ids=p_ids, k_inst=k_inst,
                      epochs=1)
    rng = RngStream.named(seed, "gradcheck-data")
    batch = cfg.batch
    tokens = rng.standard_normal((batch, len(MODALITIES), n_local + 1, dim))
    labels = np.repeat(np.arange(p_ids), k_inst)[:batch] % num_ids
    model = Model(cfg.model_config(num_ids), RngStream.named(seed, "init"))
    eps = None
    if model.flags["node_gaussians"]:
        noise = RngStream.named(seed, "gradcheck-eps")
        eps = {m: noise.standard_normal((batch, n_local + 1, dim))
               for m in MODALITIES}

    def loss_fn():
        _, _, _, total = _batch_terms(model, tokens, labels, cfg, eps_override=eps)
        return total

    return grad_check(loss_fn, model.params, tolerance=tolerance)
