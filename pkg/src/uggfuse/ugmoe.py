"""Uncertainty-guided mixture of experts.

Each modality owns a sample-level Gaussian head (mu-tilde, sigma-tilde), a
softmax gate over its C experts, and donates its top-k experts to the other
modalities, giving every modality a bank of E = C + k(M-1) experts. Bank
weights are the renormalized own+donated gate scores; the routing loss
penalizes weight placed on entries whose source modality is uncertain, and a
load-balance loss discourages expert collapse. Fused output is the fixed-order
concatenation of the three per-modality mixtures.

As in gpgr, single-instance numpy operations form the public surface and
``_t``-suffixed batched engine functions serve the trainable model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolationError
from .gpgr import MODALITIES, ModalFeature, check_modality
from .numerics import RngStream, Tensor, gaussian_kl
from .numerics import engine as eg

SIGMA_TILDE_FLOOR = 1e-6
EXPERT_INPUTS = ("x-tilde", "mu-tilde")


def bank_size(c: int, k: int, m: int = len(MODALITIES)) -> int:
    """E = C + k(M-1): own experts plus k donated from each other modality."""
    if c < 1:
        raise ConfigError("C must be >= 1")
    if not 0 <= k <= c:
        raise ConfigError("k must satisfy 0 <= k <= C")
    if m < 1:
        raise ConfigError("M must be >= 1")
    return c + k * (m - 1)


@dataclass
class SampleGaussian:
    """Sample-level Gaussian of one modality's aggregated feature."""

    modality: str
    mu_tilde: np.ndarray  # (D,)
    sigma_tilde: np.ndarray  # (D,), strictly positive

    def __post_init__(self):
        check_modality(self.modality)
        self.mu_tilde = np.asarray(self.mu_tilde, dtype=np.float64)
        self.sigma_tilde = np.asarray(self.sigma_tilde, dtype=np.float64)
        if self.mu_tilde.shape != self.sigma_tilde.shape:
            raise ContractViolationError("mu_tilde/sigma_tilde shape mismatch")
        if not (np.isfinite(self.mu_tilde).all() and np.isfinite(self.sigma_tilde).all()):
            raise ContractViolationError("sample Gaussian must be finite")
        if (self.sigma_tilde <= 0).any():
            raise ContractViolationError("sigma_tilde must be strictly positive")


@dataclass
class GateDecision:
    """Own-modality softmax scores and the indices donated to the others."""

    modality: str
    own_scores: np.ndarray  # (C,) probability vector
    selected: np.ndarray  # (k,) indices of the k largest scores, ties lowest

    def __post_init__(self):
        check_modality(self.modality)
        self.own_scores = np.asarray(self.own_scores, dtype=np.float64)
        self.selected = np.asarray(self.selected, dtype=np.int64)
        if abs(self.own_scores.sum() - 1.0) > 1e-9 or (self.own_scores < 0).any():
            raise ContractViolationError("own_scores must be a probability vector")


@dataclass
class BankEntry:
    source: str  # modality whose expert (and uncertainty) this entry carries
    index: int  # expert index within the source modality
    raw_score: float


@dataclass
class ExpertBank:
    """The E experts visible to one target modality, with mixture weights."""

    target: str
    entries: list
    weights: np.ndarray  # (E,), renormalized raw scores

    def __post_init__(self):
        check_modality(self.target)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.entries) != self.weights.size:
            raise ContractViolationError("one weight per entry required")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractViolationError("weights must be a probability vector")

    @property
    def size(self) -> int:
        return len(self.entries)


@dataclass
class FusedFeature:
    """Per-modality mixtures and their fixed-order concatenation."""

    by_modality: dict
    concat: np.ndarray  # (3D,) ordered R, N, T

    @classmethod
    def from_parts(cls, by_modality: dict) -> "FusedFeature":
        missing = [m for m in MODALITIES if m not in by_modality]
        if missing:
            raise ContractViolationError(f"missing modalities in fuse: {missing}")
        parts = [np.asarray(by_modality[m], dtype=np.float64) for m in MODALITIES]
        return cls(by_modality=dict(by_modality), concat=np.concatenate(parts))


@dataclass
class UgmoeParams:
    """Learnable state: per-modality Gaussian heads, gates, and experts."""

    dim: int
    c: int  # experts per modality
    k: int  # donated fan-out
    hidden: int
    samp_mu_w: dict
    samp_mu_b: dict
    samp_sigma_w: dict
    samp_sigma_b: dict
    gate_w: dict  # modality -> (D, C), no bias
    experts: dict  # modality -> list of C dicts with w1 (D,H), b1, w2 (H,D), b2
    expert_input: str = "x-tilde"

    def __post_init__(self):
        bank_size(self.c, self.k)  # validates C >= 1 and 0 <= k <= C
        if self.expert_input not in EXPERT_INPUTS:
            raise ConfigError(f"expert_input must be one of {EXPERT_INPUTS}")

    @property
    def e(self) -> int:
        return bank_size(self.c, self.k)

    @classmethod
    def init(cls, rng: RngStream, dim: int, c: int = 4, k: int = 1,
             hidden: int = 0, expert_input: str = "x-tilde") -> "UgmoeParams":
        hidden = hidden or dim

        def w(shape):
            return rng.standard_normal(shape) / np.sqrt(shape[0])

        return cls(
            dim=dim, c=c, k=k, hidden=hidden,
            samp_mu_w={m: w((dim, dim)) for m in MODALITIES},
            samp_mu_b={m: np.zeros(dim) for m in MODALITIES},
            samp_sigma_w={m: w((dim, dim)) for m in MODALITIES},
            samp_sigma_b={m: np.zeros(dim) for m in MODALITIES},
            gate_w={m: w((dim, c)) for m in MODALITIES},
            experts={
                m: [{"w1": w((dim, hidden)), "b1": np.zeros(hidden),
                     "w2": w((hidden, dim)), "b2": np.zeros(dim)} for _ in range(c)]
                for m in MODALITIES
            },
            expert_input=expert_input,
        )


# -- single-instance numpy operations -----------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def sample_gaussian(feat: ModalFeature, params: UgmoeParams) -> SampleGaussian:
    """Two affine heads on x-tilde; sigma through softplus with a small floor."""
    m = feat.modality
    x = np.asarray(feat.x_tilde, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ContractViolationError("x_tilde must be finite")
    mu = x @ params.samp_mu_w[m] + params.samp_mu_b[m]
    sigma = _softplus(x @ params.samp_sigma_w[m] + params.samp_sigma_b[m]) + SIGMA_TILDE_FLOOR
    return SampleGaussian(modality=m, mu_tilde=mu, sigma_tilde=sigma)


def sample_z(sg: SampleGaussian, rng: RngStream) -> np.ndarray:
    """Diagnostic draw of the reparameterized sample; not used by the task path."""
    from .numerics import reparameterize

    return reparameterize(sg.mu_tilde, sg.sigma_tilde, rng)


def sample_kl(sg: SampleGaussian) -> float:
    """Mean-reduced KL of the sample Gaussian against N(0, I)."""
    return gaussian_kl(sg.mu_tilde, sg.sigma_tilde)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by lowest index."""
    return np.argsort(-np.asarray(scores), kind="stable")[:k].astype(np.int64)


def gate(feat: ModalFeature, params: UgmoeParams) -> GateDecision:
    """Softmax over the modality's C expert logits plus top-k selection."""
    m = feat.modality
    scores = _softmax(np.asarray(feat.x_tilde) @ params.gate_w[m])
    return GateDecision(modality=m, own_scores=scores,
                        selected=top_k_indices(scores, params.k))


def assemble_bank(decisions: dict, params: UgmoeParams, target: str) -> ExpertBank:
    """Own C entries plus k donated entries per other modality, renormalized."""
    check_modality(target)
    missing = [m for m in MODALITIES if m not in decisions]
    if missing:
        raise ContractViolationError(f"missing gate decisions: {missing}")
    entries = [BankEntry(target, i, float(s))
               for i, s in enumerate(decisions[target].own_scores)]
    for m in MODALITIES:
        if m == target:
            continue
        d = decisions[m]
        for idx in d.selected:
            entries.append(BankEntry(m, int(idx), float(d.own_scores[idx])))
    raw = np.array([e.raw_score for e in entries])
    total = raw.sum()
    if total <= 0:
        raise ContractViolationError("bank scores must have positive mass")
    return ExpertBank(target=target, entries=entries, weights=raw / total)


def _expert_apply(x: np.ndarray, ep: dict) -> np.ndarray:
    return np.maximum(x @ ep["w1"] + ep["b1"], 0.0) @ ep["w2"] + ep["b2"]


def mixture_forward(bank: ExpertBank, feat: ModalFeature, params: UgmoeParams) -> np.ndarray:
    """z-hat = sum_c weights[c] * E_c(x); every expert sees the target's input."""
    x = np.asarray(feat.x_tilde, dtype=np.float64)
    out = np.zeros(params.dim)
    for entry, w in zip(bank.entries, bank.weights):
        out += w * _expert_apply(x, params.experts[entry.source][entry.index])
    return out


def routing_uncertainty_loss(bank: ExpertBank, sgs: dict) -> float:
    """(1/E) sum_c meanD(sigma_tilde^2 of entry c's source) * weights[c]."""
    missing = [m for m in MODALITIES if m not in sgs]
    if missing:
        raise ContractViolationError(f"missing sample Gaussians: {missing}")
    var = {m: float(np.mean(sgs[m].sigma_tilde ** 2)) for m in MODALITIES}
    total = sum(var[e.source] * w for e, w in zip(bank.entries, bank.weights))
    return float(total) / bank.size


def load_balance_loss(banks: list) -> float:
    """(1/E) sum_c f_c * P_c over a batch of one target modality's banks.

    f_c is the fraction of samples whose largest bank weight sits at c (ties
    to the lowest index, excluded from differentiation); P_c is the batch-mean
    weight. Summation order over the batch is fixed for reproducibility.
    """
    if not banks:
        raise ContractViolationError("load balance needs at least one sample")
    e = banks[0].size
    if any(b.size != e for b in banks):
        raise ContractViolationError("inconsistent bank sizes in batch")
    counts = np.zeros(e)
    mean_w = np.zeros(e)
    for b in banks:
        counts[int(np.argmax(b.weights))] += 1.0
        mean_w += b.weights
    f = counts / len(banks)
    p = mean_w / len(banks)
    return float((f * p).sum() / e)


def fuse(z_by_modality: dict) -> FusedFeature:
    """Fixed-order concatenation [z^R, z^N, z^T]."""
    return FusedFeature.from_parts(z_by_modality)


# -- batched engine-tensor functions (training path) --------------------------


def sample_gaussian_t(x: Tensor, w_mu, b_mu, w_sigma, b_sigma):
    """x (B, D) -> (mu_tilde, sigma_tilde), sigma via softplus + floor."""
    mu = x @ w_mu + b_mu
    sigma = eg.softplus(x @ w_sigma + b_sigma) + SIGMA_TILDE_FLOOR
    return mu, sigma


def gate_scores_t(x: Tensor, w_gate) -> Tensor:
    """Softmax gate probabilities, (B, C)."""
    return eg.softmax(x @ w_gate, axis=1)


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices (B, k), ties to the lowest index."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :k].astype(np.int64)


def expert_outputs_t(x: Tensor, experts: list) -> Tensor:
    """Evaluate one modality's C experts on x (B, D) -> (C, B, D)."""
    outs = [eg.relu(x @ ep["w1"] + ep["b1"]) @ ep["w2"] + ep["b2"] for ep in experts]
    return eg.stack(outs, axis=0)


def bank_weights_t(scores: dict, selected: dict, target: str):
    """Renormalized bank weights (B, E) plus per-entry source modalities.

    Entry order: target's C own experts, then each donor modality's k
    selected experts in fixed modality order.
    """
    parts = [scores[target]]
    sources = [target] * scores[target].shape[1]
    for m in MODALITIES:
        if m == target:
            continue
        sel = selected[m]
        if sel.shape[1] > 0:
            parts.append(eg.take_along_axis(scores[m], sel, axis=1))
            sources.extend([m] * sel.shape[1])
    raw = eg.concat(parts, axis=1)
    weights = raw / raw.sum(axis=1, keepdims=True)
    return weights, sources


def mixture_t(weights: Tensor, bank_outs: Tensor) -> Tensor:
    """weights (B, E), bank_outs (E, B, D) -> (B, D)."""
    w = eg.swapaxes(weights, 0, 1)  # (E, B)
    e, b = w.shape
    return (bank_outs * w.reshape(e, b, 1)).sum(axis=0)


def routing_loss_t(weights: Tensor, entry_var: Tensor) -> Tensor:
    """Batch mean of (1/E) sum_c entry_var[:, c] * weights[:, c]."""
    e = weights.shape[1]
    return ((weights * entry_var).sum(axis=1) * (1.0 / e)).mean()


def balance_loss_t(weights: Tensor) -> Tensor:
    """(1/E) sum_c f_c * P_c with the argmax indicator held constant."""
    b, e = weights.shape
    counts = np.zeros(e)
    am = np.argmax(weights.data, axis=1)  # ties to lowest index
    np.add.at(counts, am, 1.0)
    f = Tensor(counts / b)
    p = weights.mean(axis=0)
    return (f * p).sum() * (1.0 / e)
