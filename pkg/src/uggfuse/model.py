"""Trainable fusion network assembled from the graph and expert blocks.

The ablation ladder is realized as strictly nested variants:

  a  per-modality aggregation of raw tokens + classifier/triplet heads
  b  a + expert banks with plain softmax top-k gating and load balance
  c  b + sample-level Gaussian uncertainty (sample KL + routing loss)
  d  c + mean-only patch graph (projection + mu-channel convolution)
  e  d + node Gaussians (sigma channel, reparameterized sampling, class KL)

Parameters live in one insertion-ordered name->Tensor dict so the optimizer,
checkpoints and the gradient checker all see the same registry; each variant
registers only the parameters it actually uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolationError
from .gpgr import (
    MEDIAN_TAU,
    MODALITIES,
    aggregate_t,
    gpgcn_t,
    heat_adjacency_t,
    normalize_adjacency_t,
    project_t,
)
from .numerics import RngStream, Tensor, gaussian_kl_t, parameter
from .numerics import engine as eg
from .ugmoe import (
    EXPERT_INPUTS,
    balance_loss_t,
    bank_size,
    bank_weights_t,
    expert_outputs_t,
    gate_scores_t,
    mixture_t,
    routing_loss_t,
    sample_gaussian_t,
    top_k_rows,
)

VARIANTS = ("a", "b", "c", "d", "e")

# softplus(PHI_RAW_INIT) is the initial variance ceiling phi; starting it
# below 1 keeps early reparameterization noise from drowning the identity
# signal while training can still raise it
PHI_RAW_INIT = 0.5413248546129181

# the graph convolutions and experts stack without residuals, so their
# weights start as near-identity maps; the jitter breaks expert symmetry
INIT_JITTER = 0.05


def variant_flags(variant: str) -> dict:
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return {
        "moe": variant in "bcde",
        "sample_uncertainty": variant in "cde",
        "graph": variant in "de",
        "node_gaussians": variant == "e",
    }


@dataclass
class ModelConfig:
    """Shape and switch settings of the network."""

    dim: int
    n_local: int
    num_ids: int
    variant: str = "e"
    layers: int = 2
    c: int = 4
    k: int = 1
    expert_hidden: int = 0  # 0 means equal to dim
    pooling: str = "mean"
    tau: object = MEDIAN_TAU
    knn: int = 0
    expert_input: str = "x-tilde"
    bn_neck: bool = False
    aux_heads: bool = False

    def __post_init__(self):
        variant_flags(self.variant)
        bank_size(self.c, self.k)
        if self.pooling not in ("mean", "max"):
            raise ConfigError("pooling must be mean or max")
        if self.expert_input not in EXPERT_INPUTS:
            raise ConfigError(f"expert_input must be one of {EXPERT_INPUTS}")
        if self.dim < 1 or self.n_local < 1 or self.num_ids < 2:
            raise ConfigError("need dim >= 1, n_local >= 1, num_ids >= 2")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")

    @property
    def hidden(self) -> int:
        return self.expert_hidden or self.dim

    @property
    def fused_dim(self) -> int:
        return 3 * self.dim


@dataclass
class ForwardOutput:
    """Per-batch tensors the objective consumes, plus gate diagnostics."""

    embedding: Tensor  # (B, 3D) retrieval/eval feature
    pre_neck: Tensor  # (B, 3D) triplet feature (equals embedding without bn)
    logits: Tensor  # (B, num_ids)
    aux_logits: dict  # modality -> Tensor, only when aux heads are on
    kl_cs: dict  # modality -> Tensor or 0.0 (class-token KL + sample KL)
    routing: dict  # modality -> Tensor or 0.0
    balance: dict  # modality -> Tensor or 0.0
    gate_info: dict  # modality -> (selected (B,k), weights (B,E), mean_var (B,))


class Model:
    """Parameter registry plus the variant-aware forward pass."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        self.flags = variant_flags(cfg.variant)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._build(rng)

    # -- registry ----------------------------------------------------------

    def _add(self, name: str, arr) -> Tensor:
        t = parameter(np.asarray(arr, dtype=np.float64), name=name)
        self.params[name] = t
        return t

    def _build(self, rng: RngStream):
        cfg = self.cfg
        d = cfg.dim

        def w(shape):
            return rng.standard_normal(shape) / np.sqrt(shape[0])

        def near_eye(shape):
            return np.eye(*shape) + INIT_JITTER * w(shape)

        if self.flags["graph"]:
            self._add("gpgr.fc_mu.w", near_eye((d, d)))
            self._add("gpgr.fc_mu.b", np.zeros(d))
            if self.flags["node_gaussians"]:
                self._add("gpgr.fc_sigma.w", w((d, d)))
                self._add("gpgr.fc_sigma.b", np.zeros(d))
            for m in MODALITIES:
                for l in range(cfg.layers):
                    self._add(f"gpgr.conv_mu.{m}.{l}", near_eye((d, d)))
            if self.flags["node_gaussians"]:
                for m in MODALITIES:
                    for l in range(cfg.layers):
                        self._add(f"gpgr.conv_sigma.{m}.{l}", near_eye((d, d)))
                self._add("gpgr.phi_raw", np.array(PHI_RAW_INIT))
        for m in MODALITIES:
            self._add(f"gpgr.fuse.{m}", w((2 * d, d)))
        if self.flags["moe"]:
            h = cfg.hidden
            if self.flags["sample_uncertainty"]:
                for m in MODALITIES:
                    self._add(f"moe.samp_mu.{m}.w", w((d, d)))
                    self._add(f"moe.samp_mu.{m}.b", np.zeros(d))
                    self._add(f"moe.samp_sigma.{m}.w", w((d, d)))
                    self._add(f"moe.samp_sigma.{m}.b", np.zeros(d))
            for m in MODALITIES:
                self._add(f"moe.gate.{m}", w((d, cfg.c)))
            for m in MODALITIES:
                for i in range(cfg.c):
                    self._add(f"moe.expert.{m}.{i}.w1", near_eye((d, h)))
                    self._add(f"moe.expert.{m}.{i}.b1", np.zeros(h))
                    self._add(f"moe.expert.{m}.{i}.w2", near_eye((h, d)))
                    self._add(f"moe.expert.{m}.{i}.b2", np.zeros(d))
        if cfg.bn_neck:
            self._add("neck.gamma", np.ones(cfg.fused_dim))
            self._add("neck.beta", np.zeros(cfg.fused_dim))
            self.buffers["neck.running_mean"] = np.zeros(cfg.fused_dim)
            self.buffers["neck.running_var"] = np.ones(cfg.fused_dim)
        if cfg.aux_heads:
            for m in MODALITIES:
                self._add(f"head.aux.{m}.w", w((d, cfg.num_ids)))
                self._add(f"head.aux.{m}.b", np.zeros(cfg.num_ids))
        self._add("head.w", w((cfg.fused_dim, cfg.num_ids)))
        self._add("head.b", np.zeros(cfg.num_ids))

    def load_arrays(self, arrays: dict):
        """Overwrite parameter values from a name->ndarray dict, names must match."""
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params) - set(self.buffers))
        if missing or extra:
            raise ContractViolationError(
                f"parameter name mismatch: missing={missing}, extra={extra}")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractViolationError(
                    f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()
        for name in self.buffers:
            if name in arrays:
                self.buffers[name] = np.asarray(arrays[name], dtype=np.float64).copy()

    def export_arrays(self) -> dict:
        out = {name: t.data.copy() for name, t in self.params.items()}
        out.update({name: b.copy() for name, b in self.buffers.items()})
        return out

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    # -- forward -----------------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        expect = (len(MODALITIES), self.cfg.n_local + 1, self.cfg.dim)
        if tokens.ndim != 4 or tokens.shape[1:] != expect:
            raise ContractViolationError(
                f"tokens must have shape (B, {expect[0]}, {expect[1]}, {expect[2]}),"
                f" got {tokens.shape}")
        if not np.isfinite(tokens).all():
            raise ContractViolationError("tokens must be finite")
        return tokens

    def forward(self, tokens: np.ndarray, mode: str = "train",
                reparam: RngStream | None = None,
                eps_override: dict | None = None) -> ForwardOutput:
        """Run the variant's pipeline on a (B, M, N, D) token batch.

        Train mode draws one reparameterization noise block per modality from
        `reparam` (fixed modality order) unless `eps_override` pins them.
        """
        if mode not in ("train", "eval"):
            raise ContractViolationError("mode must be train or eval")
        tokens = self._check_tokens(tokens)
        cfg, flags, p = self.cfg, self.flags, self.params
        b = tokens.shape[0]

        x_tilde: dict[str, Tensor] = {}
        kl_c: dict[str, object] = {m: 0.0 for m in MODALITIES}
        phi = eg.softplus(p["gpgr.phi_raw"]) if "gpgr.phi_raw" in p else None
        for mi, m in enumerate(MODALITIES):
            tok = Tensor(tokens[:, mi])
            if flags["graph"]:
                if flags["node_gaussians"]:
                    mu0, sigma0 = project_t(
                        tok, p["gpgr.fc_mu.w"], p["gpgr.fc_mu.b"],
                        p["gpgr.fc_sigma.w"], p["gpgr.fc_sigma.b"], phi)
                    kl_c[m] = gaussian_kl_t(mu0[:, 0, :], sigma0[:, 0, :])
                else:
                    mu0 = tok @ p["gpgr.fc_mu.w"] + p["gpgr.fc_mu.b"]
                ahat = normalize_adjacency_t(heat_adjacency_t(mu0, cfg.tau, cfg.knn))
                conv_mu = [p[f"gpgr.conv_mu.{m}.{l}"] for l in range(cfg.layers)]
                if flags["node_gaussians"]:
                    conv_sigma = [p[f"gpgr.conv_sigma.{m}.{l}"] for l in range(cfg.layers)]
                    h_mu, h_sigma = gpgcn_t(mu0, sigma0, ahat, conv_mu, conv_sigma, phi)
                    if mode == "train":
                        if eps_override is not None:
                            eps = np.asarray(eps_override[m], dtype=np.float64)
                        elif reparam is not None:
                            eps = reparam.standard_normal(h_mu.shape)
                        else:
                            raise ContractViolationError(
                                "train mode needs a reparam stream or eps_override")
                        nodes = h_mu + Tensor(eps) * h_sigma
                    else:
                        nodes = h_mu
                else:
                    h_mu = mu0
                    for l in range(cfg.layers):
                        h_mu = eg.relu(ahat @ h_mu @ conv_mu[l])
                    nodes = h_mu
            else:
                nodes = tok
            x_tilde[m] = aggregate_t(nodes, p[f"gpgr.fuse.{m}"], cfg.pooling)

        kl_cs: dict[str, object] = {m: 0.0 for m in MODALITIES}
        routing: dict[str, object] = {m: 0.0 for m in MODALITIES}
        balance: dict[str, object] = {m: 0.0 for m in MODALITIES}
        gate_info: dict[str, tuple] = {}

        if flags["moe"]:
            mu_t: dict[str, Tensor] = {}
            sig_t: dict[str, Tensor] = {}
            var_col: dict[str, Tensor] = {}
            if flags["sample_uncertainty"]:
                for m in MODALITIES:
                    mu_m, sig_m = sample_gaussian_t(
                        x_tilde[m], p[f"moe.samp_mu.{m}.w"], p[f"moe.samp_mu.{m}.b"],
                        p[f"moe.samp_sigma.{m}.w"], p[f"moe.samp_sigma.{m}.b"])
                    mu_t[m], sig_t[m] = mu_m, sig_m
                    kl_cs[m] = gaussian_kl_t(mu_m, sig_m)
                    var_col[m] = (sig_m * sig_m).mean(axis=1, keepdims=True)
            scores = {m: gate_scores_t(x_tilde[m], p[f"moe.gate.{m}"]) for m in MODALITIES}
            selected = {m: top_k_rows(scores[m].data, cfg.k) for m in MODALITIES}
            fused_parts = []
            for target in MODALITIES:
                weights, sources = bank_weights_t(scores, selected, target)
                inp = mu_t[target] if (cfg.expert_input == "mu-tilde"
                                       and flags["sample_uncertainty"]) else x_tilde[target]
                own = expert_outputs_t(
                    inp, [{key: p[f"moe.expert.{target}.{i}.{key}"]
                           for key in ("w1", "b1", "w2", "b2")} for i in range(cfg.c)])
                parts = [own]
                if cfg.k > 0:
                    for m in MODALITIES:
                        if m == target:
                            continue
                        outs = expert_outputs_t(
                            inp, [{key: p[f"moe.expert.{m}.{i}.{key}"]
                                   for key in ("w1", "b1", "w2", "b2")} for i in range(cfg.c)])
                        parts.append(
                            eg.take_along_axis(outs, selected[m].T[:, :, None], axis=0))
                fused_parts.append(mixture_t(weights, eg.concat(parts, axis=0)))
                if flags["sample_uncertainty"]:
                    entry_var = eg.concat([var_col[s] for s in sources], axis=1)
                    routing[target] = routing_loss_t(weights, entry_var)
                    mean_var = entry_var.data.mean(axis=1)
                else:
                    mean_var = np.zeros(b)
                balance[target] = balance_loss_t(weights)
                gate_info[target] = (selected[target], weights.data.copy(), mean_var)
            fused = eg.concat(fused_parts, axis=1)
        else:
            fused = eg.concat([x_tilde[m] for m in MODALITIES], axis=1)

        if flags["node_gaussians"]:
            for m in MODALITIES:
                kl_cs[m] = kl_c[m] + kl_cs[m]

        embedding = fused
        if cfg.bn_neck:
            embedding = self._neck(fused, mode)
        logits = embedding @ p["head.w"] + p["head.b"]
        aux_logits = {}
        if cfg.aux_heads:
            for m in MODALITIES:
                aux_logits[m] = x_tilde[m] @ p[f"head.aux.{m}.w"] + p[f"head.aux.{m}.b"]
        return ForwardOutput(embedding=embedding, pre_neck=fused, logits=logits,
                             aux_logits=aux_logits, kl_cs=kl_cs, routing=routing,
                             balance=balance, gate_info=gate_info)

    def _neck(self, fused: Tensor, mode: str) -> Tensor:
        gamma, beta = self.params["neck.gamma"], self.params["neck.beta"]
        if mode == "train":
            mean = fused.mean(axis=0, keepdims=True)
            var = ((fused - mean) * (fused - mean)).mean(axis=0, keepdims=True)
            normed = (fused - mean) / eg.sqrt(var + 1e-5)
            mom = 0.1
            self.buffers["neck.running_mean"] = (
                (1 - mom) * self.buffers["neck.running_mean"] + mom * mean.data[0])
            self.buffers["neck.running_var"] = (
                (1 - mom) * self.buffers["neck.running_var"] + mom * var.data[0])
        else:
            mean = Tensor(self.buffers["neck.running_mean"][None])
            var = Tensor(self.buffers["neck.running_var"][None])
            normed = (fused - mean) / eg.sqrt(var + 1e-5)
        return normed * gamma + beta

    def embed(self, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode embeddings for a (S, M, N, D) token array, (S, 3D)."""
        tokens = self._check_tokens(tokens)
        outs = []
        with eg.no_grad():
            for lo in range(0, tokens.shape[0], batch_size):
                out = self.forward(tokens[lo:lo + batch_size], mode="eval")
                outs.append(out.embedding.data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.cfg.fused_dim))
