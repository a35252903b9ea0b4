"""Gaussian patch-graph representation.

Each modality's token grid (class token + n local patches) is lifted to
Gaussian nodes (mu, sigma), connected by a heat-kernel graph over the mean
vectors, smoothed by a dual-channel graph convolution that propagates means
and standard deviations separately, sampled via the reparameterization trick,
and finally aggregated into one modal feature x-tilde.

Two parallel surfaces live here: plain-numpy single-instance operations
(the public API, convenient for inspection and tests) and batched
engine-Tensor functions with a ``_t`` suffix that the trainable model uses.
A cross-check test keeps the two in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolationError, DomainError
from .numerics import RngStream, Tensor, gaussian_kl, reparameterize
from .numerics import engine as eg

MODALITIES = ("R", "N", "T")
SIGMA_FLOOR = 1e-6
MEDIAN_TAU = "median"


def check_modality(tag: str) -> str:
    if tag not in MODALITIES:
        raise ContractViolationError(f"unknown modality {tag!r}, expected one of {MODALITIES}")
    return tag


def _check_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ContractViolationError(f"{name} must be finite")
    return x


@dataclass
class PatchFeatureSet:
    """Tokens of one modality; row 0 is the class token, rows 1..n are local."""

    modality: str
    tokens: np.ndarray  # (n+1, D)

    def __post_init__(self):
        check_modality(self.modality)
        self.tokens = _check_matrix(self.tokens, "tokens")
        if self.tokens.shape[0] < 1:
            raise ContractViolationError("need at least the class token")

    @property
    def n(self) -> int:
        return self.tokens.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class GaussianNodeSet:
    """Per-node Gaussian parameters; sigma lies in (0, phi] after squashing."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = _check_matrix(self.mu, "mu")
        self.sigma = _check_matrix(self.sigma, "sigma")
        if self.mu.shape != self.sigma.shape:
            raise ContractViolationError(
                f"mu/sigma shape mismatch: {self.mu.shape} vs {self.sigma.shape}")
        if (self.sigma <= 0).any():
            raise ContractViolationError("sigma must be strictly positive")


@dataclass
class PatchGraph:
    """Symmetric nonnegative adjacency with unit self-loops, plus row sums."""

    adjacency: np.ndarray
    degree: np.ndarray

    def __post_init__(self):
        a = _check_matrix(self.adjacency, "adjacency")
        if a.shape[0] != a.shape[1]:
            raise ContractViolationError("adjacency must be square")
        if not np.allclose(a, a.T, atol=1e-12):
            raise ContractViolationError("adjacency must be symmetric")
        if not np.allclose(np.diag(a), 1.0, atol=1e-12):
            raise ContractViolationError("adjacency must have unit self-loops")
        if (a < 0).any():
            raise ContractViolationError("adjacency must be nonnegative")
        self.adjacency = a
        self.degree = np.asarray(self.degree, dtype=np.float64)
        if (self.degree <= 0).any():
            raise DomainError("degree must be strictly positive")


@dataclass
class ModalFeature:
    modality: str
    x_tilde: np.ndarray  # (D,)


@dataclass
class GpgrParams:
    """Learnable state of the representation.

    Projections are shared across modalities; graph-convolution weights and
    the fusion matrix are per-modality. phi is stored unconstrained and
    mapped through softplus so the variance ceiling stays positive.
    """

    dim: int
    layers: int
    fc_mu_w: np.ndarray  # (D, D)
    fc_mu_b: np.ndarray  # (D,)
    fc_sigma_w: np.ndarray
    fc_sigma_b: np.ndarray
    conv_mu_w: dict  # modality -> list of (D, D), no bias as in the printed update
    conv_sigma_w: dict
    fuse_w: dict  # modality -> (2D, D)
    phi_raw: float = 0.5413248546129181  # softplus(phi_raw) = 1.0
    tau: object = MEDIAN_TAU  # positive float, or "median" for the per-graph trick
    knn: int = 0  # 0 keeps the dense graph
    pooling: str = "mean"

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"pooling must be mean or max, got {self.pooling!r}")
        if self.tau != MEDIAN_TAU:
            if not isinstance(self.tau, (int, float)) or float(self.tau) <= 0:
                raise ConfigError(f"tau must be positive or 'median', got {self.tau!r}")
            self.tau = float(self.tau)
        if self.knn < 0:
            raise ConfigError("knn must be >= 0")

    @property
    def phi(self) -> float:
        return float(np.logaddexp(0.0, self.phi_raw))

    @classmethod
    def init(cls, rng: RngStream, dim: int, layers: int = 2, tau=MEDIAN_TAU,
             knn: int = 0, pooling: str = "mean") -> "GpgrParams":
        def w(shape):
            return rng.standard_normal(shape) / np.sqrt(shape[0])

        return cls(
            dim=dim, layers=layers,
            fc_mu_w=w((dim, dim)), fc_mu_b=np.zeros(dim),
            fc_sigma_w=w((dim, dim)), fc_sigma_b=np.zeros(dim),
            conv_mu_w={m: [w((dim, dim)) for _ in range(layers)] for m in MODALITIES},
            conv_sigma_w={m: [w((dim, dim)) for _ in range(layers)] for m in MODALITIES},
            fuse_w={m: w((2 * dim, dim)) for m in MODALITIES},
            tau=tau, knn=knn, pooling=pooling,
        )


# -- batched engine-tensor forward (training path) ---------------------------


def project_t(tokens: Tensor, fc_mu_w, fc_mu_b, fc_sigma_w, fc_sigma_b, phi):
    """Gaussian projections. tokens (B, N, D) -> mu, sigma of same shape."""
    mu = tokens @ fc_mu_w + fc_mu_b
    sigma = eg.clamp_min(phi * eg.sigmoid(tokens @ fc_sigma_w + fc_sigma_b), SIGMA_FLOOR)
    return mu, sigma


def heat_adjacency_t(mu: Tensor, tau, knn: int = 0) -> Tensor:
    """Dense heat-kernel adjacency over mean vectors, unit self-loops.

    mu (B, N, D) -> (B, N, N). tau is a positive float or "median", in which
    case each graph uses the median of its off-diagonal squared distances
    (differentiable; off-diagonal count is always even).
    """
    b, n, _ = mu.shape
    sq = (mu * mu).sum(axis=2, keepdims=True)  # (B, N, 1)
    pd = sq + eg.swapaxes(sq, 1, 2) - 2.0 * (mu @ eg.swapaxes(mu, 1, 2))
    pd = eg.clamp_min(pd, 0.0)
    eye = np.eye(n)[None]
    if n == 1:
        return Tensor(np.ones((b, 1, 1)))
    if tau == MEDIAN_TAU:
        rows, cols = np.where(~np.eye(n, dtype=bool))
        off = pd[(slice(None), rows, cols)]  # (B, N(N-1))
        med = eg.clamp_min(eg.median_lastaxis(off), 1e-12)
        tau_t = med.reshape(b, 1, 1)
    else:
        if float(tau) <= 0:
            raise ConfigError("tau must be positive")
        tau_t = Tensor(np.full((1, 1, 1), float(tau)))
    adj = eg.exp(-(pd / tau_t)) * (1.0 - eye) + eye
    if knn > 0 and knn < n - 1:
        keep = _knn_mask(adj.data, knn)
        adj = adj * keep
    return adj


def _knn_mask(adj: np.ndarray, knn: int) -> np.ndarray:
    """Boolean mask keeping each row's knn largest off-diagonal entries,
    symmetrized by max, self-loops always kept. Purely structural."""
    b, n, _ = adj.shape
    off = adj * (1.0 - np.eye(n)[None])
    order = np.argsort(-off, axis=2, kind="stable")[:, :, :knn]
    keep = np.zeros_like(adj, dtype=bool)
    np.put_along_axis(keep, order, True, axis=2)
    keep |= np.swapaxes(keep, 1, 2)
    keep |= np.eye(n, dtype=bool)[None]
    return keep.astype(np.float64)


def normalize_adjacency_t(adj: Tensor) -> Tensor:
    """Symmetric normalization D^{-1/2} A D^{-1/2}."""
    deg = adj.sum(axis=2, keepdims=True)  # (B, N, 1)
    dinv = eg.clamp_min(deg, 1e-12) ** -0.5
    return adj * dinv * eg.swapaxes(dinv, 1, 2)


def gpgcn_t(mu: Tensor, sigma: Tensor, ahat: Tensor, conv_mu_w, conv_sigma_w, phi):
    """L layers of dual-channel propagation; final sigma squashed to (0, phi]."""
    layers = len(conv_mu_w)
    h_mu, h_sigma = mu, sigma
    for l in range(layers):
        h_mu = eg.relu(ahat @ h_mu @ conv_mu_w[l])
        pre = ahat @ h_sigma @ conv_sigma_w[l]
        if l + 1 < layers:
            h_sigma = eg.relu(pre)
        else:
            h_sigma = eg.clamp_min(phi * eg.sigmoid(pre), SIGMA_FLOOR)
    return h_mu, h_sigma


def aggregate_t(x: Tensor, fuse_w, pooling: str = "mean") -> Tensor:
    """Concat(class row, pooled locals) @ W^m. x (B, N, D) -> (B, D)."""
    cls = x[:, 0, :]
    local = x[:, 1:, :]
    pooled = local.mean(axis=1) if pooling == "mean" else local.max(axis=1)
    return eg.concat([cls, pooled], axis=1) @ fuse_w


# -- single-instance numpy operations (public spec surface) -------------------


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def project_gaussian_nodes(feats: PatchFeatureSet, params: GpgrParams) -> GaussianNodeSet:
    """Lift tokens to Gaussian nodes: mu affine, sigma = phi*sigmoid(affine)."""
    tokens = feats.tokens
    if tokens.shape[1] != params.dim:
        raise ContractViolationError(
            f"token width {tokens.shape[1]} != params dim {params.dim}")
    mu = tokens @ params.fc_mu_w + params.fc_mu_b
    raw = tokens @ params.fc_sigma_w + params.fc_sigma_b
    sigma = np.maximum(params.phi * _sigmoid(raw), SIGMA_FLOOR)
    return GaussianNodeSet(mu=mu, sigma=sigma)


def build_patch_graph(nodes: GaussianNodeSet, params: GpgrParams) -> PatchGraph:
    """Heat-kernel graph on mean vectors with unit self-loops."""
    mu = nodes.mu
    n = mu.shape[0]
    if n == 1:
        return PatchGraph(adjacency=np.ones((1, 1)), degree=np.ones(1))
    sq = (mu * mu).sum(axis=1, keepdims=True)
    pd = np.maximum(sq + sq.T - 2.0 * (mu @ mu.T), 0.0)
    if params.tau == MEDIAN_TAU:
        tau = max(float(np.median(pd[~np.eye(n, dtype=bool)])), 1e-12)
    else:
        tau = float(params.tau)
        if tau <= 0:
            raise ConfigError("tau must be positive")
    eye = np.eye(n)
    adj = np.exp(-pd / tau) * (1.0 - eye) + eye
    if params.knn > 0 and params.knn < n - 1:
        adj = adj * _knn_mask(adj[None], params.knn)[0]
    adj = 0.5 * (adj + adj.T)  # kill last-bit asymmetry from the kernel
    return PatchGraph(adjacency=adj, degree=adj.sum(axis=1))


def gpgcn_forward(nodes: GaussianNodeSet, graph: PatchGraph,
                  params: GpgrParams, modality: str) -> GaussianNodeSet:
    """Dual-channel message passing over the normalized adjacency."""
    check_modality(modality)
    if (graph.degree <= 0).any():
        raise DomainError("cannot normalize a zero-degree row")
    dinv = 1.0 / np.sqrt(graph.degree)
    ahat = graph.adjacency * dinv[:, None] * dinv[None, :]
    phi = params.phi
    h_mu, h_sigma = nodes.mu, nodes.sigma
    for l in range(params.layers):
        h_mu = np.maximum(ahat @ h_mu @ params.conv_mu_w[modality][l], 0.0)
        pre = ahat @ h_sigma @ params.conv_sigma_w[modality][l]
        if l + 1 < params.layers:
            h_sigma = np.maximum(pre, 0.0)
        else:
            h_sigma = np.maximum(phi * _sigmoid(pre), SIGMA_FLOOR)
    return GaussianNodeSet(mu=h_mu, sigma=h_sigma)


def sample_nodes(nodes: GaussianNodeSet, mode: str, rng: RngStream | None = None) -> np.ndarray:
    """Reparameterized draw in train mode; the mean exactly in eval mode."""
    if mode == "eval":
        return nodes.mu.copy()
    if mode == "train":
        if rng is None:
            raise ContractViolationError("train-mode sampling needs an RngStream")
        return reparameterize(nodes.mu, nodes.sigma, rng)
    raise ContractViolationError(f"mode must be train or eval, got {mode!r}")


def aggregate_global(sampled: np.ndarray, params: GpgrParams, modality: str) -> ModalFeature:
    """x-tilde = concat(class row, pooled local rows) @ W^m."""
    check_modality(modality)
    sampled = _check_matrix(sampled, "sampled")
    if sampled.shape[0] < 2:
        raise ContractViolationError("aggregation needs at least one local row")
    local = sampled[1:]
    pooled = local.mean(axis=0) if params.pooling == "mean" else local.max(axis=0)
    x_tilde = np.concatenate([sampled[0], pooled]) @ params.fuse_w[modality]
    return ModalFeature(modality=modality, x_tilde=x_tilde)


def class_token_kl(nodes: GaussianNodeSet) -> float:
    """Mean-reduced KL of the class-token Gaussian against N(0, I).

    Applies to the projection outputs (the pre-convolution node set)."""
    return gaussian_kl(nodes.mu[0], nodes.sigma[0])
