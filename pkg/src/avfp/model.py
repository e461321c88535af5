"""Networks of the sequential latent-variable model.

Four parameter partitions with strict ownership:

  theta  generative side: latent transition prior (with its own gated
         recurrent state over past latents and inputs) and the
         emission density over observations
  phi    recognition side: gated recurrent encoder over observations,
         inputs and previous latents, plus the posterior head
  psi    latent-sequence discriminator
  rho    remaining-life regression readout

All densities are diagonal Gaussians parameterized by (mean, log_var)
with log_var hard-clamped to [-10, 10].  In markovian mode both
recurrent encoders are bypassed: the recognition head sees only
(x_t, u_t, z_prev) and the prior/emission heads see only the adjacent
latent, which removes every non-adjacent dependency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .data import LinearGaussianSpec
from .diffcore import Tensor, apply_primitive, concat, constant, sigmoid, softplus, tanh

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
DISC_LOGIT_CLIP = 15.0


@dataclass(frozen=True)
class NetworkSpec:
    """Dimensions and widths of every sub-network.

    A hidden width of 0 means the corresponding head is purely linear,
    which is what exact linear-Gaussian configurations use.
    """

    n_x: int
    n_u: int
    n_z: int = 8
    n_h: int = 32
    enc_hidden: int = 32
    dec_hidden: int = 32
    prior_hidden: int = 32
    disc_hidden: int = 32
    rul_hidden: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("n_x", "n_u", "n_z", "n_h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("enc_hidden", "dec_hidden", "prior_hidden",
                     "disc_hidden", "rul_hidden"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_z > self.n_h:
            raise ValueError("n_z must not exceed n_h")
        if self.activation != "tanh":
            raise ValueError("only tanh activation is supported")

    def to_dict(self) -> dict:
        return {
            "n_x": self.n_x, "n_u": self.n_u, "n_z": self.n_z, "n_h": self.n_h,
            "enc_hidden": self.enc_hidden, "dec_hidden": self.dec_hidden,
            "prior_hidden": self.prior_hidden, "disc_hidden": self.disc_hidden,
            "rul_hidden": self.rul_hidden, "activation": self.activation,
        }


@dataclass
class GaussianDiag:
    """Diagonal Gaussian; log_var is expected to be inside the clamp."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean/log_var shape mismatch")


@dataclass
class HistoryState:
    """Recurrent summary of everything seen up to and including step t."""

    h: Tensor
    t: int


@dataclass
class ModelParams:
    """Parameter partitions plus the structural metadata they imply."""

    spec: NetworkSpec
    markovian: bool
    theta: dict[str, Tensor]
    phi: dict[str, Tensor]
    psi: dict[str, Tensor]
    rho: dict[str, Tensor]

    def partitions(self) -> dict[str, dict[str, Tensor]]:
        return {"theta": self.theta, "phi": self.phi,
                "psi": self.psi, "rho": self.rho}

    def named(self) -> dict[str, Tensor]:
        out = {}
        for part, group in self.partitions().items():
            for name, t in group.items():
                out[f"{part}.{name}"] = t
        return out


def recognition_input_dim(spec: NetworkSpec, markovian: bool) -> int:
    return spec.n_x + spec.n_u + spec.n_z if markovian else spec.n_h


def prior_input_dim(spec: NetworkSpec, markovian: bool) -> int:
    return spec.n_z if markovian else spec.n_z + spec.n_h


def emission_input_dim(spec: NetworkSpec, markovian: bool) -> int:
    return spec.n_z if markovian else spec.n_z + spec.n_h


def rul_input_dim(spec: NetworkSpec, markovian: bool) -> int:
    return recognition_input_dim(spec, markovian) + spec.n_z


# ---------------------------------------------------------------------------
# initialization


def _head(g, prefix, d_in, hidden, d_out, out: dict):
    """Gaussian head params: optional tanh layer, then mean and log-var."""
    d_feat = hidden if hidden > 0 else d_in
    if hidden > 0:
        out[f"{prefix}.W1"] = Tensor(g.normal(0, 1 / np.sqrt(d_in), (hidden, d_in)))
        out[f"{prefix}.b1"] = Tensor(np.zeros(hidden))
    s = 1 / np.sqrt(d_feat)
    out[f"{prefix}.Wm"] = Tensor(g.normal(0, s, (d_out, d_feat)))
    out[f"{prefix}.bm"] = Tensor(np.zeros(d_out))
    out[f"{prefix}.Wv"] = Tensor(g.normal(0, s, (d_out, d_feat)))
    out[f"{prefix}.bv"] = Tensor(np.zeros(d_out))


def _gru(g, d_in, n_h, out: dict, prefix="gru"):
    out[f"{prefix}.W"] = Tensor(g.normal(0, 1 / np.sqrt(d_in), (3 * n_h, d_in)))
    out[f"{prefix}.U"] = Tensor(g.normal(0, 1 / np.sqrt(n_h), (3 * n_h, n_h)))
    out[f"{prefix}.b"] = Tensor(np.zeros(3 * n_h))


def init_params(spec: NetworkSpec, markovian: bool, seed: int) -> ModelParams:
    """Seeded initialization; weights ~ N(0, 1/fan_in), biases zero."""
    phi: dict[str, Tensor] = {}
    theta: dict[str, Tensor] = {}
    psi: dict[str, Tensor] = {}
    rho: dict[str, Tensor] = {}

    g = rng.stream(seed, "init", "phi")
    if not markovian:
        _gru(g, spec.n_x + spec.n_u + spec.n_z, spec.n_h, phi)
        phi["h0"] = Tensor(np.zeros(spec.n_h))
    _head(g, "enc", recognition_input_dim(spec, markovian),
          spec.enc_hidden, spec.n_z, phi)

    g = rng.stream(seed, "init", "theta")
    if not markovian:
        _gru(g, spec.n_z + spec.n_u, spec.n_h, theta)
        theta["g0"] = Tensor(np.zeros(spec.n_h))
    _head(g, "pri", prior_input_dim(spec, markovian),
          spec.prior_hidden, spec.n_z, theta)
    _head(g, "dec", emission_input_dim(spec, markovian),
          spec.dec_hidden, spec.n_x, theta)

    g = rng.stream(seed, "init", "psi")
    d_feat = max(spec.disc_hidden, 1)
    psi["feat.W"] = Tensor(g.normal(0, 1 / np.sqrt(spec.n_z), (d_feat, spec.n_z)))
    psi["feat.b"] = Tensor(np.zeros(d_feat))
    psi["out.w"] = Tensor(g.normal(0, 1 / np.sqrt(d_feat), d_feat))
    psi["out.b"] = Tensor(np.zeros(()))

    g = rng.stream(seed, "init", "rho")
    d_rul = rul_input_dim(spec, markovian)
    d_feat = max(spec.rul_hidden, 1)
    rho["l1.W"] = Tensor(g.normal(0, 1 / np.sqrt(d_rul), (d_feat, d_rul)))
    rho["l1.b"] = Tensor(np.zeros(d_feat))
    rho["out.w"] = Tensor(g.normal(0, 1 / np.sqrt(d_feat), d_feat))
    rho["out.b"] = Tensor(np.zeros(()))

    return ModelParams(spec=spec, markovian=markovian,
                       theta=theta, phi=phi, psi=psi, rho=rho)


# ---------------------------------------------------------------------------
# building blocks


def gru_step(group: dict[str, Tensor], prefix: str, h: Tensor, inp: Tensor) -> Tensor:
    """Gated recurrent update; gates packed row-wise [reset; update; cand]."""
    n_h = h.shape[0]
    s = group[f"{prefix}.W"] @ inp + group[f"{prefix}.b"]
    t = group[f"{prefix}.U"] @ h
    r = sigmoid(s.slice(0, n_h) + t.slice(0, n_h))
    u = sigmoid(s.slice(n_h, 2 * n_h) + t.slice(n_h, 2 * n_h))
    c = tanh(s.slice(2 * n_h, 3 * n_h) + r * t.slice(2 * n_h, 3 * n_h))
    return (1.0 - u) * h + u * c


def _gaussian_head(group: dict[str, Tensor], prefix: str, hidden: int,
                   inp: Tensor) -> GaussianDiag:
    feat = tanh(group[f"{prefix}.W1"] @ inp + group[f"{prefix}.b1"]) \
        if hidden > 0 else inp
    mean = group[f"{prefix}.Wm"] @ feat + group[f"{prefix}.bm"]
    log_var = (group[f"{prefix}.Wv"] @ feat + group[f"{prefix}.bv"]).clip(
        LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianDiag(mean=mean, log_var=log_var)


def sample_reparam(g: GaussianDiag, noise) -> Tensor:
    """mean + exp(log_var / 2) * noise; noise is supplied, never drawn."""
    noise = constant(noise)
    if noise.shape != g.mean.shape:
        raise ValueError("noise shape mismatch")
    return g.mean + apply_primitive("exp", g.log_var * 0.5) * noise


# ---------------------------------------------------------------------------
# recognition side (phi)


def encode_history(params: ModelParams, prev: HistoryState | None,
                   x_t, u_t, z_prev) -> HistoryState:
    """Fold (x_t, u_t, z_{t-1}) into the recognition summary.

    Markovian mode carries no state: the summary is just the current
    inputs, so the posterior can only see adjacent information.
    """
    inp = concat([constant(x_t), constant(u_t), constant(z_prev)])
    t_next = 0 if prev is None else prev.t + 1
    if params.markovian:
        return HistoryState(h=inp, t=t_next)
    h_prev = params.phi["h0"] if prev is None else prev.h
    return HistoryState(h=gru_step(params.phi, "gru", h_prev, inp), t=t_next)


def recognition(params: ModelParams, state: HistoryState) -> GaussianDiag:
    """Posterior belief over z_t given the recognition summary."""
    return _gaussian_head(params.phi, "enc", params.spec.enc_hidden, state.h)


# ---------------------------------------------------------------------------
# generative side (theta)


def advance_prior_state(params: ModelParams, prev: HistoryState | None,
                        z_prev, u_t) -> HistoryState:
    """Fold (z_{t-1}, u_t) into the prior's own recurrent summary."""
    t_next = 0 if prev is None else prev.t + 1
    if params.markovian:
        return HistoryState(h=constant(np.zeros(0)), t=t_next)
    z_prev = z_prev if isinstance(z_prev, Tensor) else constant(z_prev)
    inp = concat([z_prev, constant(u_t)])
    g_prev = params.theta["g0"] if prev is None else prev.h
    return HistoryState(h=gru_step(params.theta, "gru", g_prev, inp), t=t_next)


def transition_prior(params: ModelParams, state: HistoryState,
                     z_prev, step: int) -> GaussianDiag:
    """p(z_t | z_{t-1}, history); the first step is pinned to N(0, I)."""
    if step == 0:
        zeros = constant(np.zeros(params.spec.n_z))
        return GaussianDiag(mean=zeros, log_var=constant(np.zeros(params.spec.n_z)))
    z_prev = z_prev if isinstance(z_prev, Tensor) else constant(z_prev)
    inp = z_prev if params.markovian else concat([z_prev, state.h])
    return _gaussian_head(params.theta, "pri", params.spec.prior_hidden, inp)


def emission(params: ModelParams, state: HistoryState, z_t: Tensor) -> GaussianDiag:
    """p(x_t | z_t, history); never conditioned on the current x_t."""
    inp = z_t if params.markovian else concat([z_t, state.h])
    return _gaussian_head(params.theta, "dec", params.spec.dec_hidden, inp)


# ---------------------------------------------------------------------------
# discriminator (psi) and remaining-life readout (rho)


def discriminate(params: ModelParams, z_seq: list[Tensor]) -> Tensor:
    """Probability that a latent sequence came from the prior rollout.

    Per-step features are mean-pooled over time, so sequences of any
    length share one readout; the logit is clamped before the sigmoid
    to keep the probability strictly inside (0, 1).
    """
    if len(z_seq) == 0:
        raise ValueError("empty latent sequence")
    psi = params.psi
    pooled = None
    for z in z_seq:
        f = tanh(psi["feat.W"] @ z + psi["feat.b"])
        pooled = f if pooled is None else pooled + f
    pooled = pooled * (1.0 / len(z_seq))
    logit = (psi["out.w"] @ pooled + psi["out.b"]).clip(
        -DISC_LOGIT_CLIP, DISC_LOGIT_CLIP)
    return sigmoid(logit)


def rul_head(params: ModelParams, state: HistoryState, z_mean: Tensor) -> Tensor:
    """Non-negative remaining-life estimate from the filtered belief."""
    inp = concat([state.h, z_mean])
    rho = params.rho
    feat = tanh(rho["l1.W"] @ inp + rho["l1.b"])
    return softplus(rho["out.w"] @ feat + rho["out.b"])


# ---------------------------------------------------------------------------
# exact linear-Gaussian configuration


def linear_gaussian_model(lg: LinearGaussianSpec, enc_hidden: int = 16,
                          seed: int = 0) -> ModelParams:
    """Markovian model whose generative side equals the given instance.

    Prior and emission heads are linear with weights set to (A, diag q)
    and (C, diag r); the recognition network stays randomly initialized
    and trainable.  Valid only when the instance starts at N(0, I),
    matching the pinned first-step prior.
    """
    if not np.allclose(lg.init_mean, 0.0) or not np.allclose(lg.init_cov, np.eye(lg.n_z)):
        raise ValueError("instance must start at N(0, I) to match the fixed first prior")
    log_q = np.log(lg.q_diag)
    log_r = np.log(lg.r_diag)
    for v in (log_q, log_r):
        if np.any(v < LOG_VAR_MIN) or np.any(v > LOG_VAR_MAX):
            raise ValueError("noise variances outside the representable clamp")

    spec = NetworkSpec(
        n_x=lg.n_x, n_u=1, n_z=lg.n_z, n_h=max(lg.n_z, 4),
        enc_hidden=enc_hidden, dec_hidden=0, prior_hidden=0,
        disc_hidden=8, rul_hidden=8,
    )
    params = init_params(spec, markovian=True, seed=seed)
    th = params.theta
    th["pri.Wm"] = Tensor(lg.A.copy())
    th["pri.bm"] = Tensor(np.zeros(lg.n_z))
    th["pri.Wv"] = Tensor(np.zeros((lg.n_z, lg.n_z)))
    th["pri.bv"] = Tensor(log_q)
    th["dec.Wm"] = Tensor(lg.C.copy())
    th["dec.bm"] = Tensor(np.zeros(lg.n_x))
    th["dec.Wv"] = Tensor(np.zeros((lg.n_x, lg.n_z)))
    th["dec.bv"] = Tensor(log_r)
    return params
