"""Minimax training loop, Adam, and bit-exact checkpointing.

Each batch runs up to three phases with strict parameter isolation:

  1. discriminator (psi): latent sequences are rolled out from the
     prior (real) and the recognition path (fake) with recording off,
     then scored; only psi moves.
  2. joint generative/recognition (theta, phi): maximize the combined
     objective; psi gradients exist on the tape but are not applied.
  3. remaining-life readout (rho): squared error of the per-cycle
     prediction against capped targets on detached filter features.

Randomness is derived per (seed, purpose, step), never from a shared
mutable generator, so a run checkpointed at step s and resumed
reproduces the uninterrupted run bit-exactly.  Batches whose loss goes
non-finite are skipped and counted; more than 10 in a row aborts.

Checkpoints are a single binary file: magic "AVFP", u32 version, a
length-prefixed table of named float64 arrays, and a trailing 64-bit
checksum (first 8 bytes of the SHA-256 of the table).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import rng
from .data import (
    Trajectory,
    gen_linear_gaussian,
    kalman_loglik,
    random_linear_gaussian_instance,
    train_val_split,
)
from .diffcore import (
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    broadcast_to,
    constant,
    log,
    no_tape,
    sigmoid,
    tanh,
)
from .model import (
    HistoryState,
    ModelParams,
    NetworkSpec,
    discriminate,
    init_params,
    linear_gaussian_model,
    rul_head,
)
from .objectives import (
    adversarial_losses,
    combined_objective,
    filter_forward,
    prior_rollout,
    sequence_elbo,
    stack_scalars,
)

CHECKPOINT_MAGIC = b"AVFP"
CHECKPOINT_VERSION = 1
MAX_CONSECUTIVE_SKIPS = 10


class TrainingAborted(RuntimeError):
    """Loss stayed non-finite for more than the tolerated streak."""


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments keyed by canonical parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(group: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState) -> bool:
    """One bias-corrected update applied in place to the partition.

    grads must cover exactly this partition.  Any non-finite gradient
    skips the whole step (returns False, counted on the state).
    """
    if set(grads) != set(group):
        missing = set(group) ^ set(grads)
        raise ValueError(f"gradient/parameter name mismatch: {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != group[name].data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in group.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


def clip_by_global_norm(grads: dict[str, np.ndarray],
                        max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale the whole gradient set so its global norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    trajectories_per_batch: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_adv: float = 0.1
    disc_steps: int = 1
    gradient_clip_norm: float = 5.0
    markovian: bool = False
    rul_supervision: bool = True
    kl_warmup_steps: int = 0
    eval_every: int = 200
    val_frac: float = 0.1
    rul_cap: int = 125

    def __post_init__(self):
        if self.epochs < 0 or self.trajectories_per_batch <= 0:
            raise ValueError("epochs must be >= 0 and batch size positive")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ValueError("bad optimizer hyperparameters")
        if self.lambda_adv < 0 or self.disc_steps < 0:
            raise ValueError("lambda_adv and disc_steps must be non-negative")
        if self.gradient_clip_norm <= 0:
            raise ValueError("gradient_clip_norm must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        """Strict construction: unknown keys are an error, not a warning."""
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# trace records


@dataclass
class StepRecord:
    step: int
    epoch: int
    combined: float
    recon: float
    kl: float
    adv_gen: float
    adv_disc: float
    disc_loss: float | None
    rul_loss: float | None


@dataclass
class EvalRecord:
    step: int
    val_rmse: float | None
    extra: float | None


@dataclass
class TrainResult:
    params: ModelParams
    steps: list[StepRecord]
    evals: list[EvalRecord]
    best_step: int | None
    best_val_rmse: float | None
    skipped_batches: int
    checkpoint: "Checkpoint"


# ---------------------------------------------------------------------------
# readout helpers


def predict_sequence_rul(params: ModelParams, traj: Trajectory) -> np.ndarray:
    """Per-cycle remaining-life estimates from deterministic filtering."""
    with no_tape():
        fp = filter_forward(params, traj, None)
        out = np.empty(traj.length)
        for t in range(traj.length):
            out[t] = rul_head(params, fp.states[t], fp.samples[t]).item()
    return out


def rmse_per_cycle(params: ModelParams, trajs: list[Trajectory]) -> float:
    """RMSE of per-cycle predictions against capped targets."""
    sq, n = 0.0, 0
    for traj in trajs:
        if traj.rul is None:
            raise ValueError(f"unit {traj.unit_id} has no targets")
        pred = predict_sequence_rul(params, traj)
        sq += float(((pred - traj.rul) ** 2).sum())
        n += traj.length
    return float(np.sqrt(sq / n))


def _grads_for(group: dict[str, Tensor], grads_by_uid: dict[int, np.ndarray]
               ) -> dict[str, np.ndarray]:
    return {
        name: grads_by_uid.get(p.uid, np.zeros_like(p.data))
        for name, p in group.items()
    }


# ---------------------------------------------------------------------------
# training loop


def train(
    trajs: list[Trajectory],
    spec: NetworkSpec,
    config: TrainConfig,
    eval_extra=None,
    stop_after_steps: int | None = None,
    resume: "Checkpoint | None" = None,
) -> TrainResult:
    """Run the minimax loop over run-to-failure trajectories.

    When trajectories carry RUL targets and supervision is on, the last
    val_frac of units is held out and scored every eval_every steps;
    eval_extra(params) may compute an additional metric (say, test
    RMSE) at the same cadence.  stop_after_steps ends the run early
    with a resumable checkpoint in the result.
    """
    supervised = config.rul_supervision and all(t.rul is not None for t in trajs)
    if supervised and len(trajs) >= 5:
        train_trajs, val_trajs = train_val_split(trajs, config.val_frac)
    else:
        train_trajs, val_trajs = list(trajs), []

    if resume is not None:
        if resume.spec != spec or resume.config != config:
            raise ValueError("checkpoint was created with a different setup")
        params = params_from_checkpoint(resume)
        opt_gen, opt_disc, opt_rul = opt_from_checkpoint(resume, config)
        step = resume.step
        start_epoch, start_batch = resume.epoch, resume.batch_idx
        skipped_batches = resume.skipped_batches
        consecutive = resume.consecutive_skips
        best_step = resume.best_step if resume.best_step >= 0 else None
        best_val = resume.best_val if np.isfinite(resume.best_val) else None
    else:
        params = init_params(spec, config.markovian, config.seed)
        opt_gen = OptimizerState(config.lr, config.beta1, config.beta2, config.eps)
        opt_disc = OptimizerState(config.lr, config.beta1, config.beta2, config.eps)
        opt_rul = OptimizerState(config.lr, config.beta1, config.beta2, config.eps)
        step = 0
        start_epoch, start_batch = 0, 0
        skipped_batches = 0
        consecutive = 0
        best_step, best_val = None, None

    gen_group = {f"theta.{k}": t for k, t in params.theta.items()}
    gen_group.update({f"phi.{k}": t for k, t in params.phi.items()})
    disc_group = {f"psi.{k}": t for k, t in params.psi.items()}
    rul_group = {f"rho.{k}": t for k, t in params.rho.items()}

    steps_log: list[StepRecord] = []
    evals: list[EvalRecord] = []
    n_batch = config.trajectories_per_batch
    done = False

    def run_eval(at_step: int):
        nonlocal best_step, best_val
        val = rmse_per_cycle(params, val_trajs) if val_trajs else None
        extra = eval_extra(params) if eval_extra is not None else None
        evals.append(EvalRecord(step=at_step, val_rmse=val, extra=extra))
        if val is not None and (best_val is None or val < best_val):
            best_val, best_step = val, at_step

    for epoch in range(start_epoch, config.epochs):
        order = rng.stream(config.seed, "shuffle", epoch).permutation(
            len(train_trajs)
        )
        batches = [
            order[i : i + n_batch] for i in range(0, len(order), n_batch)
        ]
        first_batch = start_batch if epoch == start_epoch else 0
        for batch_idx in range(first_batch, len(batches)):
            batch = [train_trajs[i] for i in batches[batch_idx]]
            step += 1

            # phase 1: discriminator
            disc_loss_val = None
            if config.lambda_adv > 0.0:
                for j in range(config.disc_steps):
                    with no_tape():
                        fakes, reals = [], []
                        for i, traj in enumerate(batch):
                            nf = rng.normal(
                                config.seed, (traj.length, spec.n_z),
                                "disc-fake", step, j, i)
                            fp = filter_forward(params, traj, nf)
                            fakes.append([constant(z.data) for z in fp.samples])
                            nr = rng.normal(
                                config.seed, (traj.length, spec.n_z),
                                "disc-real", step, j, i)
                            reals.append(prior_rollout(params, traj.u, nr))
                    try:
                        with Tape() as tape:
                            d_fake = stack_scalars(
                                [discriminate(params, z) for z in fakes])
                            d_real = stack_scalars(
                                [discriminate(params, z) for z in reals])
                            disc_loss, _ = adversarial_losses(d_real, d_fake)
                        grads = _grads_for(disc_group, backward(tape, disc_loss))
                        grads, _ = clip_by_global_norm(
                            grads, config.gradient_clip_norm)
                        adam_step(disc_group, grads, opt_disc)
                        disc_loss_val = disc_loss.item()
                    except NonFiniteError:
                        opt_disc.skipped += 1

            # phase 2: joint generative/recognition update
            if config.kl_warmup_steps > 0:
                kl_w = min(1.0, step / config.kl_warmup_steps)
            else:
                kl_w = 1.0
            try:
                with Tape() as tape:
                    breakdowns = []
                    total = None
                    for i, traj in enumerate(batch):
                        noise = rng.normal(config.seed, (traj.length, spec.n_z),
                                           "noise", step, i)
                        pn = rng.normal(config.seed, (traj.length, spec.n_z),
                                        "prior-noise", step, i)
                        bd, target, _ = combined_objective(
                            params, traj, noise, config.lambda_adv,
                            prior_noise=pn, kl_weight=kl_w)
                        breakdowns.append(bd)
                        total = target if total is None else total + target
                    loss = total * (-1.0 / len(batch))  # minimize -combined
                grads = _grads_for(gen_group, backward(tape, loss))
                grads, _ = clip_by_global_norm(grads, config.gradient_clip_norm)
                adam_step(gen_group, grads, opt_gen)
                consecutive = 0
                steps_log.append(StepRecord(
                    step=step, epoch=epoch,
                    combined=float(np.mean([b.combined for b in breakdowns])),
                    recon=float(np.mean([b.recon_loglik for b in breakdowns])),
                    kl=float(np.mean([b.kl_total for b in breakdowns])),
                    adv_gen=float(np.mean([b.adv_gen for b in breakdowns])),
                    adv_disc=float(np.mean([b.adv_disc for b in breakdowns])),
                    disc_loss=disc_loss_val,
                    rul_loss=None,
                ))
            except NonFiniteError:
                skipped_batches += 1
                consecutive += 1
                if consecutive > MAX_CONSECUTIVE_SKIPS:
                    raise TrainingAborted(
                        f"{consecutive} consecutive non-finite batches at "
                        f"step {step}")

            # phase 3: remaining-life readout
            if supervised:
                try:
                    with no_tape():
                        feats = []
                        for traj in batch:
                            fp = filter_forward(params, traj, None)
                            feats.append([
                                (constant(fp.states[t].h.data),
                                 constant(fp.samples[t].data))
                                for t in range(traj.length)
                            ])
                    with Tape() as tape:
                        errs = []
                        for traj, rows in zip(batch, feats):
                            for t, (h, zm) in enumerate(rows):
                                pred = rul_head(
                                    params, HistoryState(h=h, t=t), zm)
                                errs.append(pred + (-float(traj.rul[t])))
                        err_vec = stack_scalars(errs)
                        rul_loss = (err_vec * err_vec).mean()
                    grads = _grads_for(rul_group, backward(tape, rul_loss))
                    grads, _ = clip_by_global_norm(
                        grads, config.gradient_clip_norm)
                    adam_step(rul_group, grads, opt_rul)
                    if steps_log and steps_log[-1].step == step:
                        steps_log[-1].rul_loss = rul_loss.item()
                except NonFiniteError:
                    opt_rul.skipped += 1

            if config.eval_every > 0 and step % config.eval_every == 0:
                run_eval(step)

            if stop_after_steps is not None and step >= stop_after_steps:
                done = True
                next_epoch, next_batch = epoch, batch_idx + 1
                if next_batch >= len(batches):
                    next_epoch, next_batch = epoch + 1, 0
                break
        if done:
            break
    if not done:
        next_epoch, next_batch = config.epochs, 0
        if step > 0 and (not evals or evals[-1].step != step):
            run_eval(step)  # final state always scored

    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        spec=spec,
        config=config,
        params={k: t.data.copy() for k, t in params.named().items()},
        opt={
            "gen": _opt_dump(opt_gen),
            "disc": _opt_dump(opt_disc),
            "rul": _opt_dump(opt_rul),
        },
        step=step,
        epoch=next_epoch,
        batch_idx=next_batch,
        skipped_batches=skipped_batches,
        consecutive_skips=consecutive,
        best_step=best_step if best_step is not None else -1,
        best_val=best_val if best_val is not None else float("nan"),
    )
    return TrainResult(
        params=params,
        steps=steps_log,
        evals=evals,
        best_step=best_step,
        best_val_rmse=best_val,
        skipped_batches=skipped_batches,
        checkpoint=ckpt,
    )


def fit_recognition(params: ModelParams, trajs: list[Trajectory], steps: int,
                    lr: float = 1e-2, seed: int = 0,
                    clip: float = 5.0) -> list[float]:
    """Adam on the recognition partition only, maximizing the bound.

    The generative side stays frozen, which is what makes the bound
    comparable against a fixed exact marginal likelihood throughout.
    Returns the per-step bound values.
    """
    phi_group = {f"phi.{k}": t for k, t in params.phi.items()}
    opt = OptimizerState(lr)
    trace = []
    for step in range(1, steps + 1):
        traj = trajs[(step - 1) % len(trajs)]
        noise = rng.normal(seed, (traj.length, params.spec.n_z),
                           "fit-phi", step)
        with Tape() as tape:
            elbo, _ = sequence_elbo(params, traj, noise)
            loss = elbo * -1.0
        grads = _grads_for(phi_group, backward(tape, loss))
        grads, _ = clip_by_global_norm(grads, clip)
        adam_step(phi_group, grads, opt)
        trace.append(elbo.item())
    return trace


def mc_elbo(params: ModelParams, traj: Trajectory, draws: int,
            seed: int) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the single-sample bound."""
    vals = np.empty(draws)
    with no_tape():
        for d in range(draws):
            noise = rng.normal(seed, (traj.length, params.spec.n_z),
                               "mc-elbo", d)
            elbo, _ = sequence_elbo(params, traj, noise)
            vals[d] = elbo.item()
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(draws))


@dataclass
class BoundAuditRow:
    """One linear-Gaussian instance checked against its exact likelihood."""

    seed: int
    n_z: int
    n_x: int
    length: int
    exact: float
    before_mean: float
    before_se: float
    after_mean: float
    after_se: float

    @property
    def bound_ok(self) -> bool:
        """Estimated bound never above exact by more than 3 standard errors."""
        return (self.before_mean <= self.exact + 3.0 * self.before_se
                and self.after_mean <= self.exact + 3.0 * self.after_se)

    @property
    def gap_before(self) -> float:
        return self.exact - self.before_mean

    @property
    def gap_after(self) -> float:
        return self.exact - self.after_mean

    @property
    def shrunk(self) -> bool:
        return self.gap_after < self.gap_before


def bound_gap_audit(n_instances: int = 20, draws: int = 256,
                    fit_steps: int = 2000, lr: float = 1e-2, seed: int = 0,
                    enc_hidden: int = 16) -> list[BoundAuditRow]:
    """Check the variational bound against exact marginals instance by instance.

    For each random linear-Gaussian instance the generative side of the
    model is set to the true parameters and only the recognition side is
    fitted, so the exact Kalman log-likelihood stays a valid ceiling for
    the whole run.  Returns one row per instance.
    """
    rows = []
    for i in range(n_instances):
        inst_seed = seed + i
        lg, length = random_linear_gaussian_instance(inst_seed)
        traj = gen_linear_gaussian(lg, length, seed=inst_seed)
        exact = kalman_loglik(lg, traj.x)
        params = linear_gaussian_model(lg, enc_hidden=enc_hidden,
                                       seed=inst_seed)
        b_mean, b_se = mc_elbo(params, traj, draws, seed=inst_seed)
        if fit_steps > 0:
            fit_recognition(params, [traj], fit_steps, lr=lr, seed=inst_seed)
        a_mean, a_se = mc_elbo(params, traj, draws, seed=inst_seed + 1)
        rows.append(BoundAuditRow(
            seed=inst_seed, n_z=lg.n_z, n_x=lg.n_x, length=length,
            exact=exact, before_mean=b_mean, before_se=b_se,
            after_mean=a_mean, after_se=a_se,
        ))
    return rows


# ---------------------------------------------------------------------------
# checkpoint container and binary codec


@dataclass
class Checkpoint:
    version: int
    spec: NetworkSpec
    config: TrainConfig
    params: dict[str, np.ndarray]
    opt: dict[str, dict]
    step: int
    epoch: int
    batch_idx: int
    skipped_batches: int
    consecutive_skips: int
    best_step: int
    best_val: float


def _opt_dump(o: OptimizerState) -> dict:
    return {
        "t": o.t,
        "skipped": o.skipped,
        "m": {k: v.copy() for k, v in o.m.items()},
        "v": {k: v.copy() for k, v in o.v.items()},
    }


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    """Rebuild the partitioned parameter container from named arrays."""
    params = init_params(ckpt.spec, ckpt.config.markovian, ckpt.config.seed)
    groups = params.partitions()
    for name, arr in ckpt.params.items():
        part, local = name.split(".", 1)
        if part not in groups or local not in groups[part]:
            raise ValueError(f"unknown parameter '{name}' in checkpoint")
        if groups[part][local].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for '{name}' in checkpoint")
        groups[part][local] = Tensor(arr.copy())
    want = set(params.named())
    have = set(ckpt.params)
    if want != have:
        raise ValueError(f"checkpoint parameter set mismatch: {sorted(want ^ have)}")
    return params


def opt_from_checkpoint(ckpt: Checkpoint, config: TrainConfig):
    out = []
    for group in ("gen", "disc", "rul"):
        dump = ckpt.opt[group]
        o = OptimizerState(config.lr, config.beta1, config.beta2, config.eps)
        o.t = int(dump["t"])
        o.skipped = int(dump["skipped"])
        o.m = {k: v.copy() for k, v in dump["m"].items()}
        o.v = {k: v.copy() for k, v in dump["v"].items()}
        out.append(o)
    return tuple(out)


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
    arr = np.asarray(arr, dtype=np.float64)
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb
    head += struct.pack("<Q", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.tobytes()


def _checkpoint_table(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Everything as named float64 arrays (ints/bools are exact < 2^53)."""
    table: dict[str, np.ndarray] = {}
    for k, v in ckpt.spec.to_dict().items():
        if k == "activation":
            continue  # only tanh exists; nothing to encode
        table[f"spec/{k}"] = np.float64(v)
    for k, v in ckpt.config.to_dict().items():
        table[f"config/{k}"] = np.float64(float(v))
    for name, arr in ckpt.params.items():
        table[f"param/{name}"] = arr
    for group, dump in ckpt.opt.items():
        table[f"opt/{group}/t"] = np.float64(dump["t"])
        table[f"opt/{group}/skipped"] = np.float64(dump["skipped"])
        for k, v in dump["m"].items():
            table[f"opt/{group}/m/{k}"] = v
        for k, v in dump["v"].items():
            table[f"opt/{group}/v/{k}"] = v
    for k in ("step", "epoch", "batch_idx", "skipped_batches",
              "consecutive_skips", "best_step"):
        table[f"meta/{k}"] = np.float64(getattr(ckpt, k))
    table["meta/best_val"] = np.float64(ckpt.best_val)
    return table


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    table = _checkpoint_table(ckpt)
    body = struct.pack("<Q", len(table))
    for name in sorted(table):
        body += _pack_entry(name, np.asarray(table[name]))
    digest = hashlib.sha256(body).digest()[:8]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(body)
        f.write(digest)


def _read(buf: bytes, off: int, n: int) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise ValueError("truncated checkpoint")
    return buf[off : off + n], off + n


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    body, digest = blob[8:-8], blob[-8:]
    if hashlib.sha256(body).digest()[:8] != digest:
        raise ValueError("checkpoint checksum mismatch")

    off = 0
    raw, off = _read(body, off, 8)
    (n_entries,) = struct.unpack("<Q", raw)
    table: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        raw, off = _read(body, off, 4)
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _read(body, off, name_len)
        name = raw.decode("utf-8")
        raw, off = _read(body, off, 8)
        (ndim,) = struct.unpack("<Q", raw)
        shape = []
        for _ in range(ndim):
            raw, off = _read(body, off, 8)
            shape.append(struct.unpack("<Q", raw)[0])
        count = int(np.prod(shape)) if shape else 1
        raw, off = _read(body, off, count * 8)
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        table[name] = arr
    if off != len(body):
        raise ValueError("trailing bytes in checkpoint")

    def scalar(key):
        return float(table[key])

    spec_kw = {}
    for k in ("n_x", "n_u", "n_z", "n_h", "enc_hidden", "dec_hidden",
              "prior_hidden", "disc_hidden", "rul_hidden"):
        spec_kw[k] = int(scalar(f"spec/{k}"))
    spec = NetworkSpec(**spec_kw)

    cfg_kw = {}
    for f_ in fields(TrainConfig):
        v = scalar(f"config/{f_.name}")
        if f_.type == "bool":
            cfg_kw[f_.name] = bool(v)
        elif f_.type == "int":
            cfg_kw[f_.name] = int(v)
        else:
            cfg_kw[f_.name] = float(v)
    config = TrainConfig(**cfg_kw)

    params = {}
    opt = {g: {"t": 0, "skipped": 0, "m": {}, "v": {}} for g in ("gen", "disc", "rul")}
    for name, arr in table.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("opt/"):
            _, group, rest = name.split("/", 2)
            if rest in ("t", "skipped"):
                opt[group][rest] = int(float(arr))
            else:
                kind, pname = rest.split("/", 1)
                opt[group][kind][pname] = arr

    return Checkpoint(
        version=version,
        spec=spec,
        config=config,
        params=params,
        opt=opt,
        step=int(scalar("meta/step")),
        epoch=int(scalar("meta/epoch")),
        batch_idx=int(scalar("meta/batch_idx")),
        skipped_batches=int(scalar("meta/skipped_batches")),
        consecutive_skips=int(scalar("meta/consecutive_skips")),
        best_step=int(scalar("meta/best_step")),
        best_val=scalar("meta/best_val"),
    )


# ---------------------------------------------------------------------------
# 1-D adversarial sanity task


@dataclass
class ToyGanResult:
    gen_scale: float
    gen_shift: float
    d_real_mean: float
    d_fake_mean: float
    fake_mean: float
    trace: list[tuple[int, float, float]]


def train_toy_gan(steps: int = 5000, batch: int = 64, lr: float = 1e-3,
                  seed: int = 0, real_mean: float = 2.0,
                  real_std: float = 0.5, hidden: int = 16) -> ToyGanResult:
    """Affine generator vs small discriminator on 1-D Gaussian data.

    Real samples come from N(real_mean, real_std^2).  At equilibrium the
    discriminator cannot tell the two apart (outputs near 1/2) and the
    generator's sample mean sits at real_mean.
    """
    g_params = {"scale": Tensor(np.array(1.0)), "shift": Tensor(np.array(0.0))}
    ginit = rng.stream(seed, "toy-gan-init")
    d_params = {
        "W1": Tensor(ginit.normal(0, 1.0, (1, hidden))),
        "b1": Tensor(np.zeros(hidden)),
        "w2": Tensor(ginit.normal(0, 1.0 / np.sqrt(hidden), (hidden, 1))),
        "b2": Tensor(np.array(0.0)),
    }
    opt_g = OptimizerState(lr)
    opt_d = OptimizerState(lr)

    def disc_prob(x: Tensor) -> Tensor:
        h = x @ d_params["W1"]
        h = tanh(h + broadcast_to(d_params["b1"], h.shape))
        logit = h @ d_params["w2"] + broadcast_to(d_params["b2"], (h.shape[0], 1))
        return sigmoid(logit.clip(-15.0, 15.0))

    trace = []
    for step in range(1, steps + 1):
        real = rng.stream(seed, "toy-real", step).normal(
            real_mean, real_std, (batch, 1))
        eps_d = rng.normal(seed, (batch, 1), "toy-noise-d", step)
        eps_g = rng.normal(seed, (batch, 1), "toy-noise-g", step)

        # discriminator step: generator output detached
        with no_tape():
            fake_detached = g_params["scale"].data * eps_d + g_params["shift"].data
        with Tape() as tape:
            d_real = disc_prob(constant(real))
            d_fake = disc_prob(constant(fake_detached))
            d_loss, _ = adversarial_losses(d_real, d_fake)
        grads = _grads_for(d_params, backward(tape, d_loss))
        grads, _ = clip_by_global_norm(grads, 5.0)
        adam_step(d_params, grads, opt_d)

        # generator step: non-saturating loss through the sampler
        with Tape() as tape:
            eps = constant(eps_g)
            fake = eps * broadcast_to(g_params["scale"], eps.shape) \
                + broadcast_to(g_params["shift"], eps.shape)
            d_fake = disc_prob(fake)
            g_loss = log(d_fake).mean() * -1.0
        grads = _grads_for(g_params, backward(tape, g_loss))
        grads, _ = clip_by_global_norm(grads, 5.0)
        adam_step(g_params, grads, opt_g)

        if step % 100 == 0 or step == steps:
            trace.append((step, float(d_real.data.mean()),
                          float(d_fake.data.mean())))

    eval_g = rng.stream(seed, "toy-eval")
    real = eval_g.normal(real_mean, real_std, (4096, 1))
    eps = eval_g.standard_normal((4096, 1))
    with no_tape():
        fake = g_params["scale"].data * eps + g_params["shift"].data
        dr = disc_prob(constant(real)).data.mean()
        df = disc_prob(constant(fake)).data.mean()
    return ToyGanResult(
        gen_scale=float(g_params["scale"].data),
        gen_shift=float(g_params["shift"].data),
        d_real_mean=float(dr),
        d_fake_mean=float(df),
        fake_mean=float(fake.mean()),
        trace=trace,
    )
