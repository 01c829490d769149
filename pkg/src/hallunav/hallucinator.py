"""Learned obstacle hallucination.

An encoder maps a motion plan (channels x, y, v, w over the horizon) to
Gaussian parameters over each obstacle's start position and velocity.
Samples drawn with the reparameterization trick are pushed through the
fixed differentiable decoder; minimizing reconstruction error plus a
location prior and a clearance penalty teaches the encoder to place
obstacles that explain the plan's maneuvers.

Architecture: three 1-D convolutions (channels 4->32->32->32, kernel 5,
stride 2, tanh) followed by per-obstacle autoregressive fully-connected
heads; head i consumes the conv features plus the samples of heads < i and
emits mean and log-variance for (x0, y0, vx, vy).  Log-variances are
clamped to [-10, 4].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DualArray, DualValue, Tape
from .decoder import (
    DecoderConfig,
    DecoderDivergenceError,
    decode,
    decode_timeline,
    obstacle_track,
    reconstruction_loss,
)
from .world import DEFAULT_OBSTACLE_RADIUS, MotionPlan, ObstacleTimeline

LOGVAR_LO, LOGVAR_HI = -10.0, 4.0
_PRIOR_VAR_DEGENERATE = 1e-6  # plan variance below this is floored
_PRIOR_VAR_FLOOR = 1e-4

# fixed per-channel input scaling (x, y, v, w) so conv activations start
# in tanh's linear range
_CHANNEL_SCALE = np.array([0.4, 0.4, 1.0, 0.6366197723675814])


@dataclass(frozen=True)
class EncoderConfig:
    n_obstacles: int = 1
    conv_channels: tuple[int, int, int] = (32, 32, 32)
    kernel: int = 5
    stride: int = 2
    head_hidden: int = 64
    radius: float = DEFAULT_OBSTACLE_RADIUS
    init_logvar: float = -2.0
    init_mu_ahead: float = 1.2

    def feature_len(self, T: int) -> int:
        L = T
        for _ in self.conv_channels:
            L = max(L, self.kernel)
            L = (L - self.kernel) // self.stride + 1
        return L * self.conv_channels[-1]


@dataclass(frozen=True)
class LatentObstacleDistribution:
    """Per-obstacle Gaussian parameters over (x0, y0, vx, vy)."""

    mu: np.ndarray  # (N, 4)
    logvar: np.ndarray  # (N, 4)

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "logvar", np.asarray(self.logvar, dtype=np.float64))
        if self.mu.shape != self.logvar.shape or self.mu.ndim != 2 or self.mu.shape[1] != 4:
            raise ValueError("distribution arrays must be (N, 4)")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


class EncoderWeights:
    """Named parameter arrays plus flat-vector packing for the optimizer."""

    def __init__(self, config: EncoderConfig, T: int, params: dict[str, np.ndarray]):
        self.config = config
        self.T = int(T)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite weights in {name}")

    # fixed parameter order defines the flat layout
    def names(self) -> list[str]:
        cfg = self.config
        out = []
        for li in range(len(cfg.conv_channels)):
            out += [f"conv{li}_w", f"conv{li}_b"]
        for i in range(cfg.n_obstacles):
            out += [f"head{i}_w1", f"head{i}_b1", f"head{i}_w2", f"head{i}_b2"]
        return out

    def pack(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names()])

    def unpack(self, flat: np.ndarray) -> "EncoderWeights":
        params = {}
        k = 0
        for n in self.names():
            shape = self.params[n].shape
            size = self.params[n].size
            params[n] = flat[k : k + size].reshape(shape).copy()
            k += size
        return EncoderWeights(self.config, self.T, params)

    @classmethod
    def initialize(cls, config: EncoderConfig, T: int, seed: int = 0) -> "EncoderWeights":
        """Random conv/hidden layers, zero final heads (mu = 0, logvar = 0)."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        c_in = 4
        for li, c_out in enumerate(config.conv_channels):
            fan = c_in * config.kernel
            params[f"conv{li}_w"] = rng.normal(0, 1 / math.sqrt(fan), (c_out, c_in, config.kernel))
            params[f"conv{li}_b"] = np.zeros(c_out)
            c_in = c_out
        feat = config.feature_len(T)
        for i in range(config.n_obstacles):
            fan = feat + 4 * i
            params[f"head{i}_w1"] = rng.normal(0, 1 / math.sqrt(fan), (config.head_hidden, fan))
            params[f"head{i}_b1"] = np.zeros(config.head_hidden)
            params[f"head{i}_w2"] = np.zeros((8, config.head_hidden))
            # start sampling tightly around a mean placed ahead of the robot:
            # mid-path inits sit on the informative slope of the
            # reconstruction loss, while behind-the-start inits are a
            # zero-gradient trap
            b2 = np.zeros(8)
            b2[0] = config.init_mu_ahead * (1 + i)
            b2[4:] = config.init_logvar
            params[f"head{i}_b2"] = b2
        return cls(config, T, params)

    def save(self, path) -> None:
        from . import io as hio

        attrs = {
            "kind": "encoder",
            "T": self.T,
            "n_obstacles": self.config.n_obstacles,
            "conv_channels": list(self.config.conv_channels),
            "kernel": self.config.kernel,
            "stride": self.config.stride,
            "head_hidden": self.config.head_hidden,
            "radius": self.config.radius,
        }
        hio.write_arrays(path, self.params, attrs)

    @classmethod
    def load(cls, path) -> "EncoderWeights":
        from . import io as hio

        params, attrs = hio.read_arrays(path)
        if attrs.get("kind") != "encoder":
            raise ValueError(f"{path} is not an encoder weights file")
        cfg = EncoderConfig(
            n_obstacles=int(attrs["n_obstacles"]),
            conv_channels=tuple(attrs["conv_channels"]),
            kernel=int(attrs["kernel"]),
            stride=int(attrs["stride"]),
            head_hidden=int(attrs["head_hidden"]),
            radius=float(attrs["radius"]),
        )
        return cls(cfg, int(attrs["T"]), params)


def _plan_channels(plan: MotionPlan) -> np.ndarray:
    return plan.channels() * _CHANNEL_SCALE[:, None]


def _conv_windows(L_in: int, kernel: int, stride: int) -> np.ndarray:
    """Window index matrix (L_out, kernel), edge-padded when L_in < kernel."""
    idx = np.arange(L_in)
    if L_in < kernel:
        idx = np.concatenate([idx, np.full(kernel - L_in, L_in - 1)])
        L_in = kernel
    L_out = (L_in - kernel) // stride + 1
    return idx[np.arange(L_out)[:, None] * stride + np.arange(kernel)[None, :]]


# ----------------------------------------------------------------------
# value-mode forward (numpy)
# ----------------------------------------------------------------------

def _conv_stack_values(channels: np.ndarray, w: EncoderWeights) -> np.ndarray:
    cfg = w.config
    x = channels
    for li in range(len(cfg.conv_channels)):
        win = _conv_windows(x.shape[1], cfg.kernel, cfg.stride)
        xw = x[:, win]  # (C_in, L_out, k)
        x = np.tanh(
            np.einsum("oik,ilk->ol", w.params[f"conv{li}_w"], xw)
            + w.params[f"conv{li}_b"][:, None]
        )
    return x.reshape(-1)


def _head_values(feat: np.ndarray, prev: list[np.ndarray], w: EncoderWeights, i: int):
    inp = np.concatenate([feat] + prev)
    h = np.tanh(w.params[f"head{i}_w1"] @ inp + w.params[f"head{i}_b1"])
    out = w.params[f"head{i}_w2"] @ h + w.params[f"head{i}_b2"]
    return out[:4], np.clip(out[4:], LOGVAR_LO, LOGVAR_HI)


def encode_sample_values(plan: MotionPlan, w: EncoderWeights, eps: np.ndarray):
    """Autoregressive value pass: returns (mu, logvar, z), each (N, 4)."""
    if plan.T != w.T:
        raise ValueError(f"plan horizon {plan.T} does not match encoder horizon {w.T}")
    ch = _plan_channels(plan)
    if not np.all(np.isfinite(ch)):
        raise ValueError("non-finite plan channels")
    feat = _conv_stack_values(ch, w)
    N = w.config.n_obstacles
    eps = np.asarray(eps, dtype=np.float64).reshape(N, 4)
    mus, lvs, zs = [], [], []
    for i in range(N):
        mu, lv = _head_values(feat, zs, w, i)
        z = mu + np.exp(0.5 * lv) * eps[i]
        mus.append(mu)
        lvs.append(lv)
        zs.append(z)
    return np.stack(mus), np.stack(lvs), np.stack(zs)


def encode(plan: MotionPlan, w: EncoderWeights) -> LatentObstacleDistribution:
    """Deterministic plan -> distribution map.

    For N > 1 the autoregressive conditioning uses the preceding heads'
    means (the zero-noise limit); sampling paths re-condition on actual
    samples.
    """
    mu, lv, _ = encode_sample_values(plan, w, np.zeros((w.config.n_obstacles, 4)))
    return LatentObstacleDistribution(mu, lv)


def timeline_from_latent(z: np.ndarray, radius: float, dt: float) -> ObstacleTimeline:
    z = np.asarray(z, dtype=np.float64).reshape(-1, 4)
    return ObstacleTimeline(z[:, :2], z[:, 2:], np.full(z.shape[0], radius), dt)


def sample_obstacles(
    dist: LatentObstacleDistribution,
    seed: int | np.random.Generator,
    radius: float = DEFAULT_OBSTACLE_RADIUS,
    dt: float = 0.1,
) -> ObstacleTimeline:
    """Draw one obstacle set from the distribution (z = mu + sigma * eps)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(dist.mu.shape)
    z = dist.mu + dist.sigma * eps
    return timeline_from_latent(z, radius, dt)


def sample_plan_obstacles(
    plan: MotionPlan,
    w: EncoderWeights,
    seed: int | np.random.Generator,
    dt: float | None = None,
) -> ObstacleTimeline:
    """Sample with full autoregressive conditioning on earlier samples."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal((w.config.n_obstacles, 4))
    _, _, z = encode_sample_values(plan, w, eps)
    return timeline_from_latent(z, w.config.radius, dt if dt is not None else plan.dt)


# ----------------------------------------------------------------------
# tape-mode forward
# ----------------------------------------------------------------------

def _matvec_tape(W: DualArray, x: DualArray, b: DualArray) -> DualArray:
    return (W * x[None, :]).sum(axis=1) + b


def _clamp_tape(x: DualArray, lo: float, hi: float) -> DualArray:
    x = ad.select(x - lo, x, lo)
    return ad.select(hi - x, x, hi)


class _TapeEncoder:
    """One plan's tape-recorded encoder pass with weight leaves."""

    def __init__(self, tape: Tape, w: EncoderWeights):
        self.tape = tape
        self.w = w
        self.flat = tape.leaves(w.pack())  # leaf ids 0..P-1 on a fresh tape
        self.views: dict[str, DualArray] = {}
        k = 0
        for n in w.names():
            size = w.params[n].size
            self.views[n] = DualArray(tape, self.flat.ids[k : k + size].reshape(w.params[n].shape))
            k += size

    def forward(self, plan: MotionPlan, eps: np.ndarray):
        cfg = self.w.config
        tape = self.tape
        x = tape.leaves(_plan_channels(plan))
        for li in range(len(cfg.conv_channels)):
            win = _conv_windows(x.shape[1], cfg.kernel, cfg.stride)
            xw = x.ids[:, win].transpose(1, 0, 2)  # (L_out, C_in, k)
            Wv = self.views[f"conv{li}_w"]  # (C_out, C_in, k)
            prod = DualArray(tape, Wv.ids[:, None, :, :]) * DualArray(
                tape, xw[None, :, :, :]
            )  # (C_out, L_out, C_in, k)
            co, lo = Wv.shape[0], xw.shape[0]
            s = prod.reshape(co, lo, -1).sum(axis=2)
            bias = self.views[f"conv{li}_b"]
            x = ad.tanh(s + DualArray(tape, bias.ids[:, None]))
        feat = x.reshape(-1)
        N = cfg.n_obstacles
        eps = np.asarray(eps, dtype=np.float64).reshape(N, 4)
        mus, lvs, zs = [], [], []
        for i in range(N):
            inp = feat if not zs else ad.concat([feat] + zs)
            h = ad.tanh(_matvec_tape(self.views[f"head{i}_w1"], inp, self.views[f"head{i}_b1"]))
            out = _matvec_tape(self.views[f"head{i}_w2"], h, self.views[f"head{i}_b2"])
            mu, lv_raw = out[:4], out[4:]
            lv = _clamp_tape(lv_raw, LOGVAR_LO, LOGVAR_HI)
            sigma = ad.exp(lv * 0.5)
            z = mu + sigma * eps[i]
            mus.append(mu)
            lvs.append(lv)
            zs.append(z)
        return ad.stack(mus), ad.stack(lvs), ad.stack(zs)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class HallucinationLossReport:
    recon: float
    prior: float
    coll: float
    total: float
    lambda_prior: float
    lambda_coll: float


def fit_position_prior(plan: MotionPlan) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis Gaussian moments of the plan's positions, variance-floored."""
    pos = plan.positions
    mean = pos.mean(axis=0)
    var = pos.var(axis=0)
    var = np.where(var < _PRIOR_VAR_DEGENERATE, _PRIOR_VAR_FLOOR, var)
    return mean, var


def prior_loss_tape(
    starts: DualArray, vels: DualArray | None, plan: MotionPlan
) -> DualValue:
    """Mean negative log-density of obstacle locations under the plan prior.

    The prior keeps hallucinated obstacles near the plan's spatial
    footprint.  Penalizing only the start position leaves a degenerate
    optimum where obstacles adopt huge velocities and vacate the scene, so
    the density is evaluated at the start, middle and end of the obstacle's
    track (identical to the start-only prior for static obstacles).
    """
    mean, var = fit_position_prior(plan)
    n = starts.shape[0]
    if vels is None:
        points = [starts]
    else:
        half = (plan.T // 2) * plan.dt
        full = (plan.T - 1) * plan.dt
        points = [starts, starts + vels * half, starts + vels * full]
    quad = None
    for p in points:
        dx = p[:, 0] - mean[0]
        dy = p[:, 1] - mean[1]
        q = (dx * dx) * (0.5 / var[0]) + (dy * dy) * (0.5 / var[1])
        quad = q if quad is None else quad + q
    log_norm = 0.5 * math.log((2 * math.pi) ** 2 * var[0] * var[1])
    return quad.sum() * (1.0 / (n * len(points))) + log_norm


def _min_over_time(d: DualArray) -> DualArray:
    """Select-chain minimum over axis 0 of a (T, ...) dual array."""
    cur = d[0]
    for t in range(1, d.shape[0]):
        nxt = d[t]
        cur = ad.select(nxt - cur, cur, nxt)
    return cur


def collision_loss_tape(
    starts: DualArray, vels: DualArray, plan: MotionPlan, clearance: float
) -> DualValue:
    """Hinge-squared penalty on obstacle-plan and obstacle-obstacle distances.

    Distances are center-based, minimized over time: the obstacle-plan term
    compares obstacle position t against plan position t.
    """
    T = plan.T
    track = obstacle_track(starts, vels, T, plan.dt)  # (T, N, 2)
    diff = track - plan.positions[:, None, :]
    d = ad.sqrt((diff * diff).sum(axis=2) + 1e-6)  # (T, N)
    dmin = _min_over_time(d)  # (N,)
    hinge = ad.relu(clearance - dmin)
    total = (hinge * hinge).sum()
    N = starts.shape[0]
    for i in range(N):
        for j in range(i + 1, N):
            dd = track[:, i, :] - track[:, j, :]
            dij = ad.sqrt((dd * dd).sum(axis=1) + 1e-6)
            h = ad.relu(clearance - _min_over_time(dij))
            total = total + h * h
    return total


@dataclass(frozen=True)
class HallucinationTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    lambda_prior: float = 0.01
    lambda_coll: float = 1.0
    clearance: float = 0.5
    val_fraction: float = 0.1
    grad_clip: float = 20.0
    # semi-amortized warm start: free per-plan latents are first optimized
    # through the decoder (stage 1) and distilled into the heads by ridge
    # regression (stage 2) before end-to-end epochs (stage 3).  Direct
    # end-to-end training from scratch reliably collapses into
    # input-independent "obstacle avoids the scene" optima where the
    # reconstruction gradient is identically zero.
    warmstart_plans: int = 160
    warmstart_iters: int = 60
    warmstart_lr: float = 0.03
    ridge: float = 1e-3
    # step-size decay for the fine-convergence tail
    lr_decay_at: float = 0.7
    lr_decay: float = 0.3
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    recon: float
    prior: float
    coll: float
    total: float
    val_total: float
    sigma_mean: tuple[float, float, float, float]
    sample_spread: float

    def line(self) -> str:
        sm = " ".join(f"{s:.4f}" for s in self.sigma_mean)
        return (
            f"epoch {self.epoch:3d} recon {self.recon:.6f} prior {self.prior:.6f} "
            f"coll {self.coll:.6f} total {self.total:.6f} val {self.val_total:.6f} "
            f"sigma [{sm}] spread {self.sample_spread:.4f}"
        )


def hallucination_loss(
    plan: MotionPlan,
    rec,
    starts: DualArray,
    vels: DualArray,
    lambda_prior: float = 0.01,
    lambda_coll: float = 1.0,
    clearance: float = 0.5,
) -> tuple[DualValue, HallucinationLossReport]:
    """Total self-supervised loss and its per-term report."""
    l_recon = reconstruction_loss(plan, rec)
    l_prior = prior_loss_tape(starts, vels, plan)
    l_coll = collision_loss_tape(starts, vels, plan, clearance)
    total = l_recon + l_prior * lambda_prior + l_coll * lambda_coll
    report = HallucinationLossReport(
        recon=l_recon.value,
        prior=l_prior.value,
        coll=l_coll.value,
        total=total.value,
        lambda_prior=lambda_prior,
        lambda_coll=lambda_coll,
    )
    return total, report


def _plan_pass(
    plan: MotionPlan,
    w: EncoderWeights,
    eps: np.ndarray,
    cfg: HallucinationTrainConfig,
    vel_scale: float = 1.0,
    coll_scale: float = 1.0,
    prior_scale: float = 1.0,
):
    """One tape-recorded sample->decode->loss pass; returns tape, loss, report.

    The three scale factors implement the training curricula; all are 1 at
    deployment/evaluation.
    """
    tape = Tape(capacity=1 << 19)
    enc = _TapeEncoder(tape, w)
    _, lvs, z = enc.forward(plan, eps)
    starts = z[:, :2]
    vels = z[:, 2:] * vel_scale if vel_scale != 1.0 else z[:, 2:]
    rec = decode(
        starts, vels, plan.positions[0], plan.positions[-1], plan.T, plan.dt, cfg.decoder
    )
    total, report = hallucination_loss(
        plan,
        rec,
        starts,
        vels,
        cfg.lambda_prior * prior_scale,
        cfg.lambda_coll * coll_scale,
        cfg.clearance,
    )
    return tape, total, report, lvs.values


def optimize_plan_latents(
    plan: MotionPlan, cfg: HallucinationTrainConfig, enc_cfg: EncoderConfig
) -> np.ndarray:
    """Stage 1: fit one plan's free obstacle latents (N, 4) by Adam through
    the decoder, starting at the plan's position centroid with zero
    velocity (the location prior's minimum)."""
    N = enc_cfg.n_obstacles
    centroid = plan.positions.mean(axis=0)
    z = np.zeros((N, 4))
    z[:, 0] = centroid[0] + 0.3 * np.arange(N)
    z[:, 1] = centroid[1]
    z = z.ravel()
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    for it in range(1, cfg.warmstart_iters + 1):
        tape = Tape(capacity=1 << 19)
        zz = tape.leaves(z.reshape(N, 4))
        starts, vels = zz[:, :2], zz[:, 2:]
        try:
            rec = decode(
                starts, vels, plan.positions[0], plan.positions[-1], plan.T, plan.dt, cfg.decoder
            )
        except DecoderDivergenceError:
            break
        total, report = hallucination_loss(
            plan, rec, starts, vels, cfg.lambda_prior, cfg.lambda_coll, cfg.clearance
        )
        if not math.isfinite(report.total):
            break
        g = tape.backward(total)[zz.ids].ravel()
        gn = float(np.linalg.norm(g))
        if cfg.grad_clip > 0 and gn > cfg.grad_clip:
            g *= cfg.grad_clip / gn
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        z = z - cfg.warmstart_lr * (m / (1 - 0.9**it)) / (np.sqrt(v / (1 - 0.999**it)) + 1e-8)
    return z.reshape(N, 4)


def _distill_heads(
    w: EncoderWeights, feats: np.ndarray, zstars: np.ndarray, ridge: float
) -> EncoderWeights:
    """Stage 2: ridge-fit each head's output layer onto the optimized
    latents; log-variance outputs keep their initialization."""
    params = {k: v.copy() for k, v in w.params.items()}
    N = w.config.n_obstacles
    n = feats.shape[0]
    for i in range(N):
        prev = zstars[:, :i, :].reshape(n, 4 * i)
        inp = np.concatenate([feats, prev], axis=1)
        H = np.tanh(inp @ params[f"head{i}_w1"].T + params[f"head{i}_b1"])
        Hb = np.column_stack([H, np.ones(n)])
        A = Hb.T @ Hb + ridge * np.eye(Hb.shape[1])
        sol = np.linalg.solve(A, Hb.T @ zstars[:, i, :])  # (hidden+1, 4)
        params[f"head{i}_w2"][:4] = sol[:-1].T
        params[f"head{i}_b2"][:4] = sol[-1]
    return EncoderWeights(w.config, w.T, params)


def train_hallucination(
    plans: list[MotionPlan], cfg: HallucinationTrainConfig = HallucinationTrainConfig()
) -> tuple[EncoderWeights, list[EpochLog]]:
    """Fit the encoder on a plan corpus.

    Three stages, all minimizing the same loss: per-plan free latents are
    optimized through the decoder, distilled into the heads, then the whole
    encoder trains end-to-end by Adam through sample -> decode -> loss.
    Returns the weights with the best validation total loss and the
    training log; the log's epoch-0 entry records the freshly initialized
    encoder.  Aborts on a non-finite loss, returning the last finite
    checkpoint.
    """
    if len(plans) < 1:
        raise ValueError("plan corpus must not be empty")
    T, dt = plans[0].T, plans[0].dt
    for p in plans:
        if p.T != T or abs(p.dt - dt) > 1e-12:
            raise ValueError("all plans must share horizon and dt")

    enc_cfg = EncoderConfig()
    w = EncoderWeights.initialize(enc_cfg, T, seed=cfg.seed)

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA11C)))
    n = len(plans)
    order = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n)) if n >= 5 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    # fixed validation noise makes epoch-over-epoch comparisons meaningful
    val_eps = {
        int(i): np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7A1, int(i))))
        .standard_normal((enc_cfg.n_obstacles, 4))
        for i in val_idx
    }

    def eval_reports(weights, indices, eps_tag):
        reports = []
        for i in indices:
            eps = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, eps_tag, int(i)))
            ).standard_normal((enc_cfg.n_obstacles, 4))
            try:
                _, _, report, _ = _plan_pass(plans[int(i)], weights, eps, cfg)
            except DecoderDivergenceError:
                continue
            reports.append(report)
        return reports

    def probe_spread(weights, epoch):
        probe_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD1, epoch)))
        probe_plan = plans[int(train_idx[0]) if len(train_idx) else 0]
        draws = np.stack(
            [sample_plan_obstacles(probe_plan, weights, probe_rng).starts.ravel() for _ in range(6)]
        )
        return float(np.mean(np.std(draws, axis=0)))

    def log_from(reports, epoch, weights, val_total):
        sig = np.zeros(4)
        for i in train_idx[: min(16, len(train_idx))]:
            sig += encode(plans[int(i)], weights).sigma.mean(axis=0)
        sig /= max(min(16, len(train_idx)), 1)
        return EpochLog(
            epoch=epoch,
            recon=float(np.mean([r.recon for r in reports])),
            prior=float(np.mean([r.prior for r in reports])),
            coll=float(np.mean([r.coll for r in reports])),
            total=float(np.mean([r.total for r in reports])),
            val_total=val_total,
            sigma_mean=tuple(sig),
            sample_spread=probe_spread(weights, epoch),
        )

    logs: list[EpochLog] = []
    init_reports = eval_reports(w, train_idx, 0)
    if init_reports:
        logs.append(log_from(init_reports, 0, w, math.inf))

    # stage 1 + 2: warm start by per-plan latent search and distillation
    if cfg.warmstart_plans > 0 and len(train_idx):
        subset = train_idx[: min(cfg.warmstart_plans, len(train_idx))]
        feats = []
        zstars = []
        for i in subset:
            plan = plans[int(i)]
            zstars.append(optimize_plan_latents(plan, cfg, enc_cfg))
            feats.append(_conv_stack_values(_plan_channels(plan), w))
        w = _distill_heads(w, np.stack(feats), np.stack(zstars), cfg.ridge)

    theta = w.pack()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    best_val = math.inf
    best_theta = theta.copy()
    step = 0

    # stage 3: end-to-end epochs
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr * (cfg.lr_decay if epoch > cfg.lr_decay_at * cfg.epochs else 1.0)
        perm = rng.permutation(train_idx)
        ep_reports: list[HallucinationLossReport] = []
        aborted = False
        for bstart in range(0, len(perm), cfg.batch_size):
            batch = perm[bstart : bstart + cfg.batch_size]
            w = w.unpack(theta)
            grad = np.zeros_like(theta)
            ok = 0
            for i in batch:
                eps = np.random.default_rng(
                    np.random.SeedSequence((cfg.seed, epoch, int(i)))
                ).standard_normal((enc_cfg.n_obstacles, 4))
                try:
                    tape, total, report, _ = _plan_pass(plans[int(i)], w, eps, cfg)
                except DecoderDivergenceError:
                    continue
                if not math.isfinite(report.total):
                    aborted = True
                    break
                g = tape.backward(total)
                grad += g[: theta.size]
                ep_reports.append(report)
                ok += 1
            if aborted:
                break
            if ok == 0:
                continue
            grad /= ok
            gn = float(np.linalg.norm(grad))
            if cfg.grad_clip > 0 and gn > cfg.grad_clip:
                grad *= cfg.grad_clip / gn
            step += 1
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            mh = m / (1 - beta1**step)
            vh = v / (1 - beta2**step)
            theta = theta - lr * mh / (np.sqrt(vh) + eps_adam)
        if aborted:
            break

        w = w.unpack(theta)
        if n_val:
            val_reports = []
            for i in val_idx:
                try:
                    _, _, report, _ = _plan_pass(plans[int(i)], w, val_eps[int(i)], cfg)
                except DecoderDivergenceError:
                    continue
                val_reports.append(report)
            val_total = (
                float(np.mean([r.total for r in val_reports])) if val_reports else math.inf
            )
        else:
            val_total = float(np.mean([r.total for r in ep_reports])) if ep_reports else math.inf

        if ep_reports:
            logs.append(log_from(ep_reports, epoch, w, val_total))
        if val_total < best_val:
            best_val = val_total
            best_theta = theta.copy()

    final = EncoderWeights.initialize(enc_cfg, T, seed=cfg.seed).unpack(best_theta)
    return final, logs


# ----------------------------------------------------------------------
# corpus generation and audits
# ----------------------------------------------------------------------

def swerve_corpus(count: int, seed: int, T: int = 50, dt: float = 0.1) -> list[MotionPlan]:
    """Synthetic obstacle-avoidance plans at constant forward speed.

    Two maneuver families, half and half: smooth one-sided bows (a gentle
    turn window, like steering wide of something) and sinusoidal dodges
    (bulge off the chord and return).  Swerve depth is filtered into the
    band the fixed decoder can actually reproduce (roughly its clearance
    depth): shallower maneuvers need no obstacle, deeper ones cannot be
    explained by one.  Kinematically consistent and inside action limits
    by construction.
    """
    rng = np.random.default_rng(seed)
    plans: list[MotionPlan] = []
    attempts = 0
    while len(plans) < count:
        attempts += 1
        if attempts > 60 * count:
            raise RuntimeError("swerve corpus rejection rate too high")
        v0 = rng.uniform(0.5, 0.85)
        side = -1.0 if rng.integers(2) else 1.0
        t = np.arange(T) * dt
        if attempts % 2 == 0:
            # bow: constant gentle turn over a broad window
            w_turn = rng.uniform(0.08, 0.35)
            t_a = rng.uniform(0.0, 1.2)
            t_b = t_a + rng.uniform(2.5, T * dt - t_a)
            w = np.where((t >= t_a) & (t <= t_b), side * w_turn, 0.0)
        else:
            # dodge: one sinusoidal heading excursion, bulge and return
            w_peak = rng.uniform(0.7, 1.45)
            period = rng.uniform(1.8, 3.0)
            t0 = rng.uniform(0.4, T * dt - period - 0.4)
            inside = (t >= t0) & (t <= t0 + period)
            w = np.where(inside, side * w_peak * np.cos(2 * math.pi * (t - t0) / period), 0.0)
        plan = MotionPlan.from_controls(dt, np.column_stack([np.full(T, v0), w]))
        if not 0.18 <= swerve_magnitude(plan) <= 0.35:
            continue
        plans.append(plan)
    return plans


def swerve_magnitude(plan: MotionPlan) -> float:
    """Largest |lateral offset| of the path from its start->end chord."""
    chord = plan.positions[-1] - plan.positions[0]
    n = np.linalg.norm(chord)
    if n < 1e-9:
        return 0.0
    u = chord / n
    lat = u[0] * plan.positions[:, 1] - u[1] * plan.positions[:, 0]
    return float(np.max(np.abs(lat)))


def min_plan_distance(plan: MotionPlan, timeline: ObstacleTimeline) -> float:
    """Time-synchronized minimum center distance between obstacles and plan."""
    centers = timeline.positions_at(np.arange(plan.T))
    d = np.hypot(*(centers - plan.positions[:, None, :]).transpose(2, 0, 1))
    return float(d.min())


def sample_clearance_fraction(
    plans: list[MotionPlan],
    w: EncoderWeights,
    draws: int,
    seed: int,
    threshold: float = 0.4,
) -> float:
    """Fraction of posterior draws keeping at least ``threshold`` distance
    (time-synchronized, center to plan position) from their plan."""
    rng = np.random.default_rng(seed)
    ok = 0
    for k in range(draws):
        plan = plans[int(rng.integers(len(plans)))]
        tl = sample_plan_obstacles(plan, w, rng)
        if min_plan_distance(plan, tl) >= threshold:
            ok += 1
    return ok / draws


def explains_swerve_fraction(
    plans: list[MotionPlan], w: EncoderWeights, min_swerve: float = 0.05
) -> float:
    """Fraction of plans whose mean hallucinated start position sits inside
    the swerve's concavity (opposite side of the path from the bulge,
    judged at the spatially nearest path point)."""
    hits, total = 0, 0
    for plan in plans:
        if swerve_magnitude(plan) < min_swerve:
            continue
        mu0 = encode(plan, w).mu[0, :2]
        d = np.hypot(*(plan.positions - mu0).T)
        tc = int(np.argmin(d))
        t0, t1 = (tc, tc + 1) if tc + 1 < plan.T else (tc - 1, tc)
        tang = plan.positions[t1] - plan.positions[t0]
        tn = np.linalg.norm(tang)
        if tn < 1e-9:
            continue
        tang /= tn
        rel = mu0 - plan.positions[tc]
        side = math.copysign(1.0, tang[0] * rel[1] - tang[1] * rel[0])
        chord = plan.positions[-1] - plan.positions[0]
        u = chord / np.linalg.norm(chord)
        lat = u[0] * plan.positions[:, 1] - u[1] * plan.positions[:, 0]
        bulge = math.copysign(1.0, lat[int(np.argmax(np.abs(lat)))])
        total += 1
        if side == -bulge:
            hits += 1
    return hits / max(total, 1)
