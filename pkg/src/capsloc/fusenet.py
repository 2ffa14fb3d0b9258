"""Multi-rate LSTM sensor fusion network and its training loop.

Architecture per fused step: the magnetic LSTM consumes its rate_ratio
5-vectors (absolute position + heading spherical angles, z-scored)
sequentially and contributes its final hidden state; the visual LSTM
consumes one 6-vector delta; the concatenated hidden states (after dropout
when training) feed the core LSTM, whose hidden state a linear head maps to
a 6-DoF delta. All LSTM states persist across fused steps, which is what
lets the network carry sensor history across the asynchronous streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose, Trajectory, apply_relative, relative_pose, resample_trajectory
from .magloc import MagMeasurement5DoF, angles_from_heading
from .neuralcore import (
    GATES,
    AdamState,
    Hyperparams,
    LstmState,
    LstmWeights,
    adam_init,
    adam_step,
    dropout,
    init_lstm_weights,
    linear_backward,
    linear_forward,
    lstm_backward,
    lstm_cell_backward,
    lstm_cell_forward,
    pose_loss,
    zero_lstm_grads,
)
from .simkit import VisMeasurement

__all__ = [
    "FusionNetwork",
    "FusedSample",
    "NormStats",
    "TrainingConfig",
    "Checkpoint",
    "AlignmentError",
    "init_network",
    "align_streams",
    "compute_norm_stats",
    "forward",
    "backward",
    "calibrate_beta",
    "train",
    "predict_trajectory",
    "save_checkpoint",
    "load_checkpoint",
]

MAG_INPUT = 5
VIS_INPUT = 6
OUT_DIM = 6

CHECKPOINT_VERSION = "capsloc-checkpoint v1"


class AlignmentError(ValueError):
    """Streams do not overlap / no complete fused interval exists."""


@dataclass
class FusionNetwork:
    mag_lstm: LstmWeights
    vis_lstm: LstmWeights
    core_lstm: LstmWeights
    head_W: np.ndarray
    head_b: np.ndarray
    rate_ratio: int = 2

    @property
    def hidden_size(self) -> int:
        return self.mag_lstm.hidden_size

    def params(self) -> dict:
        d = {}
        d.update(self.mag_lstm.as_dict("mag."))
        d.update(self.vis_lstm.as_dict("vis."))
        d.update(self.core_lstm.as_dict("core."))
        d["head.W"] = self.head_W
        d["head.b"] = self.head_b
        return d

    @staticmethod
    def from_params(params: dict, rate_ratio: int) -> "FusionNetwork":
        return FusionNetwork(
            LstmWeights.from_dict(params, "mag."),
            LstmWeights.from_dict(params, "vis."),
            LstmWeights.from_dict(params, "core."),
            params["head.W"],
            params["head.b"],
            rate_ratio,
        )


def init_network(hidden_size: int, rate_ratio: int, rng) -> FusionNetwork:
    mag = init_lstm_weights(MAG_INPUT, hidden_size, rng)
    vis = init_lstm_weights(VIS_INPUT, hidden_size, rng)
    core = init_lstm_weights(2 * hidden_size, hidden_size, rng)
    bound = 1.0 / np.sqrt(hidden_size)
    head_W = rng.uniform(-bound, bound, size=(OUT_DIM, hidden_size))
    head_b = np.zeros(OUT_DIM)
    return FusionNetwork(mag, vis, core, head_W, head_b, rate_ratio)


@dataclass
class FusedSample:
    timestamp: float
    mag_inputs: np.ndarray  # (rate_ratio, 5) raw (unnormalized)
    vis_input: np.ndarray  # (6,) raw
    target: np.ndarray = None  # (6,) raw delta pose, training only


def _mag_vector(m: MagMeasurement5DoF) -> np.ndarray:
    theta, phi = angles_from_heading(m.heading)
    return np.concatenate([m.position, [theta, phi]])


def align_streams(mag, vis, gt: Trajectory | None = None, rate_ratio: int = 2):
    """Bucket magnetic measurements by visual inter-frame interval.

    One FusedSample per visual measurement whose preceding interval contains
    exactly rate_ratio magnetic samples (timestamps in (t_prev, t_k]); other
    visual frames are dropped. No interpolation anywhere."""
    if not mag or not vis:
        raise AlignmentError("both streams must be nonempty")
    mag_ts = np.array([m.timestamp for m in mag])
    out = []
    prev_t = vis[0].timestamp - (vis[1].timestamp - vis[0].timestamp) if len(vis) > 1 \
        else vis[0].timestamp - 1.0 / 25.0
    eps = 1e-9
    for k, v in enumerate(vis):
        lo = np.searchsorted(mag_ts, prev_t + eps, side="left")
        hi = np.searchsorted(mag_ts, v.timestamp + eps, side="left")
        if hi - lo == rate_ratio:
            mag_block = np.stack([_mag_vector(mag[i]) for i in range(lo, hi)])
            target = None
            if gt is not None:
                t0 = max(prev_t, gt.times[0])
                pair = resample_trajectory(gt, [t0, v.timestamp])
                target = relative_pose(pair.pose(0), pair.pose(1)).as_vector()
            out.append(
                FusedSample(v.timestamp, mag_block, v.delta.as_vector(), target)
            )
        prev_t = v.timestamp
    if not out:
        raise AlignmentError("streams do not overlap in any complete interval")
    return out


@dataclass
class NormStats:
    """Per-channel z-score statistics computed on the training split."""

    mag_mean: np.ndarray
    mag_sd: np.ndarray
    vis_mean: np.ndarray
    vis_sd: np.ndarray
    target_mean: np.ndarray
    target_sd: np.ndarray

    def normalize_sample(self, s: FusedSample) -> FusedSample:
        target = None
        if s.target is not None:
            target = (s.target - self.target_mean) / self.target_sd
        return FusedSample(
            s.timestamp,
            (s.mag_inputs - self.mag_mean) / self.mag_sd,
            (s.vis_input - self.vis_mean) / self.vis_sd,
            target,
        )

    def denormalize_output(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_sd + self.target_mean


def compute_norm_stats(samples) -> NormStats:
    mags = np.concatenate([s.mag_inputs for s in samples], axis=0)
    viss = np.stack([s.vis_input for s in samples])
    tgts = np.stack([s.target for s in samples if s.target is not None])

    def stats(a):
        mean = a.mean(axis=0)
        sd = np.maximum(a.std(axis=0), 1e-8)
        return mean, sd

    mm, ms = stats(mags)
    vm, vs = stats(viss)
    tm, ts = stats(tgts)
    return NormStats(mm, ms, vm, vs, tm, ts)


def forward(
    net: FusionNetwork,
    samples,
    initial_states=None,
    training: bool = False,
    rng=None,
    dropout_rate: float = 0.0,
):
    """Run the fusion network over normalized fused samples.

    Returns (outputs (N, 6), caches, final_states). States persist across
    steps; feeding a window in chunks with carried states is equivalent."""
    hs = net.hidden_size
    if initial_states is None:
        states = {
            "mag": LstmState.zeros(hs),
            "vis": LstmState.zeros(hs),
            "core": LstmState.zeros(hs),
        }
    else:
        states = dict(initial_states)
    outputs = []
    caches = []
    for s in samples:
        mag_caches = []
        for r in range(net.rate_ratio):
            states["mag"], cache = lstm_cell_forward(
                s.mag_inputs[r], states["mag"], net.mag_lstm
            )
            mag_caches.append(cache)
        states["vis"], vis_cache = lstm_cell_forward(
            s.vis_input, states["vis"], net.vis_lstm
        )
        z = np.concatenate([states["mag"].h, states["vis"].h])
        if training and dropout_rate > 0:
            z_dropped, mask = dropout(z, dropout_rate, rng, training=True)
        else:
            z_dropped, mask = z, np.ones_like(z)
        states["core"], core_cache = lstm_cell_forward(
            z_dropped, states["core"], net.core_lstm
        )
        y = linear_forward(states["core"].h, net.head_W, net.head_b)
        outputs.append(y)
        caches.append((mag_caches, vis_cache, core_cache, mask, states["core"].h))
    return np.array(outputs), caches, states


def backward(net: FusionNetwork, caches, dy_list):
    """BPTT through the full fusion network.

    dy_list holds the upstream gradient on each step's 6-vector output.
    Returns a dict of parameter gradients matching net.params()."""
    hs = net.hidden_size
    grads = {f"mag.{k}": v for k, v in zero_lstm_grads(net.mag_lstm).items()}
    grads.update({f"vis.{k}": v for k, v in zero_lstm_grads(net.vis_lstm).items()})
    grads.update({f"core.{k}": v for k, v in zero_lstm_grads(net.core_lstm).items()})
    grads["head.W"] = np.zeros_like(net.head_W)
    grads["head.b"] = np.zeros_like(net.head_b)

    mag_g = {k: grads[f"mag.{k}"] for k in zero_lstm_grads(net.mag_lstm)}
    vis_g = {k: grads[f"vis.{k}"] for k in zero_lstm_grads(net.vis_lstm)}
    core_g = {k: grads[f"core.{k}"] for k in zero_lstm_grads(net.core_lstm)}

    dh = {k: np.zeros(hs) for k in ("mag", "vis", "core")}
    dc = {k: np.zeros(hs) for k in ("mag", "vis", "core")}

    for t in range(len(caches) - 1, -1, -1):
        mag_caches, vis_cache, core_cache, mask, core_h = caches[t]
        dy = np.asarray(dy_list[t], dtype=float)
        dW, db, dh_core_head = linear_backward(core_h, net.head_W, dy)
        grads["head.W"] += dW
        grads["head.b"] += db
        dz, dh["core"], dc["core"] = lstm_cell_backward(
            core_cache, net.core_lstm, dh["core"] + dh_core_head, dc["core"], core_g
        )
        dz = dz * mask
        dh["mag"] += dz[:hs]
        dh["vis"] += dz[hs:]
        _, dh["vis"], dc["vis"] = lstm_cell_backward(
            vis_cache, net.vis_lstm, dh["vis"], dc["vis"], vis_g
        )
        for r in range(len(mag_caches) - 1, -1, -1):
            _, dh["mag"], dc["mag"] = lstm_cell_backward(
                mag_caches[r], net.mag_lstm, dh["mag"], dc["mag"], mag_g
            )
    return grads


@dataclass(frozen=True)
class TrainingConfig:
    max_epochs: int = 200
    window_length: int = 32
    early_stop_patience: int = 10
    validation_fraction: float = 0.25
    seed: int = 0
    warmup_epochs: int = 10  # beta fixed to 1 during warm-up
    beta_clamp: tuple = (1.0, 1000.0)
    # Per-epoch multiplier on the initial learning rate. The pose loss uses
    # unsquared norms, so gradient magnitudes do not vanish near an optimum;
    # without decay the parameters keep random-walking at a step-size-
    # dependent amplitude instead of settling.
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.window_length < 2:
            raise ValueError("window_length must be >= 2")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


@dataclass
class Checkpoint:
    params: dict
    rate_ratio: int
    hyperparams: Hyperparams
    stats: NormStats
    beta_loss: float
    version: str = CHECKPOINT_VERSION

    def network(self) -> FusionNetwork:
        return FusionNetwork.from_params(self.params, self.rate_ratio)


def _windows(samples, window_length):
    return [
        samples[k : k + window_length]
        for k in range(0, len(samples) - window_length + 1, window_length)
    ]


def _window_loss_and_grads(net, window, beta, hp, rng, training=True):
    outputs, caches, _ = forward(
        net, window, training=training, rng=rng, dropout_rate=hp.dropout_rate
    )
    total = 0.0
    dys = []
    for y, s in zip(outputs, window):
        loss, dy = pose_loss(y, s.target, beta)
        total += loss
        dys.append(dy)
    grads = backward(net, caches, dys) if training else None
    return total, grads


def _eval_loss(net, windows, beta, hp):
    total = 0.0
    count = 0
    for w in windows:
        loss, _ = _window_loss_and_grads(net, w, beta, hp, None, training=False)
        total += loss
        count += len(w)
    return total / max(count, 1)


def calibrate_beta(net: FusionNetwork, val_samples, stats: NormStats,
                   clamp=(1.0, 1000.0)):
    """beta = mean translational / mean rotational residual norm over the
    validation set (raw units); clamped. Returns (beta, flagged)."""
    outputs, _, _ = forward(net, val_samples, training=False)
    trans, rot = [], []
    for y, s in zip(outputs, val_samples):
        pred = stats.denormalize_output(y)
        tgt = stats.denormalize_output(np.asarray(s.target))
        trans.append(np.linalg.norm(pred[:3] - tgt[:3]))
        rot.append(np.linalg.norm(pred[3:] - tgt[3:]))
    mean_trans = float(np.mean(trans))
    mean_rot = float(np.mean(rot))
    if mean_rot == 0.0:
        return clamp[1], True
    beta = mean_trans / mean_rot
    return float(min(max(beta, clamp[0]), clamp[1])), False


def train(datasets, cfg: TrainingConfig, hp: Hyperparams):
    """Train on per-trajectory sample lists; held-out trajectories validate.

    datasets: list of lists of FusedSample (raw units, targets present).
    Returns (Checkpoint, log) where log is a list of per-epoch dicts."""
    if not datasets:
        raise ValueError("need at least one training dataset")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF05E]))

    n_val = max(1, int(round(len(datasets) * cfg.validation_fraction)))
    if len(datasets) == 1:
        # Single trajectory: fall back to a window-level split.
        all_raw = datasets[0]
        cut = max(cfg.window_length, int(len(all_raw) * 0.75))
        train_sets, val_sets = [all_raw[:cut]], [all_raw[cut:]]
        if len(val_sets[0]) < 2:
            val_sets = [all_raw[-cfg.window_length:]]
    else:
        train_sets = datasets[: len(datasets) - n_val]
        val_sets = datasets[len(datasets) - n_val:]

    stats = compute_norm_stats([s for ds in train_sets for s in ds])
    train_norm = [[stats.normalize_sample(s) for s in ds] for ds in train_sets]
    val_norm = [[stats.normalize_sample(s) for s in ds] for ds in val_sets]

    train_windows = [w for ds in train_norm for w in _windows(ds, cfg.window_length)]
    val_windows = [w for ds in val_norm for w in _windows(ds, cfg.window_length)]
    if not train_windows or not val_windows:
        raise ValueError("not enough samples for the configured window length")
    val_flat = [s for w in val_windows for s in w]

    net = init_network(hp.hidden_size, datasets[0][0].mag_inputs.shape[0], rng)
    params = net.params()
    adam = adam_init(params)
    beta = 1.0
    beta_flagged = False

    log = []
    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_beta = beta
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        lr = hp.alpha * cfg.lr_decay ** (epoch - 1)
        hp_epoch = replace(hp, alpha=lr)
        if epoch == cfg.warmup_epochs + 1:
            beta, beta_flagged = calibrate_beta(
                net, val_flat, stats, cfg.beta_clamp
            )
        order = rng.permutation(len(train_windows))
        train_loss = 0.0
        n_steps = 0
        for wi in order:
            window = train_windows[wi]
            loss, grads = _window_loss_and_grads(net, window, beta, hp, rng)
            if not np.isfinite(loss):
                ckpt = Checkpoint(best_params, net.rate_ratio, hp, stats, best_beta)
                log.append({"epoch": epoch, "aborted": "non-finite loss"})
                return ckpt, log
            params, adam = adam_step(params, grads, adam, hp_epoch)
            net = FusionNetwork.from_params(params, net.rate_ratio)
            train_loss += loss
            n_steps += len(window)
        train_loss /= n_steps
        val_loss = _eval_loss(net, val_windows, beta, hp)
        log.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "beta": beta,
                "lr": lr,
            }
        )
        if val_loss < best_val - 1e-15:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            best_beta = beta
            bad_epochs = 0
        else:
            bad_epochs += 1
            if epoch > cfg.warmup_epochs and bad_epochs >= cfg.early_stop_patience:
                break

    hp_final = replace(hp, beta_loss=best_beta)
    return Checkpoint(best_params, net.rate_ratio, hp_final, stats, best_beta), log


def write_training_log(path, log) -> None:
    with open(path, "w") as f:
        f.write("# epoch train_loss val_loss beta lr\n")
        for rec in log:
            if "aborted" in rec:
                f.write(f"# aborted at epoch {rec['epoch']}: {rec['aborted']}\n")
                continue
            f.write(
                f"{rec['epoch']} {rec['train_loss']!r} {rec['val_loss']!r} "
                f"{rec['beta']!r} {rec['lr']!r}\n"
            )


def predict_trajectory(
    ckpt: Checkpoint, mag, vis, initial_pose: Pose
) -> Trajectory:
    """align_streams -> inference forward -> de-normalize -> integrate."""
    net = ckpt.network()
    samples = align_streams(mag, vis, gt=None, rate_ratio=ckpt.rate_ratio)
    normed = [ckpt.stats.normalize_sample(s) for s in samples]
    outputs, _, _ = forward(net, normed, training=False)
    times = []
    poses = []
    pose = initial_pose
    for y, s in zip(outputs, samples):
        delta = Pose.from_vector(ckpt.stats.denormalize_output(y))
        pose = apply_relative(pose, delta)
        times.append(s.timestamp)
        poses.append(pose.as_vector())
    return Trajectory(np.array(times), np.array(poses))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "w") as f:
        f.write(f"# {ckpt.version}\n")
        hp = ckpt.hyperparams
        f.write(
            f"HP alpha={hp.alpha!r} beta1={hp.beta1!r} beta2={hp.beta2!r} "
            f"epsilon={hp.epsilon!r} beta_loss={hp.beta_loss!r} "
            f"dropout_rate={hp.dropout_rate!r} hidden_size={hp.hidden_size}\n"
        )
        f.write(f"META rate_ratio={ckpt.rate_ratio} beta_loss={ckpt.beta_loss!r}\n")
        st = ckpt.stats
        for name, arr in (
            ("mag_mean", st.mag_mean), ("mag_sd", st.mag_sd),
            ("vis_mean", st.vis_mean), ("vis_sd", st.vis_sd),
            ("target_mean", st.target_mean), ("target_sd", st.target_sd),
        ):
            f.write(f"STAT {name} " + " ".join(repr(float(v)) for v in arr) + "\n")
        for name, arr in sorted(ckpt.params.items()):
            dims = "x".join(str(d) for d in arr.shape)
            vals = " ".join(repr(float(v)) for v in arr.ravel())
            f.write(f"W {name} {dims} {vals}\n")


def load_checkpoint(path) -> Checkpoint:
    hp_kv = meta_kv = None
    stats_arrays = {}
    params = {}
    with open(path) as f:
        first = f.readline().strip()
        if first != f"# {CHECKPOINT_VERSION}":
            raise ValueError(f"unsupported checkpoint version: {first!r}")
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind, rest = line.split(" ", 1)
            if kind == "HP":
                hp_kv = dict(tok.split("=") for tok in rest.split())
            elif kind == "META":
                meta_kv = dict(tok.split("=") for tok in rest.split())
            elif kind == "STAT":
                name, vals = rest.split(" ", 1)
                stats_arrays[name] = np.array([float(v) for v in vals.split()])
            elif kind == "W":
                name, dims, vals = rest.split(" ", 2)
                shape = tuple(int(d) for d in dims.split("x"))
                params[name] = np.array([float(v) for v in vals.split()]).reshape(shape)
            else:
                raise ValueError(f"unknown checkpoint record {kind!r}")
    if hp_kv is None or meta_kv is None:
        raise ValueError("corrupt checkpoint: missing HP/META records")
    hp = Hyperparams(
        alpha=float(hp_kv["alpha"]),
        beta1=float(hp_kv["beta1"]),
        beta2=float(hp_kv["beta2"]),
        epsilon=float(hp_kv["epsilon"]),
        beta_loss=float(hp_kv["beta_loss"]),
        dropout_rate=float(hp_kv["dropout_rate"]),
        hidden_size=int(hp_kv["hidden_size"]),
    )
    stats = NormStats(
        stats_arrays["mag_mean"], stats_arrays["mag_sd"],
        stats_arrays["vis_mean"], stats_arrays["vis_sd"],
        stats_arrays["target_mean"], stats_arrays["target_sd"],
    )
    return Checkpoint(
        params, int(meta_kv["rate_ratio"]), hp, stats, float(meta_kv["beta_loss"])
    )
