"""End-to-end acceptance gate.

Ten numbered criteria, one printed pass/fail line each (written through the
capture so the verdicts are visible in any pytest run). Criteria 6 and 7
share one expensive full-pipeline run (module-scoped fixture).
"""

import time

import numpy as np
import pytest

from capsloc import evalbench as eb
from capsloc import fusenet as fn
from capsloc import magloc as ml
from capsloc import neuralcore as nc
from capsloc import simkit as sk
from capsloc.geometry import (
    Pose,
    Trajectory,
    euler_to_matrix,
    resample_trajectory,
)
from capsloc.neuralcore import Hyperparams


@pytest.fixture
def verdict(capsys):
    def _verdict(num, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {num} ({name}): {detail}"
        with capsys.disabled():
            print(line)
        assert ok, line

    return _verdict


# --- criterion 1: gradient suite --------------------------------------------


def _rel_err(analytic, fd):
    worst = 0.0
    for k in fd:
        denom = max(np.max(np.abs(fd[k])), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic[k] - fd[k])) / denom))
    return worst


def test_criterion_1_gradient_suite(verdict):
    t0 = time.monotonic()
    worst = {"cell": 0.0, "bptt": 0.0, "linear": 0.0, "loss": 0.0, "net": 0.0}

    for trial in range(20):
        rng = np.random.default_rng(np.random.SeedSequence([1000, trial]))

        # LSTM cell (single-step BPTT).
        w = nc.init_lstm_weights(3, 5, rng)
        x = rng.normal(0, 1, 3)
        init = nc.LstmState(h=rng.normal(0, 0.5, 5), c=rng.normal(0, 0.5, 5))
        target = rng.normal(0, 1, 5)
        _, caches = nc.lstm_sequence_forward([x], init, w)
        grads, _, _ = nc.lstm_backward(caches, w, [target])

        def cell_loss(params):
            states, _ = nc.lstm_sequence_forward(
                [x], init, nc.LstmWeights(**params)
            )
            return float(np.dot(target, states[0].h))

        fd = nc.finite_difference_gradient(cell_loss, w.as_dict())
        worst["cell"] = max(worst["cell"], _rel_err(grads, fd))

        # Sequence BPTT.
        xs = [rng.normal(0, 1, 3) for _ in range(5)]
        targets = [rng.normal(0, 1, 5) for _ in range(5)]
        _, caches = nc.lstm_sequence_forward(xs, init, w)
        grads, _, _ = nc.lstm_backward(caches, w, targets)

        def seq_loss(params):
            states, _ = nc.lstm_sequence_forward(
                xs, init, nc.LstmWeights(**params)
            )
            return sum(float(np.dot(d, s.h)) for d, s in zip(targets, states))

        fd = nc.finite_difference_gradient(seq_loss, w.as_dict())
        worst["bptt"] = max(worst["bptt"], _rel_err(grads, fd))

        # Linear head.
        W = rng.normal(0, 0.5, (4, 7))
        b = rng.normal(0, 0.5, 4)
        xl = rng.normal(0, 1, 7)
        dy = rng.normal(0, 1, 4)
        dW, db, dx = nc.linear_backward(xl, W, dy)

        def lin_loss(params):
            y = nc.linear_forward(params["x"], params["W"], params["b"])
            return float(np.dot(dy, y))

        fd = nc.finite_difference_gradient(lin_loss, {"W": W, "b": b, "x": xl})
        worst["linear"] = max(
            worst["linear"], _rel_err({"W": dW, "b": db, "x": dx}, fd)
        )

        # Pose loss.
        pred = rng.normal(0, 1, 6)
        tgt = rng.normal(0, 1, 6)
        beta = float(rng.uniform(0.5, 100.0))
        _, grad = nc.pose_loss(pred, tgt, beta)
        fd = nc.finite_difference_gradient(
            lambda p: nc.pose_loss(p["pred"], tgt, beta)[0], {"pred": pred}
        )
        worst["loss"] = max(worst["loss"], _rel_err({"pred": grad}, fd))

        # Full fusion network (tiny instance: hidden 4, window 3).
        hp = Hyperparams(hidden_size=4, dropout_rate=0.0)
        net = fn.init_network(4, 2, rng)
        window = [
            fn.FusedSample(
                (k + 1) / 25.0,
                rng.normal(0, 1, (2, 5)),
                rng.normal(0, 1, 6),
                rng.normal(0, 1, 6),
            )
            for k in range(3)
        ]
        _, grads = fn._window_loss_and_grads(net, window, 2.5, hp, None)

        def net_loss(params):
            n2 = fn.FusionNetwork.from_params(params, 2)
            loss, _ = fn._window_loss_and_grads(
                n2, window, 2.5, hp, None, training=False
            )
            return loss

        # A slightly larger step keeps float64 cancellation error in the
        # central differences below the 1e-5 relative budget.
        fd = nc.finite_difference_gradient(net_loss, net.params(), step=1e-5)
        worst["net"] = max(worst["net"], _rel_err(grads, fd))

    elapsed = time.monotonic() - t0
    ok = (
        worst["cell"] < 1e-5
        and worst["bptt"] < 1e-5
        and worst["linear"] < 1e-7
        and worst["loss"] < 1e-5
        and worst["net"] < 1e-5
        and elapsed < 60.0
    )
    detail = (
        f"worst rel err cell={worst['cell']:.2e} bptt={worst['bptt']:.2e} "
        f"linear={worst['linear']:.2e} loss={worst['loss']:.2e} "
        f"net={worst['net']:.2e}, 20 instances each in {elapsed:.1f}s"
    )
    verdict(1, "gradient suite", ok, detail)


# --- criterion 2: Adam fidelity ----------------------------------------------


def test_criterion_2_adam_fidelity(verdict):
    hp = Hyperparams()

    # Hand-computed scalar example: w=1, g=2, defaults -> 0.999000.
    params = {"w": np.array([1.0])}
    out, _ = nc.adam_step(params, {"w": np.array([2.0])}, nc.adam_init(params), hp)
    hand_ok = abs(out["w"][0] - 0.999000) < 5e-7

    # First-step magnitude within 1% of alpha across gradient scales.
    worst_dev = 0.0
    for g in np.logspace(-3, 3, 25):
        params = {"w": np.array([0.0])}
        out, _ = nc.adam_step(
            params, {"w": np.array([g])}, nc.adam_init(params), hp
        )
        step = abs(out["w"][0])
        worst_dev = max(worst_dev, abs(step - hp.alpha) / hp.alpha)
    scale_ok = worst_dev < 0.01

    verdict(
        2,
        "Adam fidelity",
        hand_ok and scale_ok,
        f"hand case w'={out['w'][0]:.6f} path ok={hand_ok}, "
        f"first-step deviation <= {worst_dev:.2%} over 1e-3..1e3",
    )


# --- criterion 3: LSTM fidelity ----------------------------------------------


def _naive_cell(x, h_prev, c_prev, w):
    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    hidden = w.W_ix.shape[0]
    h = np.empty(hidden)
    c = np.empty(hidden)
    for k in range(hidden):
        i = sig(np.dot(w.W_ix[k], x) + np.dot(w.W_ih[k], h_prev))
        f = sig(np.dot(w.W_fx[k], x) + np.dot(w.W_fh[k], h_prev))
        g = np.tanh(np.dot(w.W_gx[k], x) + np.dot(w.W_gh[k], h_prev))
        o = sig(np.dot(w.W_ox[k], x) + np.dot(w.W_oh[k], h_prev))
        c[k] = f * c_prev[k] + i * g
        h[k] = o * np.tanh(c[k])
    return h, c


def test_criterion_3_lstm_fidelity(verdict):
    # Zero weights, carried cell state 2.0: gates sit at 0.5, so
    # c' = 0.5 * 2 = 1 and h' = 0.5 * tanh(1) = 0.380797.
    w0 = nc.init_lstm_weights(1, 1, np.random.default_rng(0))
    w0 = nc.LstmWeights(**{k: np.zeros_like(v) for k, v in w0.as_dict().items()})
    state, _ = nc.lstm_cell_forward(
        np.array([7.0]), nc.LstmState(h=np.zeros(1), c=np.array([2.0])), w0
    )
    hand_err = abs(state.h[0] - 0.380797)

    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(np.random.SeedSequence([3000, trial]))
        w = nc.init_lstm_weights(4, 6, rng)
        x = rng.normal(0, 1, 4)
        prev = nc.LstmState(h=rng.normal(0, 1, 6), c=rng.normal(0, 1, 6))
        got, _ = nc.lstm_cell_forward(x, prev, w)
        h_ref, c_ref = _naive_cell(x, prev.h, prev.c, w)
        worst = max(
            worst,
            float(np.max(np.abs(got.h - h_ref))),
            float(np.max(np.abs(got.c - c_ref))),
        )

    ok = hand_err < 1e-6 and worst < 1e-12
    verdict(
        3,
        "LSTM fidelity",
        ok,
        f"hand case |h - 0.380797| = {hand_err:.1e}, "
        f"scalar-oracle max dev = {worst:.1e} over 20 instances",
    )


# --- criterion 4: magnetic inversion -----------------------------------------


def test_criterion_4_magnetic_inversion(verdict):
    dipole = sk.DipoleParams()
    zero_act = sk.ActuatorFieldModel.zero()

    # Noiseless forward-then-invert.
    worst_pos = 0.0
    worst_ang = 0.0
    for trial in range(10):
        rng = np.random.default_rng(np.random.SeedSequence([4000, trial]))
        pose = Pose(
            rng.uniform(-0.04, 0.04, 3) + [0, 0, -0.08],
            rng.uniform(-0.3, 0.3, 3),
        )
        reading = sk.sample_hall_array(pose, dipole, zero_act, 0.0, 0.0, rng)
        h_true = euler_to_matrix(pose.r) @ np.asarray(dipole.moment_axis)
        init = ml.MagMeasurement5DoF(
            0.0,
            np.asarray(pose.t) + rng.normal(0, 2e-3, 3),
            _perturb_heading(h_true, rng, 0.05),
            True,
            0.0,
            0,
        )
        est = ml.estimate_pose_5dof(reading, zero_act, dipole, init)
        worst_pos = max(worst_pos, float(np.linalg.norm(est.position - pose.t)))
        worst_ang = max(
            worst_ang,
            float(np.arccos(np.clip(np.dot(est.heading, h_true), -1, 1))),
        )
    invert_ok = worst_pos < 1e-6 and worst_ang < 1e-5

    # Rotation about the dipole axis is unobservable in the forward field.
    pose = Pose([0.01, -0.02, -0.08], [0.0, 0.2, -0.1])
    base = sk.sample_hall_array(
        pose, dipole, zero_act, 0.0, 0.0, np.random.default_rng(0)
    )
    axis_rot = np.asarray(dipole.moment_axis) * 0.7
    R = euler_to_matrix(pose.r) @ _rotation_about(axis_rot)
    rolled = Pose(pose.t, _euler_of(R))
    spun = sk.sample_hall_array(
        rolled, dipole, zero_act, 0.0, 0.0, np.random.default_rng(0)
    )
    unobs = float(np.max(np.abs(spun.values - base.values)))

    # Streaming localization with default noise stays bounded over 60 s.
    cfg = sk.SimConfig(duration=60.0, seed=41, motion_profile="comprehensive_scan")
    ds = sk.simulate_dataset(cfg)
    ests = ml.localize_stream(
        ds.mag,
        sk.ActuatorFieldModel.from_config(cfg),
        ds.dipole,
        workspace_center=cfg.workspace_center,
        workspace_half_extent=cfg.workspace_half_extent,
    )
    qs = np.minimum([e.timestamp for e in ests], ds.gt.times[-1])
    on_gt = resample_trajectory(ds.gt, qs)
    errs = np.linalg.norm(
        np.array([e.position for e in ests]) - on_gt.poses[:, :3], axis=1
    )
    third = len(errs) // 3
    first, last = np.median(errs[:third]), np.median(errs[-third:])
    bounded_ok = last < 1.5 * first and float(np.percentile(errs, 99)) < 0.05

    ok = invert_ok and unobs < 1e-15 and bounded_ok
    verdict(
        4,
        "magnetic inversion",
        ok,
        f"noiseless err {worst_pos:.1e} m / {worst_ang:.1e} rad, "
        f"axis-spin field change {unobs:.1e} T, streaming median "
        f"{first * 1e3:.2f} -> {last * 1e3:.2f} mm over 60 s",
    )


def _perturb_heading(h, rng, angle):
    v = h + rng.normal(0, angle, 3)
    return v / np.linalg.norm(v)


def _rotation_about(w):
    theta = np.linalg.norm(w)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def _euler_of(R):
    from capsloc.geometry import matrix_to_euler

    return matrix_to_euler(R)


# --- criterion 5: alignment ---------------------------------------------------


def test_criterion_5_alignment(verdict):
    from capsloc import evoalign as ev
    from capsloc.geometry import RigidTransform

    ident = RigidTransform.identity()

    def small_transform(rng, trans=0.02, rot=0.2):
        return RigidTransform(
            euler_to_matrix(rng.uniform(-rot, rot, 3)),
            rng.uniform(-trans, trans, 3),
        )

    def corr_from(T, rng, n=30, noise=0.0):
        pairs = []
        for _ in range(n):
            p1 = np.array([*rng.uniform(-0.2, 0.2, 2), rng.uniform(0.4, 0.7)])
            p0 = T.apply(p1)
            if noise > 0:
                p0 = p0 + rng.normal(0, noise, 3)
            pairs.append((0, 1, p0, p1))
        return ev.CorrespondenceSet(pairs)

    # Two-frame noiseless recovery.
    worst_t = 0.0
    worst_r = 0.0
    for trial in range(5):
        rng = np.random.default_rng(np.random.SeedSequence([5000, trial]))
        T = small_transform(rng)
        state, info = ev.minimize_alignment([], corr_from(T, rng))
        got = state.transforms[1]
        worst_t = max(worst_t, float(np.linalg.norm(got.t - T.t)))
        ang = np.arccos(np.clip((np.trace(got.R.T @ T.R) - 1) / 2, -1, 1))
        worst_r = max(worst_r, float(ang))
    recover_ok = worst_t < 1e-6 and worst_r < 1e-6

    # Gauge invariance of the sparse energy.
    rng = np.random.default_rng(51)
    state = ev.AlignmentState(
        [ident] + [small_transform(rng, 0.1, 0.5) for _ in range(2)]
    )
    pairs = [
        (
            int(rng.integers(0, 3)),
            int(rng.integers(0, 3)),
            rng.normal(0, 0.3, 3),
            rng.normal(0, 0.3, 3),
        )
        for _ in range(20)
    ]
    corr = ev.CorrespondenceSet(pairs)
    base = ev.e_sparse(state, corr)
    G = RigidTransform(euler_to_matrix([0.4, -0.3, 0.9]), np.array([1.0, -2.0, 0.5]))
    moved = ev.AlignmentState(
        [RigidTransform(G.R @ T.R, G.R @ T.t + G.t) for T in state.transforms]
    )
    gauge_dev = abs(ev.e_sparse(moved, corr) - base) / max(1.0, base)

    # Accepted-step energy monotonicity over 100 seeded runs.
    mono_ok = True
    for seed in range(100):
        r = np.random.default_rng(np.random.SeedSequence([5100, seed]))
        T = small_transform(r)
        _, info = ev.minimize_alignment([], corr_from(T, r, n=20, noise=3e-4))
        trace = info["energy_trace"]
        mono_ok = mono_ok and all(
            b <= a + 1e-15 for a, b in zip(trace, trace[1:])
        )

    ok = recover_ok and gauge_dev < 1e-10 and mono_ok
    verdict(
        5,
        "alignment",
        ok,
        f"two-frame err {worst_t:.1e} m / {worst_r:.1e} rad, gauge dev "
        f"{gauge_dev:.1e}, energy monotone on 100 runs: {mono_ok}",
    )


# --- criteria 6+7: full pipeline (shared run) ---------------------------------

TRAIN_SEEDS = (100, 101, 102, 103, 104, 105, 106, 107)
EVAL_SEEDS = (200, 201, 202, 203, 204)
MAX_EPOCHS = 50
HIDDEN = 16


def _localize(ds):
    return ml.localize_stream(
        ds.mag,
        sk.ActuatorFieldModel.from_config(ds.config),
        ds.dipole,
        workspace_center=ds.config.workspace_center,
        workspace_half_extent=ds.config.workspace_half_extent,
    )


@pytest.fixture(scope="module")
def pipeline():
    t0 = time.monotonic()
    train_sets = []
    for seed in TRAIN_SEEDS:
        cfg = sk.SimConfig(duration=30.0, seed=seed, motion_profile="fast_complex")
        ds = sk.simulate_dataset(cfg)
        train_sets.append(
            fn.align_streams(_localize(ds), ds.vis, ds.gt, rate_ratio=cfg.rate_ratio)
        )

    cfg = fn.TrainingConfig(
        max_epochs=MAX_EPOCHS,
        window_length=16,
        early_stop_patience=10,
        warmup_epochs=10,
        seed=0,
    )
    hp = Hyperparams(hidden_size=HIDDEN, dropout_rate=0.1)
    ckpt, log = fn.train(train_sets, cfg, hp)

    eval_sets = []
    for seed in EVAL_SEEDS:
        scfg = sk.SimConfig(duration=75.0, seed=seed, motion_profile="fast_complex")
        ds = sk.simulate_dataset(scfg)
        eval_sets.append(
            {
                "gt": ds.gt,
                "mag_estimates": _localize(ds),
                "vis": ds.vis,
                "dipole_axis": ds.dipole.moment_axis,
            }
        )
    reports = {r.method: r for r in eb.compare_methods(eval_sets, ckpt)}
    return {
        "reports": reports,
        "elapsed": time.monotonic() - t0,
        "epochs": len(log),
    }


def _bucket_map(report):
    return {L: (tr, rr, n) for L, tr, rr, n in report.buckets}


@pytest.mark.slow
def test_criterion_6_fusion_beats_baselines(pipeline, verdict):
    fusion = _bucket_map(pipeline["reports"]["fusion"])
    evo = _bucket_map(pipeline["reports"]["evo_only"])
    mag = _bucket_map(pipeline["reports"]["magnetic_only"])
    lengths = sorted(fusion)

    trans_ok = all(
        fusion[L][0] < min(evo[L][0], mag[L][0]) for L in lengths if L >= 0.2
    )
    longest = lengths[-1]
    rot_ok = fusion[longest][1] < evo[longest][1]
    budget_ok = (
        pipeline["epochs"] <= MAX_EPOCHS
        and HIDDEN == 16
        and pipeline["elapsed"] < 600.0
    )

    rows = ", ".join(
        f"L={L:g}: fus {fusion[L][0] * 1e3:.1f} vs min(evo {evo[L][0] * 1e3:.1f}, "
        f"mag {mag[L][0] * 1e3:.1f}) mm"
        for L in lengths
        if L >= 0.2
    )
    detail = (
        f"{rows}; rot@{longest:g}m fus {fusion[longest][1]:.3f} vs evo "
        f"{evo[longest][1]:.3f} rad; {pipeline['epochs']} epochs, hidden {HIDDEN}, "
        f"{pipeline['elapsed']:.0f}s"
    )
    verdict(6, "fusion beats baselines", trans_ok and rot_ok and budget_ok, detail)


@pytest.mark.slow
def test_criterion_7_error_shape(pipeline, verdict):
    evo = _bucket_map(pipeline["reports"]["evo_only"])
    mag = _bucket_map(pipeline["reports"]["magnetic_only"])
    lengths = sorted(evo)

    evo_trans = [evo[L][0] for L in lengths]
    evo_ok = all(b > a for a, b in zip(evo_trans, evo_trans[1:]))

    mag_trans = [mag[L][0] for L in lengths]
    spread = (max(mag_trans) - min(mag_trans)) / min(mag_trans)
    mag_ok = spread < 0.20

    verdict(
        7,
        "error shape",
        evo_ok and mag_ok,
        f"evo trans {['%.1f' % (x * 1e3) for x in evo_trans]} mm increasing="
        f"{evo_ok}; mag trans spread {spread:.1%} (< 20%)",
    )


# --- criterion 8: asynchrony / asymmetry contract ------------------------------


def test_criterion_8_asynchrony_contract(verdict):
    # Rate-ratio bucketing invariant over simulated datasets.
    contract_ok = True
    for profile in ("slow_incremental", "comprehensive_scan", "fast_complex"):
        for seed in (0, 1):
            cfg = sk.SimConfig(duration=8.0, seed=seed, motion_profile=profile)
            ds = sk.simulate_dataset(cfg)
            mag = [
                ml.MagMeasurement5DoF(
                    m.timestamp, np.array([0.0, 0.0, -0.08]),
                    np.array([1.0, 0.0, 0.0]), True, 0.0, 1,
                )
                for m in ds.mag
            ]
            samples = fn.align_streams(mag, ds.vis, ds.gt, rate_ratio=cfg.rate_ratio)
            contract_ok = contract_ok and all(
                s.mag_inputs.shape == (cfg.rate_ratio, 5) for s in samples
            )

    # Training and inference on a real asymmetric dataset, end to end:
    # 50 Hz 5-input magnetic and 25 Hz 6-input visual, 6-output head.
    cfg = sk.SimConfig(duration=10.0, seed=8, motion_profile="comprehensive_scan")
    ds = sk.simulate_dataset(cfg)
    ests = _localize(ds)
    samples = fn.align_streams(ests, ds.vis, ds.gt, rate_ratio=cfg.rate_ratio)
    tcfg = fn.TrainingConfig(
        max_epochs=3, window_length=8, early_stop_patience=10,
        warmup_epochs=1, seed=0,
    )
    ckpt, _ = fn.train([samples], tcfg, Hyperparams(hidden_size=4, dropout_rate=0.0))
    net = ckpt.network()
    shape_ok = (
        net.mag_lstm.input_size == 5
        and net.vis_lstm.input_size == 6
        and net.head_W.shape[0] == 6
    )
    traj = fn.predict_trajectory(
        ckpt, ests, ds.vis, Pose(ds.gt.poses[0][:3], ds.gt.poses[0][3:])
    )
    infer_ok = len(traj.times) == len(
        fn.align_streams(ests, ds.vis, rate_ratio=cfg.rate_ratio)
    )

    ok = contract_ok and shape_ok and infer_ok
    verdict(
        8,
        "asynchrony contract",
        ok,
        f"rate contract on 6 datasets: {contract_ok}; 5-in mag / 6-in vis / "
        f"6-out head: {shape_ok}; stream inference: {infer_ok}",
    )


# --- criterion 9: determinism and persistence ----------------------------------


def test_criterion_9_determinism_persistence(verdict, tmp_path):
    # Bit-identical datasets from the same seed.
    cfg = sk.SimConfig(duration=6.0, seed=99, motion_profile="comprehensive_scan")
    a = sk.simulate_dataset(cfg)
    b = sk.simulate_dataset(cfg)
    data_ok = (
        np.array_equal(a.gt.poses, b.gt.poses)
        and all(
            np.array_equal(x.values, y.values) for x, y in zip(a.mag, b.mag)
        )
        and all(
            np.array_equal(x.delta.as_vector(), y.delta.as_vector())
            for x, y in zip(a.vis, b.vis)
        )
    )

    # Bit-identical training logs and checkpoints.
    mag = [
        ml.MagMeasurement5DoF(
            m.timestamp, np.array([0.0, 0.0, -0.08]),
            np.array([1.0, 0.0, 0.0]), True, 0.0, 1,
        )
        for m in a.mag
    ]
    samples = fn.align_streams(mag, a.vis, a.gt, rate_ratio=cfg.rate_ratio)
    tcfg = fn.TrainingConfig(
        max_epochs=4, window_length=8, early_stop_patience=10,
        warmup_epochs=1, seed=3,
    )
    hp = Hyperparams(hidden_size=4, dropout_rate=0.25)
    ck1, log1 = fn.train([samples], tcfg, hp)
    ck2, log2 = fn.train([samples], tcfg, hp)
    train_ok = log1 == log2 and all(
        np.array_equal(ck1.params[k], ck2.params[k]) for k in ck1.params
    )

    # Checkpoint round-trip preserves predictions exactly.
    path = tmp_path / "ckpt.txt"
    fn.save_checkpoint(path, ck1)
    loaded = fn.load_checkpoint(path)
    p0 = fn.predict_trajectory(ck1, mag, a.vis, Pose.identity())
    p1 = fn.predict_trajectory(loaded, mag, a.vis, Pose.identity())
    rt_ok = np.array_equal(p0.poses, p1.poses)

    ok = data_ok and train_ok and rt_ok
    verdict(
        9,
        "determinism and persistence",
        ok,
        f"datasets bit-identical: {data_ok}; logs+checkpoints identical: "
        f"{train_ok}; round-trip predictions exact: {rt_ok}",
    )


# --- criterion 10: training smoke test -----------------------------------------


def test_criterion_10_training_smoke(verdict):
    # Noise-free slow_incremental dataset: the motion is smooth and tiny, so
    # training must be able to drive the loss down by >= 90%.
    cfg = sk.SimConfig(
        duration=16.0,
        seed=10,
        motion_profile="slow_incremental",
        mag_noise_sd=0.0,
        vis_trans_noise_sd=0.0,
        vis_rot_noise_sd=0.0,
        vis_drift_rate=0.0,
        vis_rot_drift_rate=0.0,
        vis_trans_bias_rate=0.0, vis_rot_bias_rate=0.0,
        jitter_scale=0.0,
    )
    ds = sk.simulate_dataset(cfg)
    qs = np.minimum([m.timestamp for m in ds.mag], ds.gt.times[-1])
    on_gt = resample_trajectory(ds.gt, qs)
    axis = np.asarray(ds.dipole.moment_axis)
    mag = [
        ml.MagMeasurement5DoF(
            m.timestamp, p[:3],
            euler_to_matrix(p[3:]) @ axis, True, 0.0, 1,
        )
        for m, p in zip(ds.mag, on_gt.poses)
    ]
    samples = fn.align_streams(mag, ds.vis, ds.gt, rate_ratio=cfg.rate_ratio)
    tcfg = fn.TrainingConfig(
        max_epochs=50, window_length=16, early_stop_patience=50,
        warmup_epochs=10, seed=0,
    )
    _, log = fn.train(
        [samples], tcfg, Hyperparams(hidden_size=16, dropout_rate=0.0, alpha=3e-3)
    )
    losses = [r["train_loss"] for r in log]
    drop = 1.0 - min(losses) / losses[0]
    drop_ok = drop >= 0.90 and len(losses) <= 50

    # Early stopping fires within patience+1 epochs of validation increase.
    constant = [
        fn.FusedSample(
            (k + 1) / 25.0, np.zeros((2, 5)), np.zeros(6),
            np.array([1e-3, 0, 0, 0, 0, 2e-3]),
        )
        for k in range(64)
    ]
    pcfg = fn.TrainingConfig(
        max_epochs=50, window_length=8, early_stop_patience=3,
        warmup_epochs=0, seed=1,
    )
    _, plog = fn.train(
        [constant], pcfg, Hyperparams(hidden_size=4, dropout_rate=0.0, alpha=10.0)
    )
    best_epoch = int(np.argmin([r["val_loss"] for r in plog])) + 1
    stopped = max(r["epoch"] for r in plog)
    # Stops exactly `patience` epochs after the last validation improvement.
    stop_ok = stopped == best_epoch + 3 and stopped < 50

    # Beta calibration returns the documented ratio on constructed residuals.
    net = fn.init_network(4, 2, np.random.default_rng(0))
    zero = fn.FusionNetwork.from_params(
        {k: np.zeros_like(v) for k, v in net.params().items()}, 2
    )
    stats = fn.NormStats(
        np.zeros(5), np.ones(5), np.zeros(6), np.ones(6), np.zeros(6), np.ones(6)
    )
    val = [
        fn.FusedSample(
            (k + 1) / 25.0, np.zeros((2, 5)), np.zeros(6),
            np.array([0.01, 0, 0, 1e-4, 0, 0]),
        )
        for k in range(10)
    ]
    beta, flagged = fn.calibrate_beta(zero, val, stats)
    beta_ok = abs(beta - 100.0) < 1e-9 and not flagged

    ok = drop_ok and stop_ok and beta_ok
    verdict(
        10,
        "training smoke",
        ok,
        f"loss drop {drop:.1%} in {len(losses)} epochs; early stop by epoch "
        f"{max(r['epoch'] for r in plog)}; calibrated beta {beta:g}",
    )
