"""Command line: ``python -m mcparticles <command>``.

Exit codes: 0 success, 1 input error, 2 divergence, 3 invariant failure.
"""
import argparse
import json
import logging
import os
import sys
import time

import numpy as np

log = logging.getLogger("mcparticles")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_INVARIANT = 0, 1, 2, 3


class InputError(Exception):
    pass


def _set_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:
        pass


def _load_config(path, d=None):
    from .config import RunConfig

    if path is None:
        return RunConfig.defaults(d)
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    return RunConfig.load(path)


def cmd_gen_data(args):
    from . import reference_sph as sph
    from .io import write_dataset

    cfg = _load_config(args.config)
    s = cfg.scene
    if s.kind == "column":
        ds = sph.gen_column_dataset(s.counts, s.frames, cfg.solver, s.gravity)
    elif s.kind == "freefall":
        ds = sph.gen_freefall_dataset(s.counts, s.height, s.frames, cfg.solver, s.gravity)
    else:
        ds = sph.gen_drops2d_dataset(cfg.solver, s.frames, s.drop_radius, s.separation, s.speed,
                                     gravities=((0.0, s.gravity), (0.0, 0.0)))
    manifest = write_dataset(args.out, ds, dict(seed=cfg.seed, config=dict(cfg.items())))
    print(f"wrote {len(manifest['scenes'])} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .io import read_dataset, save_checkpoint
    from .training import train

    cfg = _load_config(args.config)
    if not os.path.isdir(args.data):
        raise InputError(f"dataset directory not found: {args.data}")
    ds = read_dataset(args.data)
    if ds.scenes and ds[0].d != cfg.arch.d:
        raise InputError(f"dataset has d={ds[0].d} but arch.d={cfg.arch.d}")
    os.makedirs(args.out, exist_ok=True)

    def ckpt(params, it):
        save_checkpoint(os.path.join(args.out, f"model_{it:06d}.dmcf"), params, cfg.arch)

    params, history = train(ds, cfg.arch, cfg.train, log_path=os.path.join(args.out, "train_log.csv"),
                            checkpoint=ckpt, kernel_gain=cfg.eval.kernel_gain)
    save_checkpoint(os.path.join(args.out, "model.dmcf"), params, cfg.arch)
    last = history[-1]["loss"] if history else float("nan")
    print(f"trained {cfg.train.iterations} iterations, final loss {last:.6g}")
    return EXIT_OK


def _subsample(scene, ratio, seed):
    """Keep a random fraction ``ratio`` of the fluid particles (boundary kept)."""
    fluid = np.flatnonzero(scene.fluid)
    keep_n = max(1, int(round(ratio * len(fluid))))
    rng = np.random.default_rng(seed)
    keep = np.sort(np.concatenate([rng.choice(fluid, keep_n, replace=False), np.flatnonzero(~scene.fluid)]))
    return keep


def _take(scene, idx):
    from .data import Scene

    return Scene(scene.name, scene.positions[:, idx], scene.velocities[:, idx], scene.types[idx],
                 scene.normals[idx], scene.dt, scene.gravity, scene.particle_radius, scene.masses[idx],
                 dict(scene.meta))


def cmd_simulate(args):
    from .data import Scene
    from .io import load_checkpoint, read_frames, write_frames
    from .simulator import SimulationConfig, SimulationDiverged, step

    cfg = _load_config(args.config)
    params, arch = load_checkpoint(args.checkpoint)
    scene = read_frames(args.initial)
    if not 0 <= args.frame < scene.n_frames:
        raise InputError(f"frame {args.frame} out of range (file has {scene.n_frames})")
    if scene.d != arch.d:
        raise InputError(f"initial frame has d={scene.d} but the checkpoint expects d={arch.d}")
    meta = dict(scene.meta, source=os.path.basename(args.initial), start_frame=args.frame)
    gain = 1.0
    if cfg.eval.sampling_ratio < 1.0:
        idx = _subsample(scene, cfg.eval.sampling_ratio, cfg.seed)
        scene = _take(scene, idx)
        meta["subset"] = idx.tolist()
        gain = cfg.eval.kernel_gain
    sim = SimulationConfig(scene.dt, scene.gravity, scene.particle_radius)
    state = scene.state(args.frame)
    states = [state]
    code = EXIT_OK
    try:
        for i in range(args.steps):
            state = step(state, params, arch, sim, gain)
            if not state.is_finite():
                raise SimulationDiverged(i + 1)
            states.append(state)
    except SimulationDiverged as exc:
        log.error("%s; writing %d frames", exc, len(states))
        meta["diverged_at"] = exc.step
        code = EXIT_DIVERGED
    out = Scene.from_states(scene.name, states, scene.dt, scene.gravity, scene.particle_radius, meta)
    write_frames(args.out, out)
    print(f"wrote {out.n_frames} frames to {args.out}")
    return code


def cmd_eval(args):
    from .io import read_frames
    from .metrics import evaluate

    cfg = _load_config(args.config)
    pred = read_frames(args.pred)
    target = read_frames(args.target)
    subset = pred.meta.get("subset")
    if subset is not None:
        target = _take(target, np.asarray(subset, dtype=np.int64))
    start = int(pred.meta.get("start_frame", 0))
    target_frames = target.positions[start:start + pred.n_frames]
    if pred.n_particles != target.n_particles:
        raise InputError(f"particle count mismatch: {pred.n_particles} vs {target.n_particles}")
    if len(target_frames) < pred.n_frames:
        raise InputError("target has fewer frames than the prediction")
    if not np.array_equal(pred.types, target.types):
        raise InputError("particle types differ between prediction and target")
    noise = args.noise_ratio if args.noise_ratio is not None else cfg.eval.noise_ratio
    ppos = pred.positions.copy()
    if noise > 0:
        rng = np.random.default_rng(cfg.seed)
        ppos[:, pred.fluid] += rng.normal(0.0, noise * pred.particle_radius, size=ppos[:, pred.fluid].shape)
    tvel = target.velocities[start:start + pred.n_frames]
    h = cfg.solver.support_factor * pred.particle_radius
    report = evaluate((ppos, pred.velocities), (target_frames, tvel), pred.dt, pred.gravity, h, pred.masses,
                      pred.fluid, cfg.eval.bins)
    prefix = args.out
    report.write_csv(prefix + ".csv")
    report.write_summary(prefix + ".json")
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_check(args):
    from .selfcheck import run_checks

    t0 = time.perf_counter()
    results = run_checks(corrupt_mirror=args.corrupt_mirror)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    elapsed = time.perf_counter() - t0
    if elapsed > 60:
        log.warning("self-check took %.1f s (budget 60 s)", elapsed)
    print(f"{'all checks passed' if ok else 'invariant failure'} in {elapsed:.1f} s")
    return EXIT_OK if ok else EXIT_INVARIANT


def build_parser():
    p = argparse.ArgumentParser(prog="mcparticles", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed reduction order (the default single-process code path already is)")
    p.add_argument("--dump-defaults", action="store_true", help="print every config key with its default")
    p.add_argument("--dim", type=int, default=None, help="arch.d used for --dump-defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="generate a reference dataset")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="roll a checkpoint out from an initial frame")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--initial", required=True, help="frame file; --frame picks the start frame")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="compare a prediction with a target trajectory")
    e.add_argument("--pred", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--noise-ratio", type=float, default=None)
    e.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.json")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="fast invariant self-check")
    c.add_argument("--corrupt-mirror", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    from .config import ConfigError
    from .io import FormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    if args.dump_defaults:
        from .config import RunConfig

        sys.stdout.write(RunConfig.defaults(args.dim).dump())
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, ConfigError, FormatError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
