"""Command-line front end: ``sfml {generate,train,sweep,evaluate}``.

Exit codes: 0 success, 2 config error, 3 IO error, 4 missing input,
5 training failure, 6 shape mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from sfml import _io
from sfml.config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_TRAIN, EXIT_SHAPE = 0, 2, 3, 4, 5, 6
DEFAULT_OUT = "sfml_out"
# sizes used for the full-scale runs: 10^6 pairs, 1000 batches of 10^4, 1000 epochs
FULL_SCALE = {"sde": {"n_traj": 10_000, "length": 100}, "train": {"n_batches": 1000, "batch_size": 10_000, "epochs": 1000}}

log = logging.getLogger("sfml")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _out_dir(args, cfg):
    if args.out:
        return Path(args.out)
    if cfg.output["dir"]:
        return Path(cfg.output["dir"])
    return Path(os.environ.get("SFML_OUT", DEFAULT_OUT))


def _load(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING, f"config file not found: {args.config}") from None
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
    if args.seed is not None:
        cfg.sde["seed"] = args.seed
    if args.deterministic:
        cfg.train["deterministic"] = True
    if args.full_scale:
        for section, values in FULL_SCALE.items():
            getattr(cfg, section).update(values)
    return cfg


def _write_manifest(out, cfg, command, files):
    """Record resolved config plus a sha256 for every file written by ``command``."""
    (out / "resolved_config.ini").write_text(cfg.to_ini())
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"files": {}}
    manifest["config_sha256"] = hashlib.sha256(cfg.to_ini().encode()).hexdigest()
    for f in [*files, out / "resolved_config.ini"]:
        manifest["files"][Path(f).name] = {"sha256": _io.file_sha256(f), "command": command}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _generate(cfg, out):
    from sfml.dataset import build_pairs
    from sfml.sde import DivergenceError, simulate_trajectories

    bm = cfg.benchmark
    s = cfg.sde
    try:
        data = simulate_trajectories(
            bm.spec,
            s["init_low"] or bm.init_low,
            s["init_high"] or bm.init_high,
            s["n_traj"],
            s["length"],
            s["dt"],
            seed=s["seed"],
        )
    except DivergenceError as exc:
        raise CliError(EXIT_TRAIN, f"data generation diverged: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    store = build_pairs(data)
    files = [out / "trajectories.sfml", out / "pairs.sfml"]
    data.save(files[0])
    store.save(files[1])
    if cfg.output["csv"]:
        files.append(out / "trajectories.csv")
        data.to_csv(files[-1])
    return files, store


def cmd_generate(args):
    cfg = _load(args)
    out = _out_dir(args, cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files, store = _generate(cfg, out)
        _write_manifest(out, cfg, "generate", files)
    except OSError as exc:
        raise CliError(EXIT_IO, f"IO error: {exc}") from None
    print(f"wrote {len(store)} pairs to {out / 'pairs.sfml'}")
    return EXIT_OK


def _load_store(out):
    from sfml.dataset import PairStore

    path = out / "pairs.sfml"
    if not path.exists():
        raise CliError(EXIT_MISSING, f"dataset not found: {path} (run `sfml generate` first)")
    try:
        return PairStore.load(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None


def _set_threads(n):
    if n:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def cmd_train(args):
    from sfml.training import TrainingError, train

    cfg = _load(args)
    out = _out_dir(args, cfg)
    tcfg = cfg.train_config()
    if args.dry_run:
        print(cfg.to_ini())
        return EXIT_OK
    store = _load_store(out)
    _set_threads(args.threads)
    try:
        model, hist = train(store, tcfg)
    except TrainingError as exc:
        raise CliError(EXIT_TRAIN, f"training failed: {exc}") from None
    if tcfg.deterministic:
        for r in hist.records:
            r.seconds = 0.0
    try:
        ckpt, hcsv = out / "model.ckpt", out / "history.csv"
        model.save(ckpt, extra={"train_config": tcfg.as_dict(), "train_config_sha256": tcfg.digest()})
        hist.to_csv(hcsv)
        _write_manifest(out, cfg, "train", [ckpt, hcsv])
    except OSError as exc:
        raise CliError(EXIT_IO, f"IO error: {exc}") from None
    print(f"final mse {hist.final_mse:.3e}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_sweep(args):
    from sfml.training import TrainingError, sweep_latent_dim

    cfg = _load(args)
    out = _out_dir(args, cfg)
    store = _load_store(out)
    _set_threads(args.threads)
    max_nz = args.max_nz or cfg.train["max_nz"]
    written = []

    def save(nz, model, hist):
        p = out / f"model_nz{nz}.ckpt"
        tc = cfg.train_config(nz)
        model.save(p, extra={"train_config": tc.as_dict(), "train_config_sha256": tc.digest()})
        written.append(p)

    try:
        report = sweep_latent_dim(store, cfg.train_config(), max_nz, cfg.train["drop_ratio"], on_model=save)
        rp = out / "sweep.json"
        report.to_json(rp)
        _write_manifest(out, cfg, "sweep", [*written, rp])
    except TrainingError as exc:
        raise CliError(EXIT_TRAIN, f"training failed: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"IO error: {exc}") from None
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def _csv_rows(path, header, rows):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def cmd_evaluate(args):
    from sfml import evaluation as ev
    from sfml.dataset import build_pairs
    from sfml.neural import FmlModel
    from sfml.sde import simulate_trajectories

    cfg = _load(args)
    out = _out_dir(args, cfg)
    ckpt = Path(args.model) if args.model else out / "model.ckpt"
    if not ckpt.exists():
        raise CliError(EXIT_MISSING, f"checkpoint not found: {ckpt}")
    try:
        model, header = FmlModel.load_with_header(ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {ckpt}: {exc}") from None
    bm = cfg.benchmark
    spec = bm.spec
    if model.dim != spec.dim:
        raise CliError(EXIT_SHAPE, f"checkpoint has state dimension {model.dim}, config SDE has {spec.dim}")
    if abs(model.dt - cfg.sde["dt"]) > 1e-12 * max(1.0, cfg.sde["dt"]):
        raise CliError(EXIT_SHAPE, f"checkpoint dt {model.dt} differs from config dt {cfg.sde['dt']}")
    e = cfg.eval
    seed = cfg.seed_for("eval")
    x0 = np.asarray(e["x0"] or bm.x0, dtype=np.float64)
    if x0.shape != (spec.dim,):
        raise CliError(EXIT_SHAPE, f"eval x0 has length {x0.size}, expected {spec.dim}")
    n_steps = e["n_steps"] or cfg.default_eval_steps()
    _set_threads(args.threads)
    out.mkdir(parents=True, exist_ok=True)

    files = []
    stats = ev.rollout_ensemble(model, x0, e["n_samples"], n_steps, seed=seed)
    ref = ev.reference_stats(spec, x0, e["n_samples"], n_steps, model.dt, seed=seed + 1)
    files += [out / "ensemble.csv", out / "reference.csv"]
    stats.to_csv(files[-2])
    ref.to_csv(files[-1])

    lo = np.asarray(e["grid_low"] or cfg.sde["init_low"] or bm.init_low)
    hi = np.asarray(e["grid_high"] or cfg.sde["init_high"] or bm.init_high)
    if lo.shape != (spec.dim,) or hi.shape != (spec.dim,):
        raise CliError(EXIT_SHAPE, "grid bounds must have the state dimension")
    if spec.dim == 1:
        grid = np.linspace(lo[0], hi[0], e["grid_points"])[:, None]
    else:
        t = np.linspace(0.0, 1.0, e["grid_points"])[:, None]
        grid = lo + t * (hi - lo)
    table = ev.recover_drift_diffusion(model, grid, e["n_mc"], e["mode"], seed=seed + 2)
    files.append(out / "drift_diffusion.csv")
    table.to_csv(files[-1])

    cond = ev.conditional_samples(model, x0, e["n_mc"], seed=seed + 3)
    files.append(out / "conditional.csv")
    _csv_rows(files[-1], [f"x_{k + 1}" for k in range(spec.dim)], cond)
    if spec.dim >= 2:
        h, ex, ey = ev.histogram2d(cond)
        files.append(out / "conditional_hist2d.json")
        files[-1].write_text(json.dumps({"density": h.tolist(), "edges_x1": ex.tolist(), "edges_x2": ey.tolist()}))

    # held-out pairs from a fresh simulation for the latent Gaussianity check
    held = build_pairs(
        simulate_trajectories(
            spec,
            cfg.sde["init_low"] or bm.init_low,
            cfg.sde["init_high"] or bm.init_high,
            max(1, e["held_out"] // cfg.sde["length"]),
            cfg.sde["length"],
            cfg.sde["dt"],
            seed=seed + 4,
        )
    )
    z = model.encode(held.x0, held.x1)
    ks = [ev.ks_statistic(z[:, k]) for k in range(model.latent_dim)]

    report = {
        "checkpoint": str(ckpt),
        "checkpoint_header": header,
        "sde": spec.name,
        "x0": x0.tolist(),
        "n_steps": n_steps,
        "n_samples": e["n_samples"],
        "excluded_paths": stats.excluded,
        "terminal_mean": stats.terminal_mean.tolist(),
        "terminal_std": stats.terminal_std.tolist(),
        "reference_terminal_mean": ref.terminal_mean.tolist(),
        "reference_terminal_std": ref.terminal_std.tolist(),
        "drift_diffusion_convention": table.convention,
        "latent_ks": ks,
        "held_out_pairs": len(held),
        "deterministic_components": ev.deterministic_components(cond, model.dt).tolist(),
        "files": {},
    }
    rp = out / "report.json"
    for f in files:
        report["files"][f.name] = _io.file_sha256(f)
    rp.write_text(json.dumps(report, indent=2, sort_keys=True))
    _write_manifest(out, cfg, "evaluate", [*files, rp])
    print(f"latent KS {', '.join(f'{k:.4f}' for k in ks)}; report {rp}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="sfml", description="Autoencoder stochastic flow map learning")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run configuration file")
        sp.add_argument("--out", help="output directory (default: [output] dir, $SFML_OUT, ./sfml_out)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true", help="bit-reproducible outputs (the default)")
        sp.add_argument("--full-scale", action="store_true", help="10^6 pairs, 1000 batches of 10^4, 1000 epochs")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("generate", help="simulate trajectories and build the pair set"))
    t = sub.add_parser("train", help="train encoder and decoder")
    common(t)
    t.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    s = sub.add_parser("sweep", help="latent-dimension sweep")
    common(s)
    s.add_argument("--max-nz", type=int, default=None)
    e = sub.add_parser("evaluate", help="compare a trained model to the true SDE")
    common(e)
    e.add_argument("--model", help="checkpoint path (default: OUT/model.ckpt)")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep, "evaluate": cmd_evaluate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"sfml {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
