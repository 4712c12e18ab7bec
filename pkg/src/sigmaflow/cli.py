"""The ``flow`` command line: run flows, fit metrics, train and evaluate the
metric operator, generate data, and dump spectral diagnostics.

Exit codes: 0 success, 1 usage error, 2 validation error (bad inputs or
files), 3 numerical failure.  Every subcommand that writes results echoes
its complete configuration into the output directory for provenance, writes
atomically, and is reproducible byte-for-byte from the same configuration
and seed.  ``--threads`` caps BLAS thread pools (set before numpy loads);
results are independent of it.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _set_thread_env(argv):
    for i, a in enumerate(argv):
        n = None
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
        if n is not None:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ.setdefault(var, str(n))
            return


def build_parser():
    p = _Parser(prog="flow", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads inside library calls")
    sub = p.add_subparsers(dest="command", metavar="command")
    subparsers = {}

    def common(sp):
        sp.add_argument("--config", default=None,
                        help="config file supplying option defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None)

    def flow_opts(sp):
        sp.add_argument("--alpha", type=float, default=1.0)
        sp.add_argument("--m2", type=float, default=0.0)
        sp.add_argument("--epsilon", type=float, default=0.0)
        sp.add_argument("--T", type=float, default=2.0)
        sp.add_argument("--integrator", default="euler",
                        choices=["euler", "rk4", "adaptive"])
        sp.add_argument("--step", type=float, default=0.2)
        sp.add_argument("--rtol", type=float, default=1e-6)
        sp.add_argument("--atol", type=float, default=1e-6)
        sp.add_argument("--metric-refresh", default="stage",
                        choices=["stage", "step"])

    sp = subparsers["run"] = sub.add_parser("run", help="integrate a flow and dump diagnostics")
    common(sp)
    flow_opts(sp)
    sp.add_argument("--init", default=None, help="initial state (AMF1 file)")
    sp.add_argument("--no-validate", action="store_true",
                    help="skip invariant checks when reading field files")
    sp.add_argument("--demo-init", default=None, choices=["torus"],
                    help="built-in initial state")
    sp.add_argument("--H", type=int, default=24)
    sp.add_argument("--W", type=int, default=24)
    sp.add_argument("--metric-file", default=None, help="MTF1 metric field")
    sp.add_argument("--ckpt", default=None, help="learned operator checkpoint")
    sp.add_argument("--structure-tensor", default=None, metavar="RHO,SIGMA[,FN]",
                    help="structure-tensor metric source")
    sp.add_argument("--record-every", type=int, default=1)

    sp = subparsers["torus-demo"] = sub.add_parser("torus-demo",
                        help="embedded-torus study (4 labels, flat metric)")
    common(sp)
    flow_opts(sp)
    sp.add_argument("--H", type=int, default=16)
    sp.add_argument("--W", type=int, default=16)
    sp.add_argument("--record-every", type=int, default=5)

    sp = subparsers["spectrum"] = sub.add_parser("spectrum", help="Laplace-Beltrami spectrum and the "
                                         "low-frequency set")
    common(sp)
    sp.add_argument("--metric-file", default=None)
    sp.add_argument("--H", type=int, default=16)
    sp.add_argument("--W", type=int, default=16)
    sp.add_argument("--c", type=int, default=4)
    sp.add_argument("--m2", type=float, default=0.0)
    sp.add_argument("--epsilon", type=float, default=0.0)

    sp = subparsers["gen-data"] = sub.add_parser("gen-data", help="generate labeled Voronoi scenes")
    common(sp)
    sp.add_argument("--n-train", type=int, default=20)
    sp.add_argument("--n-test", type=int, default=10)
    sp.add_argument("--H", type=int, default=48)
    sp.add_argument("--W", type=int, default=48)
    sp.add_argument("--c", type=int, default=5)
    sp.add_argument("--sites-min", type=int, default=4)
    sp.add_argument("--sites-max", type=int, default=12)

    sp = subparsers["fit-metric"] = sub.add_parser("fit-metric", help="fit a static per-node metric to "
                                           "reach a target labeling")
    common(sp)
    flow_opts(sp)
    sp.add_argument("--target", required=True, help="target labeling (PGM)")
    sp.add_argument("--c", type=int, default=None,
                    help="number of labels (default: max label + 1)")
    sp.add_argument("--init", default=None,
                    help="initial state (AMF1); default corrupts the target")
    sp.add_argument("--smoothing", type=float, default=0.8)
    sp.add_argument("--noise-std", type=float, default=0.2)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--mode", default="adabelief",
                    choices=["adabelief", "linesearch"])

    sp = subparsers["train"] = sub.add_parser("train", help="train the metric-predicting operator")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset manifest directory")
    sp.add_argument("--c", type=int, default=5)
    sp.add_argument("--epochs", type=int, default=12)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=1)
    sp.add_argument("--optimizer", default="adabelief",
                    choices=["adabelief", "adam"])
    sp.add_argument("--kernel-size", type=int, default=7)
    sp.add_argument("--filters", type=int, default=16)
    sp.add_argument("--hidden", default="16,8,4")
    sp.add_argument("--T", type=float, default=2.0)
    sp.add_argument("--step", type=float, default=0.2)
    sp.add_argument("--m2", type=float, default=4.0)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--smoothing", type=float, default=0.8)
    sp.add_argument("--noise-std", type=float, default=0.2)

    sp = subparsers["eval"] = sub.add_parser("eval", help="evaluate a checkpoint (or the flat "
                                     "baseline) on manifest scenes")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True,
                    help="checkpoint path, or 'flat' for the baseline")
    sp.add_argument("--split", default="test")
    sp.add_argument("--c", type=int, default=5)
    sp.add_argument("--T", type=float, default=2.0)
    sp.add_argument("--step", type=float, default=0.2)
    sp.add_argument("--m2", type=float, default=4.0)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--smoothing", type=float, default=0.8)
    sp.add_argument("--noise-std", type=float, default=0.2)
    return p, subparsers


def _coerce(parser_actions, key, raw):
    for action in parser_actions:
        if action.dest == key:
            if isinstance(action, (argparse._StoreTrueAction,
                                   argparse._StoreFalseAction)):
                return raw.lower() in ("1", "true", "yes")
            if action.type is not None:
                return action.type(raw)
            return raw
    return raw


def _load_config_defaults(subparser, argv_rest, ns):
    """Apply values from --config as defaults under explicit CLI flags."""
    if ns.config is None:
        return ns
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(ns.config):
        raise FileNotFoundError(f"config file {ns.config!r} not found")
    given = set()
    for a in argv_rest:
        if a.startswith("--"):
            given.add(a.split("=", 1)[0].lstrip("-").replace("-", "_"))
    for section in cp.sections():
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest in ("command", "config") or dest in given \
                    or not hasattr(ns, dest) or raw == "":
                continue
            setattr(ns, dest, _coerce(subparser._actions, dest, raw))
    return ns


def write_config_echo(ns, path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.add_section("run")
    for key, val in sorted(vars(ns).items()):
        if key in ("config",):
            continue
        cp.set("run", key, "" if val is None else str(val))
    import io
    buf = io.StringIO()
    cp.write(buf)
    from .fileio import atomic_write
    atomic_write(path, buf.getvalue().encode())


def read_config_echo(path) -> dict:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read(path)
    return {k: v for k, v in cp.items("run")}


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def max_pairwise_distance(S, block: int = 256) -> float:
    """Diameter of the state point cloud, blocked to bound memory."""
    import numpy as np
    S = np.asarray(S)
    best = 0.0
    for start in range(0, S.shape[0], block):
        chunk = S[start:start + block]
        d2 = np.sum((chunk[:, None, :] - S[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return best**0.5


def _metric_source(ns, grid):
    import numpy as np
    from . import flows as fl
    from .fileio import read_metric
    from .operator import LearnedMetric, load_params
    chosen = [x for x in (ns.metric_file, ns.ckpt, ns.structure_tensor)
              if x is not None]
    if len(chosen) > 1:
        raise _UsageError("choose at most one metric source")
    if ns.metric_file:
        return fl.FixedMetric(read_metric(
            ns.metric_file, validate=not getattr(ns, "no_validate", False)))
    if ns.ckpt:
        return LearnedMetric(grid, load_params(ns.ckpt))
    if ns.structure_tensor:
        parts = ns.structure_tensor.split(",")
        if len(parts) not in (2, 3):
            raise _UsageError("--structure-tensor expects RHO,SIGMA[,FN]")
        fn = parts[2] if len(parts) == 3 else "exp"
        return fl.StructureTensorMetric(grid, float(parts[0]),
                                        float(parts[1]), fn)
    return fl.flat_metric(grid)


def _flow_spec(ns, source):
    from .flows import FlowSpec
    return FlowSpec(family="sigma", alpha=ns.alpha, m_squared=ns.m2,
                    epsilon=ns.epsilon, metric_source=source, T=ns.T,
                    integrator=ns.integrator, step=ns.step, rtol=ns.rtol,
                    atol=ns.atol, metric_refresh=ns.metric_refresh)


def cmd_run(ns) -> int:
    import numpy as np
    from . import flows as fl
    from .fileio import read_assignment, write_assignment, write_trajectory_csv
    from .grid import TorusGrid
    from .learning import torus_embedding_init
    if ns.init:
        grid, S0 = read_assignment(ns.init, validate=not ns.no_validate)
    elif ns.demo_init == "torus":
        grid = TorusGrid(ns.H, ns.W)
        S0 = torus_embedding_init(ns.H, ns.W)
    else:
        raise _UsageError("provide --init FILE or --demo-init torus")
    spec = _flow_spec(ns, _metric_source(ns, grid))
    S, rec = fl.integrate(grid, S0, spec, record_every=ns.record_every)
    os.makedirs(ns.out, exist_ok=True)
    write_trajectory_csv(rec, os.path.join(ns.out, "diagnostics.csv"))
    write_assignment(S, grid, os.path.join(ns.out, "final.amf"))
    write_config_echo(ns, os.path.join(ns.out, "config.ini"))
    mean_h, max_h, _ = fl.entropy_stats(S)
    print(f"run: T={ns.T:g} final mean entropy {mean_h:.4f} "
          f"max entropy {max_h:.4f}")
    return 0


def cmd_torus_demo(ns) -> int:
    import numpy as np
    from . import flows as fl
    from .fileio import atomic_write, write_trajectory_csv
    from .grid import TorusGrid
    from .learning import torus_embedding_init
    grid = TorusGrid(ns.H, ns.W)
    S0 = torus_embedding_init(ns.H, ns.W)
    spec = _flow_spec(ns, fl.flat_metric(grid))
    S, rec = fl.integrate(grid, S0, spec, record_every=ns.record_every,
                          keep_snapshots=True)
    os.makedirs(ns.out, exist_ok=True)
    lines = ["time,node,p1,p2,p3"]
    for t, snap in rec.snapshots:
        for a in range(grid.n_nodes):
            lines.append(f"{t:.12g},{a},{snap[a, 1]:.12g},"
                         f"{snap[a, 2]:.12g},{snap[a, 3]:.12g}")
    atomic_write(os.path.join(ns.out, "trajectory.csv"),
                 ("\n".join(lines) + "\n").encode())
    write_trajectory_csv(rec, os.path.join(ns.out, "diagnostics.csv"))
    write_config_echo(ns, os.path.join(ns.out, "config.ini"))
    spread = max_pairwise_distance(S)
    mean_h, _, _ = fl.entropy_stats(S)
    print(f"torus-demo: final max pairwise distance {spread:.3e}, "
          f"mean entropy {mean_h:.4f}")
    return 0


def cmd_spectrum(ns) -> int:
    from . import flows as fl
    from .fileio import atomic_write, read_metric
    from .grid import TorusGrid, identity_metric
    if ns.metric_file:
        field = read_metric(ns.metric_file)
    else:
        field = identity_metric(TorusGrid(ns.H, ns.W))
    dec, aleph = fl.low_frequency_set(field, ns.epsilon, ns.m2, ns.c)
    members = set(int(x) for x in aleph)
    lines = ["n,eigenvalue,in_low_frequency_set"]
    for n, lam in enumerate(dec.eigenvalues):
        lines.append(f"{n},{lam:.12g},{int(n in members)}")
    os.makedirs(ns.out, exist_ok=True)
    atomic_write(os.path.join(ns.out, "spectrum.csv"),
                 ("\n".join(lines) + "\n").encode())
    write_config_echo(ns, os.path.join(ns.out, "config.ini"))
    print(f"spectrum: {len(dec.eigenvalues)} modes, "
          f"{len(members)} in the low-frequency set")
    return 0


def cmd_gen_data(ns) -> int:
    import numpy as np
    from .fileio import write_label_map, write_manifest
    from .learning import _child_seed, gen_voronoi
    os.makedirs(ns.out, exist_ok=True)
    entries = []
    for kind, count, offset in (("train", ns.n_train, 0),
                                ("test", ns.n_test, 1_000_000)):
        for idx in range(count):
            rng = _child_seed(ns.seed, offset, idx)
            sites = int(rng.integers(ns.sites_min, ns.sites_max + 1))
            scene_seed = int(rng.integers(0, 2**31 - 1))
            labels = gen_voronoi(ns.H, ns.W, ns.c, sites, scene_seed)
            name = f"{kind}_{idx:04d}.pgm"
            write_label_map(labels.reshape(ns.H, ns.W),
                            os.path.join(ns.out, name), maxval=ns.c - 1)
            entries.append((name, scene_seed, kind))
    write_manifest(entries, ns.out)
    write_config_echo(ns, os.path.join(ns.out, "config.ini"))
    print(f"gen-data: wrote {len(entries)} scenes to {ns.out}")
    return 0


def cmd_fit_metric(ns) -> int:
    import numpy as np
    from .fileio import (read_assignment, read_label_map, render_error_mask,
                         render_gray, write_label_map, write_metric,
                         atomic_write)
    from .grid import TorusGrid
    from .learning import CorruptionConfig, corrupt, fit_metric
    labels_hw = read_label_map(ns.target, c=ns.c)
    H, W = labels_hw.shape
    grid = TorusGrid(H, W)
    labels = labels_hw.reshape(-1)
    c = ns.c if ns.c is not None else int(labels.max()) + 1
    if ns.init:
        g2, S0 = read_assignment(ns.init)
        if (g2.H, g2.W) != (H, W):
            raise _UsageError("init grid does not match target")
    else:
        S0 = corrupt(labels, c, CorruptionConfig(ns.smoothing, ns.noise_std,
                                                 ns.seed))
    spec = _flow_spec(ns, None)
    field, rep = fit_metric(grid, labels, S0, spec, max_steps=ns.steps,
                            lr=ns.lr, mode=ns.mode)
    os.makedirs(ns.out, exist_ok=True)
    write_metric(field, os.path.join(ns.out, "metric.mtf"))
    lines = ["step,loss"] + [f"{i},{v:.12g}" for i, v in enumerate(rep.losses)]
    atomic_write(os.path.join(ns.out, "report.csv"),
                 ("\n".join(lines) + "\n").encode())
    write_label_map(rep.pred_labels.reshape(H, W),
                    os.path.join(ns.out, "pred.pgm"), maxval=c - 1)
    render_error_mask(rep.pred_labels.reshape(H, W),
                      (rep.pred_labels != labels).reshape(H, W),
                      os.path.join(ns.out, "error_mask.ppm"))
    render_gray(rep.anisotropy.reshape(H, W),
                os.path.join(ns.out, "anisotropy.ppm"), equalize=True)
    render_gray(rep.scale.reshape(H, W),
                os.path.join(ns.out, "scale.ppm"), equalize=True)
    write_config_echo(ns, os.path.join(ns.out, "config.ini"))
    print(f"fit-metric: {rep.steps_run} steps, final loss {rep.losses[-1]:.4g}, "
          f"pixel error {rep.pixel_error:.4%}")
    return 0


def _train_cfg(ns, H, W):
    from .learning import TrainConfig
    hidden = tuple(int(x) for x in str(ns.hidden).split(",")) \
        if hasattr(ns, "hidden") else (16, 8, 4)
    return TrainConfig(H=H, W=W, c=ns.c, T=ns.T, step=ns.step,
                       m_squared=ns.m2, alpha=ns.alpha,
                       epochs=getattr(ns, "epochs", 0),
                       lr=getattr(ns, "lr", 1e-3),
                       batch_size=getattr(ns, "batch_size", 1),
                       optimizer=getattr(ns, "optimizer", "adabelief"),
                       kernel_size=getattr(ns, "kernel_size", 7),
                       filters=getattr(ns, "filters", 16),
                       hidden=hidden, seed=ns.seed,
                       smoothing=ns.smoothing, noise_std=ns.noise_std)


def cmd_train(ns) -> int:
    from .fileio import atomic_write, read_manifest
    from .learning import train_operator
    from .operator import save_params
    data = read_manifest(ns.data)
    scenes = [lab.reshape(-1) for lab, _, split in data if split == "train"]
    if not scenes:
        raise _UsageError("manifest has no training scenes")
    H, W = data[0][0].shape
    cfg = _train_cfg(ns, H, W)
    params, rep = train_operator(scenes, cfg, log=print)
    os.makedirs(ns.out, exist_ok=True)
    save_params(params, os.path.join(ns.out, "operator.ckpt"))
    lines = ["epoch,train_loss,val_loss,val_accuracy"]
    for e in range(len(rep.val_losses)):
        tl = rep.train_losses[e - 1] if e >= 1 else float("nan")
        lines.append(f"{e},{tl:.12g},{rep.val_losses[e]:.12g},"
                     f"{rep.val_accuracies[e]:.12g}")
    atomic_write(os.path.join(ns.out, "report.csv"),
                 ("\n".join(lines) + "\n").encode())
    write_config_echo(ns, os.path.join(ns.out, "config.ini"))
    print(f"train: best epoch {rep.best_epoch} "
          f"(val loss {rep.best_val_loss:.4g})")
    return 0


def cmd_eval(ns) -> int:
    import numpy as np
    from .fileio import atomic_write, read_manifest, render_error_mask
    from .learning import evaluate
    from .operator import load_params
    data = read_manifest(ns.data)
    pairs = [(lab, seed) for lab, seed, split in data if split == ns.split]
    if not pairs:
        raise _UsageError(f"manifest has no {ns.split!r} scenes")
    H, W = pairs[0][0].shape
    scenes = [lab.reshape(-1) for lab, _ in pairs]
    cfg = _train_cfg(ns, H, W)
    params = None if ns.ckpt == "flat" else load_params(ns.ckpt)
    rep = evaluate(scenes, params, cfg)
    os.makedirs(ns.out, exist_ok=True)
    lines = ["sample,accuracy"]
    for i, acc in enumerate(rep.accuracies):
        lines.append(f"{i},{acc:.12g}")
        render_error_mask(rep.pred_labels[i].reshape(H, W),
                          rep.error_masks[i].reshape(H, W),
                          os.path.join(ns.out, f"mask_{i:04d}.ppm"))
    lines.append(f"mean,{rep.mean_accuracy:.12g}")
    lines.append(f"std,{rep.std_accuracy:.12g}")
    atomic_write(os.path.join(ns.out, "report.csv"),
                 ("\n".join(lines) + "\n").encode())
    write_config_echo(ns, os.path.join(ns.out, "config.ini"))
    print(f"eval: mean accuracy {rep.mean_accuracy:.4f} "
          f"(std {rep.std_accuracy:.4f}) over {len(scenes)} scenes")
    return 0


_COMMANDS = {
    "run": cmd_run,
    "torus-demo": cmd_torus_demo,
    "spectrum": cmd_spectrum,
    "gen-data": cmd_gen_data,
    "fit-metric": cmd_fit_metric,
    "train": cmd_train,
    "eval": cmd_eval,
}


def dispatch(argv) -> int:
    parser, subparsers = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 1
    _load_config_defaults(subparsers[ns.command], argv, ns)
    if ns.out is None:
        raise _UsageError("--out is required (on the command line or in "
                          "the config file)")
    return _COMMANDS[ns.command](ns)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_env(argv)
    import numpy as np
    from .errors import (AssemblyError, CapabilityError, DivergenceError,
                         FormatError, GeometryDomainError, StepUnderflowError)
    try:
        return dispatch(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (GeometryDomainError, AssemblyError, FormatError, CapabilityError,
            FileNotFoundError) as err:
        print(f"validation error: {err}", file=sys.stderr)
        return 2
    except (DivergenceError, StepUnderflowError,
            np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
