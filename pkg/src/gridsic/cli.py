"""Command-line driver: ground, propagate, spectrum, bench.

Every command takes ``--config PATH`` or ``--preset NAME`` plus an output
directory.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 4 I/O error.

File layout under ``--out``: ``ground.chk`` (ground-state checkpoint),
``observables.csv`` (one row per recorded step), ``checkpoint.chk``
(rolling, every ``checkpoint_stride`` steps), ``final.chk``,
``spectrum.csv`` and ``peaks.csv``, ``bench.csv``.

``propagate`` reuses ``ground.chk`` when present, else prepares and saves
it, then boosts and runs.  With ``[propagation] resume_from = PATH`` it
restarts from a rolling checkpoint and appends to the existing CSV; the
concatenated rows reproduce the uninterrupted run bitwise.
"""

import argparse
import os
import sys
import time

import numpy as np

from .config import (
    ConfigError,
    build_system,
    gkli_options,
    ground_config,
    parse_config,
    preset_text,
    propagator_config,
)
from .dynamics import (
    GroundStateError,
    NumericalError,
    Propagator,
    PropagatorConfig,
    boost,
    ground_state,
    run,
)
from .hamiltonian import Scheme
from .observables import RecordWriter, read_series, spectrum, total_energy
from .state import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _load_config(args):
    if (args.config is None) == (args.preset is None):
        raise ConfigError(["give exactly one of --config PATH or --preset NAME"])
    if args.preset is not None:
        text = preset_text(args.preset)
    else:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    rc = parse_config(text)
    if args.seed is not None:
        rc.ground.probe_seed = args.seed
    return rc


def _prepare_ground(rc, system, out):
    """Load the saved ground state if compatible, else solve and save it."""
    path = os.path.join(out, "ground.chk")
    scheme = Scheme.parse(rc.system.scheme)
    if os.path.exists(path):
        try:
            st = load_checkpoint(path, system.grid)
            if st.phi.shape[0] == system.norb:
                return st, path
        except ValueError:
            pass  # stale file from another configuration; rebuild it
    st = ground_state(system, scheme, ground_config(rc))
    save_checkpoint(path, st)
    return st, path


def cmd_ground(rc, out, _steps):
    system = build_system(rc)
    scheme = Scheme.parse(rc.system.scheme)
    st = ground_state(system, scheme, ground_config(rc))
    path = os.path.join(out, "ground.chk")
    save_checkpoint(path, st)
    e = total_energy(st, system, scheme)
    print(f"ground state ({scheme.value}): E = {e.total:.12f} -> {path}")
    return EXIT_OK


def cmd_propagate(rc, out, steps):
    system = build_system(rc)
    pcfg = propagator_config(rc, steps)
    csv_path = os.path.join(out, "observables.csv")
    resume = rc.propagation.resume_from
    if resume:
        st = load_checkpoint(resume, system.grid)
        start_step = int(round(st.t / pcfg.dt))
        if not 0 <= start_step <= pcfg.steps:
            raise ConfigError(
                [
                    f"[propagation] resume_from: checkpoint at t = {st.t:g} is "
                    f"step {start_step}, outside 0..{pcfg.steps}"
                ]
            )
        writer = RecordWriter(csv_path, system.grid.dim, write_header=False, mode="a")
    else:
        st, _ = _prepare_ground(rc, system, out)
        if rc.boost.k and any(rc.boost.k):
            st = boost(st, rc.boost.k)
        start_step = 0
        writer = RecordWriter(csv_path, system.grid.dim)
    with writer:
        records = run(
            system,
            pcfg,
            st,
            writer=writer,
            checkpoint_path=os.path.join(out, "checkpoint.chk"),
            start_step=start_step,
            final_path=os.path.join(out, "final.chk"),
        )
    if records:
        e = np.array([r.e_total for r in records])
        drift = float(np.abs(e - e[0]).max() / max(abs(e[0]), 1e-300))
        print(
            f"propagated {pcfg.steps - start_step} step(s) ({pcfg.scheme.value}): "
            f"{len(records)} record(s), relative energy drift {drift:.3e} -> {csv_path}"
        )
    else:
        print(f"propagated {pcfg.steps - start_step} step(s): no records due this stride")
    return EXIT_OK


def cmd_spectrum(rc, out, _steps):
    csv_path = os.path.join(out, "observables.csv")
    series = read_series(csv_path)
    col = rc.spectrum.column
    if col not in series:
        raise ConfigError(
            [f"[spectrum] column: '{col}' not in {csv_path} (have {', '.join(series)})"]
        )
    damping = rc.spectrum.damping if rc.spectrum.damping > 0 else None
    result = spectrum(series["t"], series[col], damping=damping)
    spec_path = os.path.join(out, "spectrum.csv")
    with open(spec_path, "w", newline="") as fh:
        fh.write("freq,intensity\n")
        for f, s in zip(result.freq, result.intensity):
            fh.write(f"{f:.17g},{s:.17g}\n")
    peak_path = os.path.join(out, "peaks.csv")
    with open(peak_path, "w", newline="") as fh:
        fh.write("freq,intensity\n")
        for f, s in result.peaks:
            fh.write(f"{f:.17g},{s:.17g}\n")
    shown = ", ".join(f"{f:.5g}" for f, _ in result.peaks[:5]) or "none"
    print(f"spectrum of {col}: {len(result.peaks)} peak(s), strongest at {shown} -> {peak_path}")
    return EXIT_OK


def cmd_bench(rc, out, steps):
    """Time each scheme over the same dt and step count; normalize by ALDA.

    Each scheme is stepped ``repeats`` times from one shared initial state
    and the minimum wall time is kept.  All schemes run sequentially in this
    one process, so every ratio shares the same ALDA baseline.
    """
    if rc.propagation is None:
        raise ConfigError(["missing propagation block"])
    system = build_system(rc)
    nsteps = steps if steps is not None else rc.bench.steps
    schemes = list(rc.bench.schemes)
    if "alda" not in schemes:
        schemes.insert(0, "alda")
    base = ground_state(
        system, Scheme.parse(rc.bench.ground_scheme), ground_config(rc)
    )
    if rc.boost.k and any(rc.boost.k):
        base = boost(base, rc.boost.k)
    pr = rc.propagation
    results = []
    for name in schemes:
        pcfg = PropagatorConfig(
            dt=pr.dt,
            steps=nsteps,
            scheme=Scheme.parse(name),
            taylor_order=pr.taylor_order,
            sym_stride=pr.sym_stride,
            sc_iters=pr.sc_iters,
            sym_tol=pr.sym_tol,
            stencil_order=pr.stencil_order,
            gkli_opts=gkli_options(rc),
        )
        best = float("inf")
        status = "ok"
        for _ in range(max(1, rc.bench.repeats)):
            try:
                prop = Propagator(system, pcfg, base)
                t0 = time.perf_counter()
                for i in range(1, nsteps + 1):
                    prop.advance(i)
            except (NumericalError, FloatingPointError) as exc:
                status = f"failed: {exc}"
                break
            best = min(best, time.perf_counter() - t0)
        results.append((name, best, status))
    t_alda = next((t for n, t, s in results if n == "alda" and s == "ok"), None)

    def ratio(best, status):
        if status != "ok" or t_alda is None:
            return "nan"
        return f"{best / t_alda:.17g}"

    bench_path = os.path.join(out, "bench.csv")
    with open(bench_path, "w", newline="") as fh:
        fh.write("scheme,steps,seconds,ratio_vs_alda,status\n")
        for name, best, status in results:
            sec = f"{best:.17g}" if status == "ok" else "nan"
            fh.write(f'{name},{nsteps},{sec},{ratio(best, status)},"{status}"\n')
    print(f"{'scheme':8s} {'seconds':>10s} {'ratio':>8s}  status")
    for name, best, status in results:
        sec = f"{best:10.4f}" if status == "ok" else f"{'nan':>10s}"
        rat = ratio(best, status)
        rat = f"{float(rat):8.2f}" if rat != "nan" else f"{'nan':>8s}"
        print(f"{name:8s} {sec} {rat}  {status}")
    print(f"-> {bench_path}")
    return EXIT_OK if all(s == "ok" for _, _, s in results) else EXIT_NUMERICAL


_COMMANDS = {
    "ground": cmd_ground,
    "propagate": cmd_propagate,
    "spectrum": cmd_spectrum,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="gridsic",
        description="Grid TDDFT with self-interaction-corrected propagation schemes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ground", "prepare and save a ground state"),
        ("propagate", "ground (or resume), boost, and propagate, writing observables"),
        ("spectrum", "Fourier analysis of a recorded observable column"),
        ("bench", "time every configured scheme over the same interval"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="path to a run configuration file")
        sp.add_argument("--preset", help="name of a committed scenario preset")
        sp.add_argument("--out", default=".", help="output directory (default: .)")
        sp.add_argument("--steps", type=int, help="override the configured step count")
        sp.add_argument("--seed", type=int, help="override the branch-probe seed")
    args = parser.parse_args(argv)
    try:
        rc = _load_config(args)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](rc, args.out, args.steps)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (GroundStateError, NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # checkpoint/grid mismatches and kindred misconfigured inputs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
