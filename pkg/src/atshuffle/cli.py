"""Batch front door: config parsing, dispatch, seeds, output artifacts.

Usage:
    atshuffle --config cfg.json [--seed N] [--jobs K] [--out DIR]
              [--cap-enum N] [--cap-window W]
    atshuffle --generate-instance --family constant-q --n 8 --epsilon 0.5
              --seed 7 --out DIR

The config file is JSON with a fixed key set per command (unknown keys are
rejected).  Common keys:

    command   one of exact | sample | chain | asep | burnin | spatial |
              disconnect | blockcheck | mix | lowerbound
    n         instance size (or "ns": [..] for scaling commands)
    p         {"family": "constant-q", "q": 0.6} or {"family": "constant-eps",
              "eps": ..}, {"family": "random-eps", "eps": ..},
              {"family": "monotone-eps", "eps": ..},
              {"family": "totally-asymmetric"} or {"file": "instance.txt"}
    ell       null (unrestricted), an integer (constant window), a list of
              [lo, hi] pairs, or {"file": "localization.txt"}
    seed      master seed (the --seed flag wins)

Every run echoes the resolved config into the output directory, writes the
result JSON and CSV series, and a manifest listing seeds, code version,
timestamps, and the verdict.  Result files carry no timestamps, so a rerun
with the same config and master seed is byte-identical; wall-clock metadata
lives only in the manifest.  Replica r of experiment e draws its stream from
SeedSequence([master, crc32(e), r]).
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .banddp import exact_localized_sampler
from .chains import (BlockSchedule, derive_rng,
                     ensemble_chain_run, experiment_id, write_checkpoint)
from .errors import CapExceeded, ContractError, EmptySupport, NotReversible
from .experiments import (ExperimentResult, SeriesPoint, Verdict,
                          asep_tail_check, block_chain_mixing,
                          block_decomposition_check, burn_in_profile,
                          burn_in_scaling, disconnect_probability,
                          localization_tail_check, lower_bound_experiment,
                          make_family, mixing_scaling, spatial_decay_curve)
from .measure import (build_transition_matrix, enumerate_stationary,
                      spectral_gap)
from .perms import (BiasMatrix, BoundaryAssignment, LocalizationVector,
                    Permutation, instance_fingerprint, is_localized)

COMMANDS = ("exact", "sample", "chain", "asep", "burnin", "spatial",
            "disconnect", "blockcheck", "mix", "lowerbound")

_COMMON_KEYS = {"command", "n", "ns", "p", "ell", "seed", "out"}
_ALLOWED_KEYS = {
    "exact": _COMMON_KEYS | {"cap_enum"},
    "sample": _COMMON_KEYS | {"samples"},
    "chain": _COMMON_KEYS | {"steps", "init", "checkpoint_every", "tracked_ks"},
    "asep": _COMMON_KEYS | {"k", "q", "rs"},
    "burnin": _COMMON_KEYS | {"T_mult", "replicas", "quantile", "init", "T"},
    "spatial": _COMMON_KEYS | {"eta", "eta_bar", "rs", "mode", "budget",
                               "threshold"},
    "disconnect": _COMMON_KEYS | {"ks", "mode", "budget", "boundary"},
    "blockcheck": _COMMON_KEYS | {"schedule", "selection"},
    "mix": _COMMON_KEYS | {"delta", "method", "budget"},
    "lowerbound": _COMMON_KEYS | {"eta", "replicas", "threshold"},
}


class RunConfig:
    """Validated, fully resolved run configuration."""

    def __init__(self, raw: dict, seed_override=None, cap_enum=None,
                 cap_window=None, jobs: int = 1, out: str | None = None):
        if "command" not in raw:
            raise ContractError("config must name a command")
        command = raw["command"]
        if command not in COMMANDS:
            raise ContractError(f"unknown command {command!r}; choose from "
                                + ", ".join(COMMANDS))
        unknown = set(raw) - _ALLOWED_KEYS[command]
        if unknown:
            raise ContractError(
                f"unknown config keys for {command}: {sorted(unknown)}")
        self.command = command
        self.raw = dict(raw)
        self.seed = int(seed_override if seed_override is not None
                        else raw.get("seed", 0))
        self.cap_enum = cap_enum
        self.cap_window = cap_window
        self.jobs = max(1, int(jobs))
        self.out = out or raw.get("out") or "atshuffle-out"

    def resolved(self) -> dict:
        out = dict(self.raw)
        out["seed"] = self.seed
        out["jobs"] = self.jobs
        if self.cap_enum is not None:
            out["cap_enum"] = self.cap_enum
        if self.cap_window is not None:
            out["cap_window"] = self.cap_window
        return out


def _load_bias(spec, n: int | None, seed: int) -> BiasMatrix:
    if isinstance(spec, dict) and "file" in spec:
        with open(spec["file"]) as fh:
            return BiasMatrix.from_text(fh.read())
    if isinstance(spec, dict) and "family" in spec:
        if n is None:
            raise ContractError("family instances need n")
        fam = dict(spec)
        fam["kind"] = fam.pop("family")
        return make_family(n, fam, seed)
    raise ContractError("p must be {'family': ...} or {'file': ...}")


def _load_ell(spec, n: int | None) -> LocalizationVector | None:
    if spec is None:
        return None
    if isinstance(spec, dict) and "file" in spec:
        with open(spec["file"]) as fh:
            return LocalizationVector.from_text(fh.read())
    if isinstance(spec, int):
        if n is None:
            raise ContractError("constant localization needs n")
        return LocalizationVector.constant(n, spec)
    if isinstance(spec, list):
        return LocalizationVector([a for a, _ in spec], [b for _, b in spec])
    raise ContractError("ell must be null, an int, [[lo,hi],...], or a file")


def _family_dict(spec) -> dict:
    if not (isinstance(spec, dict) and "family" in spec):
        raise ContractError("this command needs p as {'family': ...}")
    fam = dict(spec)
    fam["kind"] = fam.pop("family")
    return fam


def generate_instance(family: str, n: int, epsilon: float | None, seed: int,
                      path: str) -> str:
    """Write a certified bias-matrix instance file; returns the path."""
    rng = derive_rng(seed, experiment_id("generate-instance"))
    if family == "constant-q":
        if epsilon is None or epsilon < 0:
            raise ContractError("constant-q generation needs epsilon >= 0")
        p = BiasMatrix.constant_from_epsilon(n, epsilon)
    elif family == "totally-asymmetric":
        p = BiasMatrix.totally_asymmetric(n)
    elif family == "random-eps":
        if epsilon is None or epsilon < 0:
            raise ContractError("random-eps generation needs epsilon >= 0")
        p = BiasMatrix.random_biased(n, epsilon, rng)
    elif family == "monotone-eps":
        if epsilon is None or epsilon < 0:
            raise ContractError("monotone-eps generation needs epsilon >= 0")
        p = BiasMatrix.monotone_biased(n, epsilon, rng)
    else:
        raise ContractError(
            "family must be constant-q, totally-asymmetric, random-eps, or "
            "monotone-eps")
    if epsilon is not None and p.epsilon < epsilon - 1e-12:
        raise ContractError("generated instance misses the requested bias")
    with open(path, "w") as fh:
        fh.write(p.to_text())
    return path


# ---------------------------------------------------------------------------
# command handlers; each returns (ExperimentResult-like record, artifacts)
# ---------------------------------------------------------------------------

def _run_exact(cfg: RunConfig, outdir: str):
    n = int(cfg.raw["n"])
    p = _load_bias(cfg.raw["p"], n, cfg.seed)
    ell = _load_ell(cfg.raw.get("ell"), n)
    kwargs = {}
    if cfg.cap_enum is not None:
        kwargs["cap"] = cfg.cap_enum
    mu = enumerate_stationary(n, p, ell, **kwargs)
    P = build_transition_matrix(n, p, ell, mu=mu, **kwargs)
    gap = spectral_gap(P, mu)
    series = [SeriesPoint(i, float(pr), 0.0, 1)
              for i, pr in enumerate(mu.probs)]
    verdict = Verdict(True, "detailed balance holds (checked at build)",
                      {"logZ": mu.logZ, "Z": float(np.exp(mu.logZ)),
                       "gap": gap, "states": len(mu.support)})
    res = ExperimentResult("exact", instance_fingerprint(p, ell),
                           cfg.resolved(), series, verdict,
                           {"support": [list(s) for s in mu.support]
                            if len(mu.support) <= 5040 else "omitted"})
    paths = res.write(outdir, "result")
    mu.to_csv(os.path.join(outdir, "distribution.csv"))
    paths.append(os.path.join(outdir, "distribution.csv"))
    return res, paths


def _run_sample(cfg: RunConfig, outdir: str):
    n = int(cfg.raw["n"])
    p = _load_bias(cfg.raw["p"], n, cfg.seed)
    ell = _load_ell(cfg.raw.get("ell"), n)
    samples = int(cfg.raw.get("samples", 100))
    kwargs = {}
    if cfg.cap_window is not None:
        kwargs["window_cap"] = cfg.cap_window
    sampler = exact_localized_sampler(p, ell, **kwargs)
    rows = sampler.draw_rows(
        derive_rng(cfg.seed, experiment_id("sample")), samples)
    path = os.path.join(outdir, "samples.jsonl")
    ok = True
    with open(path, "w") as fh:
        for row in rows:
            perm = Permutation(row, _validate=False)
            if ell is not None and not is_localized(perm, ell):
                ok = False
            fh.write(json.dumps(list(map(int, row))) + "\n")
    verdict = Verdict(ok, "every draw lies in the localized set",
                      {"strategy": sampler.strategy})
    res = ExperimentResult("sample", instance_fingerprint(p, ell),
                           cfg.resolved(), [], verdict, {"samples": samples})
    paths = res.write(outdir, "result")
    paths.append(path)
    return res, paths


def _run_chain(cfg: RunConfig, outdir: str):
    n = int(cfg.raw["n"])
    p = _load_bias(cfg.raw["p"], n, cfg.seed)
    ell = _load_ell(cfg.raw.get("ell"), n)
    steps = int(cfg.raw.get("steps", 10 * n * n))
    every = int(cfg.raw.get("checkpoint_every", max(1, steps // 100)))
    init = cfg.raw.get("init", "reversal")
    tracked = [int(k) for k in cfg.raw.get("tracked_ks", [])]
    start = {"identity": Permutation.identity(n),
             "reversal": Permutation.reversal(n)}.get(init)
    if start is None:
        start = Permutation(list(init))
    rng = derive_rng(cfg.seed, experiment_id("chain"))
    rows = start.forward[None, :]
    path = os.path.join(outdir, "trajectory.jsonl")
    marks = list(range(0, steps + 1, every))
    recs = []

    def snap(t, F, INV):
        recs.append((t, F[0].copy()))

    ensemble_chain_run(p, rows, steps, rng, ell=ell, checkpoints=marks,
                       checkpoint_fn=snap)
    with open(path, "w") as fh:
        for t, f in recs:
            write_checkpoint(fh, t, Permutation(f, _validate=False), tracked)
    from .perms import max_displacement
    final = Permutation(recs[-1][1], _validate=False)
    series = [SeriesPoint(t, float(max_displacement(
        Permutation(f, _validate=False))), 0.0, 1) for t, f in recs]
    verdict = Verdict(True, "record-only trajectory",
                      {"final_max_displacement": max_displacement(final)})
    res = ExperimentResult("chain", instance_fingerprint(p, ell),
                           cfg.resolved(), series, verdict, {"steps": steps})
    paths = res.write(outdir, "result")
    paths.append(path)
    return res, paths


def _run_asep(cfg: RunConfig, outdir: str):
    res = asep_tail_check(int(cfg.raw["n"]), int(cfg.raw["k"]),
                          float(cfg.raw["q"]),
                          cfg.raw.get("rs"))
    return res, res.write(outdir, "result")


def _run_burnin(cfg: RunConfig, outdir: str):
    if "ns" in cfg.raw:
        res = burn_in_scaling(
            [int(v) for v in cfg.raw["ns"]], _family_dict(cfg.raw["p"]),
            T_mult=int(cfg.raw.get("T_mult", 8)),
            replicas=int(cfg.raw.get("replicas", 100)),
            seed=cfg.seed, quantile=float(cfg.raw.get("quantile", 0.99)))
    else:
        n = int(cfg.raw["n"])
        p = _load_bias(cfg.raw["p"], n, cfg.seed)
        res = burn_in_profile(
            n, p, cfg.raw.get("init", "reversal"),
            int(cfg.raw["T"]) if "T" in cfg.raw else None,
            replicas=int(cfg.raw.get("replicas", 100)), seed=cfg.seed,
            ell=_load_ell(cfg.raw.get("ell"), n),
            quantile=float(cfg.raw.get("quantile", 0.99)))
    return res, res.write(outdir, "result")


def _boundary_from_spec(spec, n: int) -> BoundaryAssignment:
    return BoundaryAssignment(n, tuple(spec.get("left", ())),
                              tuple(spec.get("right", ())))


def _run_spatial(cfg: RunConfig, outdir: str):
    n = int(cfg.raw["n"])
    p = _load_bias(cfg.raw["p"], n, cfg.seed)
    ell = _load_ell(cfg.raw.get("ell"), n)
    if ell is None:
        raise ContractError("spatial needs a localization vector")
    eta = _boundary_from_spec(cfg.raw["eta"], n)
    eta_bar = _boundary_from_spec(cfg.raw["eta_bar"], n)
    res = spatial_decay_curve(
        p, ell, eta, eta_bar, [int(r) for r in cfg.raw["rs"]],
        mode=cfg.raw.get("mode", "exact"),
        budget=int(cfg.raw.get("budget", 4000)), seed=cfg.seed,
        threshold=float(cfg.raw.get("threshold", 0.05)),
        window_cap=cfg.cap_window)
    return res, res.write(outdir, "result")


def _run_disconnect(cfg: RunConfig, outdir: str):
    n = int(cfg.raw["n"])
    p = _load_bias(cfg.raw["p"], n, cfg.seed)
    ell = _load_ell(cfg.raw.get("ell"), n)
    boundary = None
    if cfg.raw.get("boundary") is not None:
        boundary = _boundary_from_spec(cfg.raw["boundary"], n)
    res = disconnect_probability(
        p, ell, boundary, cfg.raw.get("ks"),
        mode=cfg.raw.get("mode", "exact"),
        budget=int(cfg.raw.get("budget", 20000)), seed=cfg.seed,
        window_cap=cfg.cap_window)
    return res, res.write(outdir, "result")


def _run_blockcheck(cfg: RunConfig, outdir: str):
    n = int(cfg.raw["n"])
    p = _load_bias(cfg.raw["p"], n, cfg.seed)
    ell = _load_ell(cfg.raw.get("ell"), n)
    kind = cfg.raw.get("schedule", "west-east")
    selection = cfg.raw.get("selection", "size")
    if kind == "west-east":
        schedule = BlockSchedule.west_east(n, selection)
    elif kind == "single":
        schedule = BlockSchedule.single(n, selection)
    else:
        raise ContractError("blockcheck supports west-east or single schedules")
    res = block_decomposition_check(n, p, ell, schedule)
    return res, res.write(outdir, "result")


def _run_mix(cfg: RunConfig, outdir: str):
    res = mixing_scaling(
        [int(v) for v in cfg.raw["ns"]] if "ns" in cfg.raw
        else [int(cfg.raw["n"])],
        _family_dict(cfg.raw["p"]),
        delta=float(cfg.raw.get("delta", 0.25)),
        method=cfg.raw.get("method", "coupling"),
        budget=int(cfg.raw.get("budget", 16)), seed=cfg.seed, jobs=cfg.jobs)
    paths = res.write(outdir, "result")
    for key, curve in res.meta.get("tv_curves", {}).items():
        cpath = os.path.join(outdir, f"tv_curve_n{key}.csv")
        with open(cpath, "w") as fh:
            fh.write("t,tv\n")
            for t, tv in enumerate(curve):
                fh.write(f"{t},{tv!r}\n")
        paths.append(cpath)
    return res, paths


def _run_lowerbound(cfg: RunConfig, outdir: str):
    n = int(cfg.raw["n"])
    p = _load_bias(cfg.raw["p"], n, cfg.seed)
    res = lower_bound_experiment(
        n, p, eta=float(cfg.raw.get("eta", 0.5)),
        replicas=int(cfg.raw.get("replicas", 500)), seed=cfg.seed,
        threshold=float(cfg.raw.get("threshold", 0.05)))
    return res, res.write(outdir, "result")


_HANDLERS = {
    "exact": _run_exact,
    "sample": _run_sample,
    "chain": _run_chain,
    "asep": _run_asep,
    "burnin": _run_burnin,
    "spatial": _run_spatial,
    "disconnect": _run_disconnect,
    "blockcheck": _run_blockcheck,
    "mix": _run_mix,
    "lowerbound": _run_lowerbound,
}


def run(cfg: RunConfig) -> int:
    """Execute a resolved config; returns the process exit status."""
    outdir = cfg.out
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "resolved_config.json"), "w") as fh:
        json.dump(cfg.resolved(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.time()
    manifest = {
        "schema": 1,
        "code_version": __version__,
        "command": cfg.command,
        "config": cfg.resolved(),
        "master_seed": cfg.seed,
        "started": started,
        "incomplete": True,
    }
    status = 0
    try:
        res, artifacts = _HANDLERS[cfg.command](cfg, outdir)
        manifest["incomplete"] = False
        manifest["artifacts"] = [os.path.basename(a) for a in artifacts]
        manifest["verdict"] = res.verdict.as_dict()
        if not res.verdict.passed:
            status = 1
            print(f"FAILED verdict: {res.verdict.bound}", file=sys.stderr)
        else:
            print(f"pass: {res.experiment} ({res.verdict.bound})")
    except KeyboardInterrupt:
        manifest["interrupted"] = True
        status = 130
    except (ContractError, CapExceeded, EmptySupport, NotReversible) as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    finally:
        manifest["runtime_s"] = round(time.time() - t0, 3)
        manifest["finished"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat()
        with open(os.path.join(outdir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="atshuffle",
        description="biased adjacent-transposition shuffle laboratory")
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="master seed")
    ap.add_argument("--jobs", type=int, default=1, help="worker bound")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--cap-enum", type=int, default=None,
                    help="enumeration size cap")
    ap.add_argument("--cap-window", type=int, default=None,
                    help="band DP window cap")
    ap.add_argument("--generate-instance", action="store_true",
                    help="write a certified bias-matrix file instead of running")
    ap.add_argument("--family", default=None)
    ap.add_argument("--n", type=int, default=None)
    ap.add_argument("--epsilon", type=float, default=None)
    args = ap.parse_args(argv)
    try:
        if args.generate_instance:
            if args.family is None or args.n is None:
                ap.error("--generate-instance needs --family and --n")
            outdir = args.out or "atshuffle-out"
            os.makedirs(outdir, exist_ok=True)
            path = os.path.join(outdir, f"{args.family}-n{args.n}.txt")
            generate_instance(args.family, args.n, args.epsilon,
                              args.seed or 0, path)
            print(path)
            return 0
        if not args.config:
            ap.error("--config is required (or use --generate-instance)")
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = RunConfig(raw, seed_override=args.seed, cap_enum=args.cap_enum,
                        cap_window=args.cap_window, jobs=args.jobs,
                        out=args.out)
    except (ContractError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
