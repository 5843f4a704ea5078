"""Command-line entry point: ``smoothreg {synth,register,bench,eval,gradcheck}``.

Every command accepts ``--config run.json`` plus ``--section.key value``
overrides (for example ``--sp.K 0`` or ``--optim.iterations 50``).

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure,
4 file-system error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, diffeo, grid, io, registrar, selfcheck
from .config import ConfigError, RunConfig, to_jsonable
from .energy import diffusive_reg
from .smoothproper import ConvergenceError

log = logging.getLogger("smoothreg")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
GRADCHECK_LIMIT = 1e-4
AUC_THRESHOLDS = (15, 25, 50)


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out.append((key, val))
    return out


def load_config(path: str | None, extra: list[str]) -> RunConfig:
    cfg = RunConfig.from_dict(io.read_json(path)) if path else RunConfig()
    return cfg.with_overrides(_split_overrides(extra))


# ---------------------------------------------------------------------------
# synth


def write_pair(out: Path, pair: bench.SynthPair, bits: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    io.write_image(out / "fixed.png", pair.fixed, bits=bits)
    io.write_image(out / "moving.png", pair.moving, bits=bits)
    io.write_flow(out / "gt.flo", pair.gt_flow)
    io.write_landmarks(out / "landmarks.csv", pair.landmarks)
    return {"fixed": "fixed.png", "moving": "moving.png", "gt_flow": "gt.flo", "landmarks": "landmarks.csv"}


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    pairs = []
    for i, spec in enumerate(cfg.bench.specs()):
        pid = f"pair_{i:03d}"
        files = write_pair(out / pid, bench.synth_pair(spec), cfg.io.image_bits)
        pairs.append({"id": pid, "dir": pid, "seed": spec.seed, "spec": to_jsonable(spec), **files})
    manifest = {"pairs": pairs, "config": cfg.to_dict()}
    io.write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# register


def run_registration(fixed: np.ndarray, moving: np.ndarray, cfg: RunConfig) -> registrar.RegistrationResult:
    return registrar.register(
        fixed, moving, pyramid=cfg.pyramid, sp=cfg.smoothproper, loss=cfg.loss, opt=cfg.optim, integration=cfg.integration
    )


def write_bundle(out: Path, moving: np.ndarray, res: registrar.RegistrationResult, cfg: RunConfig) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    io.write_flow(out / "u.flo", res.u)
    io.write_flow(out / "phi.flo", res.phi)
    if cfg.io.write_warped:
        io.write_image(out / "warped.png", grid.warp(moving, res.phi), bits=cfg.io.image_bits)
    with open(out / "trace.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "level", "loss", "lncc", "reg"])
        for it, level, loss, sim, reg in res.trace:
            wr.writerow([it, level, repr(loss), repr(sim), repr(reg)])
    diag = {
        "sp_disabled": res.sp_disabled,
        "jacobian": res.jacobian,
        "level_energies": res.level_energies,
        "mean_abs_u": float(np.mean(np.linalg.norm(res.u, axis=-1))),
        "diffusive_reg_u": diffusive_reg(res.u),
        "final_loss": res.trace[-1][2],
        "wall_time": res.runtime,
        "config": cfg.to_dict(),
    }
    io.write_json(out / "diagnostics.json", diag)
    return diag


def _read_pair_images(fixed_path, moving_path):
    fixed = io.read_image(fixed_path)
    moving = io.read_image(moving_path)
    if fixed.shape != moving.shape:
        raise CommandError(f"fixed {fixed.shape} and moving {moving.shape} differ in size", EXIT_INVALID)
    return fixed, moving


def cmd_register(fixed_path, moving_path, cfg: RunConfig, out: Path) -> dict:
    fixed, moving = _read_pair_images(fixed_path, moving_path)
    res = run_registration(fixed, moving, cfg)
    return write_bundle(out, moving, res, cfg)


def cmd_bench(data: Path, cfg: RunConfig, out: Path) -> None:
    """Register every pair of a benchmark directory into ``out/<pair id>/``."""
    manifest = io.read_json(data / "manifest.json")
    for entry in manifest["pairs"]:
        pdir = data / entry["dir"]
        t0 = time.perf_counter()
        cmd_register(pdir / entry["fixed"], pdir / entry["moving"], cfg, out / entry["id"])
        log.info("%s registered in %.1f s", entry["id"], time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# eval


def pair_metrics(phi: np.ndarray, gt: np.ndarray, landmarks: bench.LandmarkSet, mask=None) -> dict:
    errs, mean = bench.tre(landmarks, phi)
    jd = diffeo.interior(diffeo.jacobian_det(phi))
    return {
        "tre_mean": mean,
        "tre": errs.tolist(),
        "epe": bench.endpoint_error(phi, gt, mask),
        "min_jacobian": float(jd.min()),
    }


def cmd_eval(results: Path, gt_dir: Path) -> dict:
    manifest = io.read_json(gt_dir / "manifest.json")
    rows = []
    for entry in manifest["pairs"]:
        pdir = gt_dir / entry["dir"]
        phi = io.read_flow(results / entry["id"] / "phi.flo")
        gt = io.read_flow(pdir / entry["gt_flow"])
        if phi.shape != gt.shape:
            raise CommandError(f"{entry['id']}: result {phi.shape} and ground truth {gt.shape} differ", EXIT_INVALID)
        lm = io.read_landmarks(pdir / entry["landmarks"])
        rows.append({"id": entry["id"], **pair_metrics(phi, gt, lm)})
    tre_means = [r["tre_mean"] for r in rows]
    summary = {
        "tre_mean": float(np.mean(tre_means)),
        **{f"auc@{t}": bench.auc_at(tre_means, t) for t in AUC_THRESHOLDS},
        "epe": float(np.mean([r["epe"] for r in rows])),
        "min_jacobian": float(min(r["min_jacobian"] for r in rows)),
    }
    report = {"pairs": rows, "summary": summary}
    io.write_json(results / "metrics.json", report)
    return report


def format_table(report: dict) -> str:
    head = f"{'pair':<12}{'TRE':>9}{'EPE':>9}{'min|J|':>9}"
    lines = [head, "-" * len(head)]
    for r in report["pairs"]:
        lines.append(f"{r['id']:<12}{r['tre_mean']:>9.3f}{r['epe']:>9.3f}{r['min_jacobian']:>9.3f}")
    s = report["summary"]
    lines.append("-" * len(head))
    lines.append(f"{'mean':<12}{s['tre_mean']:>9.3f}{s['epe']:>9.3f}{s['min_jacobian']:>9.3f}")
    lines.append("  ".join(f"AUC@{t} {s[f'auc@{t}']:.3f}" for t in AUC_THRESHOLDS))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(primitives: list[str] | None, corrupt: str | None, seed: int) -> tuple[dict, bool]:
    if corrupt:
        with selfcheck.corrupted(selfcheck.ALIASES.get(corrupt, corrupt)):
            report = selfcheck.run_checks(primitives, seed=seed)
    else:
        report = selfcheck.run_checks(primitives, seed=seed)
    ok = all(max(r.values()) < GRADCHECK_LIMIT for r in report.values())
    return report, ok


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smoothreg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run configuration")
        return p

    p = with_config(sub.add_parser("synth", help="write the synthetic benchmark"))
    p.add_argument("--out", required=True, type=Path)

    p = with_config(sub.add_parser("register", help="register one image pair"))
    p.add_argument("fixed", type=Path)
    p.add_argument("moving", type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = with_config(sub.add_parser("bench", help="register every pair of a benchmark directory"))
    p.add_argument("data", type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="score result bundles against a benchmark directory")
    p.add_argument("results", type=Path)
    p.add_argument("gt", type=Path)

    p = sub.add_parser("gradcheck", help="adjoint and finite-difference checks per primitive")
    p.add_argument("--primitive", action="append", help="restrict to this primitive (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-adjoint", dest="corrupt", help=argparse.SUPPRESS)
    return ap


def _dispatch(args, extra: list[str]) -> int:
    if args.command in ("eval", "gradcheck") and extra:
        raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
    if args.command == "synth":
        manifest = cmd_synth(load_config(args.config, extra), args.out)
        print(f"wrote {len(manifest['pairs'])} pairs to {args.out}")
    elif args.command == "register":
        diag = cmd_register(args.fixed, args.moving, load_config(args.config, extra), args.out)
        print(f"min jacobian {diag['jacobian']['min']:.4f}, wall time {diag['wall_time']:.1f} s -> {args.out}")
    elif args.command == "bench":
        cmd_bench(args.data, load_config(args.config, extra), args.out)
        print(f"results in {args.out}")
    elif args.command == "eval":
        print(format_table(cmd_eval(args.results, args.gt)))
    elif args.command == "gradcheck":
        report, ok = cmd_gradcheck(args.primitive, args.corrupt, args.seed)
        print(f"{'primitive':<22}{'dot-product':>14}{'finite-diff':>14}")
        for name, r in report.items():
            print(f"{name:<22}{r['dot']:>14.2e}{r['fd']:>14.2e}")
        if not ok:
            print(f"FAILED: relative error above {GRADCHECK_LIMIT:g}", file=sys.stderr)
            return EXIT_NUMERIC
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args, extra)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (registrar.NumericalError, ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
