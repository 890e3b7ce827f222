"""Command line entry point: ``defham {validate,run,sweep,audit}``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ParseError, SaturatedMoment, ValidationError, load_config
from .runner import audit_directory, default_threads, dump_json, execute_run, execute_sweep


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="defham", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("validate", "parse and validate a scenario file"),
                        ("run", "single run with audits and artifacts"),
                        ("sweep", "eps sweep and n refinement"),
                        ("audit", "re-audit a stored run directory")):
        sp = sub.add_parser(verb, help=help_)
        sp.add_argument("target", help="scenario file (run directory for audit)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $DEFHAM_THREADS or 1)")
        sp.add_argument("--seed", type=int, default=None, help="override sampler.seed")
        sp.add_argument("--out", default=None, help="output directory")
    return ap


def _fail(kind: str, message: str, code: int, **extra) -> int:
    sys.stdout.write(dump_json({"ok": False, "error": kind, "message": message, **extra}))
    return code


def _print_summary(outcome) -> None:
    s = outcome.summary
    lines = [f"scenario     {s.get('scenario')}"]
    if "final_mass" in s:
        lines += [f"final mass   {s['final_mass']!r}", f"escaped      {s['escaped']}",
                  f"violations   {s['violations']}"]
    for row in s.get("refinement", []):
        lines.append(f"n={row['n']:<6d} max weak residual {row['max_weak_residual']:.3e}")
    if "mass" in s:
        lim = s["mass"]["limit"]
        lines.append(f"limit mass   {' '.join(f'{v:.4f}' for v in lim)}")
    for a in outcome.audits:
        lines.append(f"[{'pass' if a.ok else 'FAIL'}] {a.name}")
    lines.append("OK" if outcome.ok else "AUDIT FAILURE")
    print("\n".join(lines))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    threads = args.threads if args.threads is not None else default_threads()
    try:
        if args.verb == "audit":
            outcome = audit_directory(args.target)
            _print_summary(outcome)
            return 0 if outcome.ok else 1
        cfg = load_config(args.target)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = replace(cfg, outputs=replace(cfg.outputs, directory=args.out))
        if args.verb == "validate":
            print(f"{args.target}: ok ({cfg.name}, d={cfg.d}, N={cfg.sampler.N})")
            return 0
        run = execute_run if args.verb == "run" else execute_sweep
        outcome = run(cfg, threads=threads)
        _print_summary(outcome)
        return 0 if outcome.ok else 1
    except ParseError as exc:
        return _fail("ParseError", str(exc), 2, line=exc.line, column=exc.col)
    except ValidationError as exc:
        return _fail("ValidationError", str(exc), 2,
                     fields=[{"path": p, "message": m} for p, m in exc.errors])
    except SaturatedMoment as exc:
        return _fail("SaturatedMoment", str(exc), 3)
    except OSError as exc:
        return _fail("IOError", str(exc), 4, path=getattr(exc, "filename", None))
    except (RuntimeError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 5)


if __name__ == "__main__":
    sys.exit(main())
