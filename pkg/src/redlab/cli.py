"""Command-line entry point: ``redlab {audit-params,train,grad-check,ablate}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .audit import PRESETS, AuditError, HostDescriptor, run_audit
from .config import ConfigError, load_config
from .experiment import ABLATION_SUITES, GRAD_TOL, ablation_table, run_ablation, run_grad_check, run_training
from .peft import TRAINABLE_METHODS, PeftSpec
from .train import DivergenceError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg):
    out = args.out or (cfg.output_dir if cfg is not None else None)
    return Path(out) if out else None


def cmd_audit_params(args) -> int:
    try:
        if args.descriptor:
            raw = json.loads(Path(args.descriptor).read_text(encoding="utf-8"))
            hosts = [HostDescriptor.from_dict(raw)]
        elif args.all or not args.hosts:
            hosts = None
        else:
            missing = [h for h in args.hosts if h not in PRESETS]
            if missing:
                raise AuditError(f"unknown host preset(s) {missing}; known: {sorted(PRESETS)}")
            hosts = [PRESETS[h] for h in args.hosts]
    except (OSError, json.JSONDecodeError, AuditError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    extra = []
    if hosts is not None and args.descriptor:
        extra = [PeftSpec("red"), PeftSpec("lora", rank=args.rank), PeftSpec("adapter", rank=args.rank),
                 PeftSpec("adapter_ffn", rank=args.rank), PeftSpec("bitfit")]
        if hosts[0].total_params is not None:
            extra.append(PeftSpec("full_ft"))
    report = run_audit(hosts, extra)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text, encoding="utf-8")
        (out / "table.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out = _out_dir(args, cfg)
    try:
        report = run_training(cfg, out_dir=out, precision=args.precision)
    except DivergenceError as exc:
        _err(f"training diverged: {exc}")
        if out is not None and exc.report is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "steps.csv").write_text(exc.report.steps_csv(), encoding="utf-8")
        return EXIT_DIVERGED
    print(f"{report.method}: trainable={report.trainable_params} best_epoch={report.best_epoch} "
          f"valid_acc={report.best_valid_acc:.4f} test_acc={report.test_acc:.4f}")
    if out is not None:
        print(f"wrote {out / 'report.json'} and {out / 'steps.csv'}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    if args.precision != "verify":
        _err("grad-check runs at verification precision only")
        return EXIT_CONFIG
    methods = [cfg.peft]
    if args.all_methods:
        methods = [PeftSpec("red"), PeftSpec("red", positions="both"),
                   PeftSpec("lora", rank=2, alpha=4), PeftSpec("adapter", rank=2),
                   PeftSpec("adapter_ffn", rank=2), PeftSpec("bitfit")]
    results = [run_grad_check(cfg.with_peft(m)) for m in methods]
    lines = [f"{'method':<20}{'parameter':<40}{'max rel err':>14}  status"]
    for res in results:
        for name, err in res.errors.items():
            lines.append(f"{res.method:<20}{name:<40}{err:>14.3e}  {'ok' if err <= GRAD_TOL else 'FAIL'}")
    ok = all(r.passed for r in results)
    lines.append(f"overall: {'pass' if ok else 'FAIL'} (tolerance {GRAD_TOL:g})")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out = _out_dir(args, None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.txt").write_text(text, encoding="utf-8")
        (out / "grad_check.json").write_text(
            json.dumps({r.method: r.errors for r in results}, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_ablate(args) -> int:
    if args.suite not in ABLATION_SUITES:
        _err(f"unknown ablation suite {args.suite!r}; expected one of {sorted(ABLATION_SUITES)}")
        return EXIT_CONFIG
    try:
        cfg = _load(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        rows = run_ablation(args.suite, cfg, jobs=args.jobs)
    except DivergenceError as exc:
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED
    text = ablation_table(args.suite, rows)
    print(text, end="")
    out = _out_dir(args, cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text, encoding="utf-8")
        (out / "table.json").write_text(json.dumps({"suite": args.suite, "rows": rows}, indent=2) + "\n",
                                        encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="redlab", description="Desk-scale PEFT laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("audit-params", help="closed-form trainable-parameter counts")
    a.add_argument("hosts", nargs="*", help=f"host presets ({', '.join(PRESETS)})")
    a.add_argument("--all", action="store_true", help="every preset plus the reduction-factor claims")
    a.add_argument("--descriptor", help="JSON host descriptor to count instead of presets")
    a.add_argument("--rank", type=int, default=8, help="rank for LoRA/adapter rows of a custom descriptor")
    a.add_argument("--out", help="directory for table.txt / table.json")
    a.set_defaults(func=cmd_audit_params)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment JSON config")
        sp.add_argument("--out", help="output directory (overrides output_dir in the config)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--precision", choices=("train", "verify"), default=None)

    t = sub.add_parser("train", help="train one PEFT config")
    common(t)
    t.set_defaults(func=cmd_train, precision_default="train")

    g = sub.add_parser("grad-check", help="finite-difference gradient check of the PEFT parameters")
    common(g)
    g.add_argument("--all-methods", action="store_true",
                   help=f"check every trainable method ({', '.join(m for m in TRAINABLE_METHODS if m != 'full_ft')})")
    g.set_defaults(func=cmd_grad_check, precision_default="verify")

    b = sub.add_parser("ablate", help="run an ablation suite")
    b.add_argument("suite", help=f"one of {', '.join(ABLATION_SUITES)}")
    common(b)
    b.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    b.set_defaults(func=cmd_ablate, precision_default="train")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "precision", None) is None and hasattr(args, "precision_default"):
        args.precision = args.precision_default
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
