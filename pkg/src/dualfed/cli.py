"""``dualfed`` command line: thin argparse front end over :mod:`dualfed.experiments`."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import experiments as X
from .config import load_config
from .errors import DualFedError

OUT_ENV = "DUALFED_OUT"
DEFAULT_ALPHAS = [0.0, 0.1, 0.3, 0.5, 1.0, 2.0, 5.0, 10.0]
DEFAULT_ALPHA_MAX = [0.5, 1.0, 2.0, 5.0]
DEFAULT_TAUS = [10.0, 30.0, 100.0, 300.0]
DEFAULT_KS = [4, 20, 30, 50]
DEFAULT_LAMBDAS = [0.0, 0.1, 0.5, 1.0, 1.5, 2.0]


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int, action="append",
                       help="seed to run (repeatable; replaces the config's seed list)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. toggles.bkd=false (repeatable)")
        p.add_argument("--workers", type=int, default=1, help="parallel (seed, target) runs")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs, plus the command name)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualfed", description="Dual-adapter federated domain generalization simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train", help="leave-one-domain-out federated training"))
    _common(sub.add_parser("motivation", help="single-source adapter x target-domain accuracy grid"))
    p = sub.add_parser("ablate", help="component ablation table")
    _common(p)
    p.add_argument("--hard-domains", action="store_true", help="also run the hard-domain toggle table")
    p = sub.add_parser("sweep-alpha", help="fixed distillation weight sweep")
    _common(p)
    p.add_argument("--alphas", type=_floats, default=DEFAULT_ALPHAS)
    p = sub.add_parser("sweep-alpha-dynamic", help="(alpha_max, tau) grid with MHSA off")
    _common(p)
    p.add_argument("--alpha-max", type=_floats, default=DEFAULT_ALPHA_MAX)
    p.add_argument("--taus", type=_floats, default=DEFAULT_TAUS)
    p = sub.add_parser("sweep-clients", help="client pool size sweep")
    _common(p)
    p.add_argument("--ks", type=_ints, default=DEFAULT_KS)
    p = sub.add_parser("fusion-sweep", help="fusion weight and concat-projection sweep")
    _common(p)
    p.add_argument("--lambdas", type=_floats, default=DEFAULT_LAMBDAS)
    p.add_argument("--no-concat", action="store_true")
    p = sub.add_parser("export-features", help="per-branch penultimate features of the target domain")
    _common(p)
    p.add_argument("--run", help="finished run directory (otherwise train one first)")
    p.add_argument("--client", type=int, default=0)
    p = sub.add_parser("comm-report", help="communication cost table of a finished run")
    _common(p, config=False)
    p.add_argument("run", help="run directory holding transcript.bin")
    p.add_argument("--bytes-per-param", type=int, default=8, choices=(2, 4, 8))
    p.add_argument("--include-logits", action="store_true")
    return ap


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _config(args):
    overrides = list(args.override)
    if args.seed:
        overrides.append(f"seeds={json.dumps(args.seed)}")
    return load_config(args.config, overrides)


def run(args) -> dict:
    out = _out_dir(args)
    cmd = args.command
    if cmd == "comm-report":
        res = X.cmd_comm_report(args.run, out, args.bytes_per_param, args.include_logits)
        return {"total_bytes": res["total_bytes"], "transcript_bytes": res["transcript_bytes"]}
    cfg = _config(args)
    w = args.workers
    if cmd == "train":
        s = X.cmd_train(cfg, out, w)
        return {"target_acc": s["target_acc"]}
    if cmd == "motivation":
        r = X.cmd_motivation(cfg, out)
        return {"matrix": r["matrix"], "spread": r["spread"]}
    if cmd == "ablate":
        r = X.cmd_ablate(cfg, out, args.hard_domains, w)
        return {name: [{k: row[k] for k in ("row", "effective", "mean", "std")} for row in rows]
                for name, rows in r.items()}
    if cmd == "sweep-alpha":
        return {"rows": X.cmd_sweep_alpha(cfg, args.alphas, out, w)}
    if cmd == "sweep-alpha-dynamic":
        return {"rows": X.cmd_sweep_alpha_dynamic(cfg, args.alpha_max, args.taus, out, w)}
    if cmd == "sweep-clients":
        return {"rows": X.cmd_sweep_clients(cfg, args.ks, out, w)}
    if cmd == "fusion-sweep":
        return {"rows": X.cmd_fusion_sweep(cfg, args.lambdas, not args.no_concat, out, w)}
    if cmd == "export-features":
        rows = X.cmd_export_features(cfg, out, args.run, args.client)
        return {"rows": len(rows)}
    raise DualFedError(f"unknown command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except DualFedError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "file_error", "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "out": str(_out_dir(args)), **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
