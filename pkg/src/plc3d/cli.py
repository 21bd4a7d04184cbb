"""Command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.
Progress goes to stderr; ``--json`` prints a machine-readable result on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .benchmark import ABLATION_PRESETS, ABLATION_SEEDS, run_ablation
from .config import PRESETS, default_config_dict, load_config
from .errors import InvalidConfig, PLCError
from .learn.losses import (
    LOSSES,
    finite_diff_check,
    random_instance,
    supervised_as_loss_op,
)
from .pipeline import STAGE_FUNCS, STAGES, Workdir, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("plc3d")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors already; keep the usage text on stderr
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="pipeline config JSON (default: packaged benchmark config)")
    p.add_argument("--seed", type=int, help="root seed, overrides the config")
    p.add_argument("--json", action="store_true", help="print the result as JSON on stdout")
    p.add_argument("--threads", type=int, default=1, help="max worker threads for per-scene stages")
    p.add_argument("--preset", choices=sorted(PRESETS), help="loss/fusion preset applied on top of the config")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")


def build_parser():
    parser = _Parser(prog="plc3d", description="Synthetic open-vocabulary 3D segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "gen": "generate synthetic scenes",
        "caption": "simulate caption sources over every view",
        "associate": "lift 2D regions to point sets",
        "fuse": "fuse caption sources into one pair list per scene",
        "embed": "write the text embedding table",
        "train": "train the point encoder",
        "eval": "evaluate and write the metric report",
        "pipeline": "run every stage in order",
    }
    for name in (*STAGES, "pipeline"):
        _common(sub.add_parser(name, help=helps[name]))

    gc = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    gc.add_argument("--loss", default="all", choices=["all", "supervised", *sorted(LOSSES)])
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=5)
    gc.add_argument("--json", action="store_true")
    gc.add_argument("-q", "--quiet", action="store_true")

    ab = sub.add_parser("ablation", help="compare presets across seeds on in-memory data")
    _common(ab)
    ab.add_argument("--presets", nargs="+", default=list(ABLATION_PRESETS), choices=sorted(PRESETS))
    ab.add_argument("--seeds", nargs="+", type=int, default=list(ABLATION_SEEDS))
    ab.add_argument("--print-default-config", action="store_true", help="dump the packaged config and exit")
    return parser


def _gradcheck(args):
    names = sorted(LOSSES) + ["supervised"] if args.loss == "all" else [args.loss]
    rng = np.random.default_rng(args.seed)
    result = {}
    for name in names:
        worst = 0.0
        for _ in range(args.instances):
            inst = random_instance(rng, n_p=int(rng.integers(16, 129)), n_t=int(rng.integers(2, 17)), d=16)
            if name == "supervised":
                labels = rng.integers(-1, inst.n_t, size=len(inst.point_features))
                op = supervised_as_loss_op(inst.text_embeddings, labels)
            else:
                op = LOSSES[name]
            worst = max(worst, finite_diff_check(op, inst, 100.0, seed=int(rng.integers(2**31))))
        result[name] = worst
        log.info("gradcheck %-10s max relative error %.3e", name, worst)
    ok = all(v <= GRADCHECK_TOL for v in result.values())
    return {"max_rel_error": result, "tolerance": GRADCHECK_TOL, "ok": ok}, ok


def _emit(args, payload, text=None):
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    elif text is not None:
        sys.stdout.write(text)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
        force=True,
    )
    try:
        if args.command == "gradcheck":
            payload, ok = _gradcheck(args)
            text = "".join(f"{k}: {v:.3e}\n" for k, v in payload["max_rel_error"].items())
            _emit(args, payload, text)
            return EXIT_OK if ok else EXIT_RUNTIME
        if args.threads < 1:
            raise InvalidConfig("--threads must be >= 1")
        if args.command == "ablation":
            if args.print_default_config:
                sys.stdout.write(json.dumps(default_config_dict(), indent=2) + "\n")
                return EXIT_OK
            raw = base = None
            if args.config:
                load_config(args.config)  # fail early on a bad file
                raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
                base = Path(args.config).parent
            res = run_ablation(raw, args.presets, args.seeds, args.threads, base)
            lines = [f"{p:<14} novel mIoU {res.mean_novel(p):6.2f}  per seed {res.novel[p]}\n" for p in res.presets]
            _emit(args, res.to_json(), "".join(lines))
            return EXIT_OK

        cfg = load_config(args.config, seed=args.seed, preset=args.preset)
        wd = Workdir(cfg.workdir)
        t0 = time.perf_counter()
        if args.command == "pipeline":
            payload = run_pipeline(cfg, wd, args.threads)
            text = wd.metrics_txt.read_text(encoding="utf-8")
        else:
            payload = STAGE_FUNCS[args.command](cfg, wd, args.threads)
            text = wd.metrics_txt.read_text(encoding="utf-8") if args.command == "eval" else None
        log.info("%s done in %.1f s (workdir %s)", args.command, time.perf_counter() - t0, wd.root)
        _emit(args, payload, text)
        return EXIT_OK
    except InvalidConfig as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (PLCError, OSError) as exc:
        log.error("error: %s", exc)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
