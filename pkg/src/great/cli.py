"""Command line entry point: ``great {synth,reason,train,eval,infer}``.

Exit codes: 0 success, 1 validation, 2 backend, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import GreatError

log = logging.getLogger("great")


def _backend_from_args(args):
    from .mllm_client import BackendConfig

    if not args.backend:
        return None
    return BackendConfig(
        kind=args.backend,
        base_url=args.base_url or "",
        auth_token_env=args.auth_env or "",
        model_name=args.model or "",
        fixture_path=args.fixture or "",
        max_retries=args.max_retries,
        timeout_s=args.timeout,
        concurrency=args.workers,
    )


def _add_backend_args(p, required=False):
    p.add_argument("--backend", choices=["http", "fixture"], required=required)
    p.add_argument("--fixture", help="fixture answers JSON (fixture backend)")
    p.add_argument("--base-url", help="chat-completions endpoint base URL (http backend)")
    p.add_argument("--model", help="model name sent to the http backend")
    p.add_argument("--auth-env", help="name of the environment variable holding the API token")
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--workers", type=int, default=4, help="conversations in flight")


def cmd_synth(args):
    from .synthetic import SyntheticConfig, generate_synthetic

    spec = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.instances is not None:
        spec["instances_per_object"] = args.instances
    manifest = generate_synthetic(SyntheticConfig.from_dict(spec), args.out, args.seed)
    print(f"wrote {len(manifest.points)} point instances and {len(manifest.images)} images to {args.out}")
    return 0


def cmd_reason(args):
    from .mhacot import PROMPT_TEMPLATES
    from .pipeline import reason

    summary = reason(args.manifest, _backend_from_args(args), args.cache_dir, PROMPT_TEMPLATES)
    print(f"images: {summary['total']}  cache hits: {summary['hit']}  "
          f"new: {summary['miss']}  failed: {summary['fail']}")
    for image_id, err in summary["failed"].items():
        print(f"  FAILED {image_id}: {err}")
    return 0 if summary["fail"] == 0 else 2


def cmd_train(args):
    from .pipeline import TrainConfig, train

    config = TrainConfig.from_file(args.config)
    ckpt, curve = train(config, progress=lambda e, l: print(f"epoch {e:3d}  loss {l:.5f}", flush=True))
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args):
    from .metrics import report_json, report_table
    from .pipeline import evaluate

    report = evaluate(args.checkpoint, args.partition, args.manifest, args.cache_dir)
    reports = {report["partition"]: report}
    print(report_table(reports), end="")
    if args.out:
        Path(args.out).write_text(report_json(reports), encoding="utf-8")
    return 0


def cmd_infer(args):
    from .pipeline import infer

    phi = infer(args.checkpoint, args.image, args.points, args.object, args.out,
                cache_dir=args.cache_dir, backend=_backend_from_args(args), render_path=args.render)
    print(f"wrote {len(phi)} predictions to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="great", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="synthetic config JSON")
    p.add_argument("--instances", type=int, help="instances per object")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reason", help="run the reasoning chain over every manifest image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    _add_backend_args(p, required=True)
    p.set_defaults(func=cmd_reason)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a partition's test side")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", choices=["seen", "unseen_object", "unseen_affordance"])
    p.add_argument("--manifest")
    p.add_argument("--cache-dir")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict an affordance heatmap for one image and point cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--object", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render", help="also save a heatmap rendering (PNG)")
    p.add_argument("--cache-dir")
    _add_backend_args(p)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GreatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
