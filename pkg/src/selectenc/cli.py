"""Command line entry point.

Exit codes: 0 success, 2 bad configuration or arguments, 3 when a sweep
finished but some cells failed (the report is still written).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import encryption as enc
from .attack import AttackConfig, AttackInfeasible, invert, trace_export
from .dataio import synth_images
from .evalmetrics import quality
from .fedsim import Client, FedRound, adversary_pipeline, dump_transcript, plaintext_fedavg, run_round
from .harness import SMOKE_CONFIG, ConfigError, emit, load_config, run_sweep
from .lemma import convergence_slope, verify_integral
from .models import ModelSpecError, build, get_spec, loss_and_grad, onehot
from .significance import BudgetExceeded, compute

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


def _shape(text: str) -> tuple:
    try:
        shape = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W,C, got {text!r}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive sizes, got {text!r}")
    return shape


def _model(args):
    return build(get_spec(args.model, input_shape=args.input_shape, num_classes=args.num_classes), args.model_seed)


def _add_model_args(p):
    p.add_argument("--model", required=True, help="linear, lenet-small or cnn-small")
    p.add_argument("--input-shape", type=_shape, default=(8, 8, 1), metavar="H,W,C")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--model-seed", type=int, default=0)


def cmd_sweep(args) -> int:
    if args.config == "smoke":
        cfg = load_config(SMOKE_CONFIG, base_dir=Path.cwd())
    else:
        cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = run_sweep(cfg)
    for p in emit(report, cfg.output_dir, cfg.formats):
        print(f"wrote {p}")
    for metric, ratio in report.minimal_ratio.items():
        print(f"minimal protective ratio {metric}: {'NA' if ratio is None else ratio}")
    if report.failed:
        print(f"{len(report.failed)} cell(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_attack_one(args) -> int:
    params = _model(args)
    k = params.spec.num_classes
    img = synth_images(1, args.sample_seed, k, params.spec.input_shape)[0]
    x0, y0 = img.pixels, onehot(img.label, k)
    _, g0 = loss_and_grad(params, x0, y0)
    scores = compute(args.metric, params, x0, y0, g0)
    mask = enc.selection_mask(scores) if scores.metric_id == "LayerSlice" else enc.top_s_mask(scores, args.ratio)
    view = enc.attacker_view(g0, mask, args.mode, args.xi, seed=args.sample_seed)
    cfg = AttackConfig(iterations=args.iterations, restarts=args.restarts, seed=args.seed,
                       matching=args.matching, alpha_tv=args.alpha_tv)
    print(f"model {params.spec.name} m={params.m} metric {args.metric} encrypted {len(mask)}/{mask.m}")
    try:
        r = invert(params, y0, view, cfg)
    except AttackInfeasible as exc:
        print(f"AttackInfeasible: {exc}")
        return EXIT_OK
    q = quality(r.x_star, x0)
    print(f"mse {q.mse:.6g} psnr {q.psnr:.4g} ssim {q.ssim:.4g} rec_loss {r.final_rec_loss:.6g} "
          f"restart {r.restart_index} seconds {r.wall_seconds:.2f}")
    if args.trace:
        trace_export(r, args.trace)
    return EXIT_OK


def cmd_verify_lemma(args) -> int:
    params = _model(args)
    k = params.spec.num_classes
    for img in synth_images(args.samples, args.sample_seed, k, params.spec.input_shape):
        y = onehot(img.label, k)
        rep = verify_integral(params, img.pixels, y, args.panels)
        line = (f"label {img.label} lhs {rep.exact_lhs:.12g} quadrature {rep.quadrature_rhs:.12g} "
                f"gap {rep.abs_gap_quadrature:.3e} endpoint gap {rep.abs_gap_endpoint:.3e}")
        if args.slope:
            line += f" slope {convergence_slope(params, img.pixels, y):.2f}"
        print(line)
    return EXIT_OK


def cmd_fedsim(args) -> int:
    params = _model(args)
    k = params.spec.num_classes
    n = args.clients
    images = synth_images(n * args.shard, args.sample_seed, k, params.spec.input_shape)
    clients = [Client(i, images[i * args.shard:(i + 1) * args.shard], 1.0 / n) for i in range(n)]
    weights = [c.weight for c in clients]
    clients[-1].weight = 1.0 - math.fsum(weights[:-1])
    rnd = FedRound(clients, params, local_epochs=args.epochs, lr=args.lr, metric=args.metric, ratio=args.ratio)
    out = run_round(rnd, seed=args.seed, transcript=bool(args.transcript))
    ref = plaintext_fedavg(rnd)
    same = np.array_equal(out.new_global.theta, ref.theta)
    print(f"{n} clients, {args.metric} at ratio {args.ratio}: aggregate equals plaintext FedAvg: {same}")
    for i, v in enumerate(out.intercepts):
        print(f"client {i}: leaked {v.leaked}/{v.m} coordinates")
    if args.transcript:
        dump_transcript(out, args.transcript)
    if args.attack_iterations:
        cfg = AttackConfig(iterations=args.attack_iterations, restarts=1, seed=args.seed)
        truths = [c.images[0].pixels for c in sorted(clients, key=lambda c: c.client_id)]
        for o in adversary_pipeline(out, params, cfg, truths):
            print(f"client {o.client}: {o.status}" + (f" mse {o.quality.mse:.6g}" if o.quality else ""))
    return EXIT_OK if same else 1


def cmd_bench_metrics(args) -> int:
    params = _model(args)
    k = params.spec.num_classes
    img = synth_images(1, args.sample_seed, k, params.spec.input_shape)[0]
    x, y = img.pixels, onehot(img.label, k)
    _, g = loss_and_grad(params, x, y)
    print(f"model {params.spec.name} m={params.m}")
    print(f"{'metric':<14}{'mean s':>12}{'std s':>12}")
    for metric in args.metrics.split(","):
        metric = metric.strip()
        times = []
        try:
            for _ in range(args.repeats):
                times.append(compute(metric, params, x, y, g).compute_seconds)
        except BudgetExceeded as exc:
            print(f"{metric:<14}{'-':>12}{'-':>12}  ({exc})")
            continue
        print(f"{metric:<14}{np.mean(times):>12.6f}{np.std(times):>12.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selectenc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="run a config-driven ratio sweep")
    p.add_argument("--config", required=True, help="INI file, or 'smoke' for the bundled smoke config")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack-one", help="attack one synthetic sample under one mask")
    _add_model_args(p)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--mode", choices=(enc.EXCLUDE, enc.BOUNDED_NOISE), default=enc.EXCLUDE)
    p.add_argument("--xi", type=float, default=enc.DEFAULT_XI)
    p.add_argument("--matching", choices=("cosine", "l2"), default="cosine")
    p.add_argument("--alpha-tv", type=float, default=AttackConfig.alpha_tv)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-seed", type=int, default=1)
    p.add_argument("--trace", help="write the loss trace CSV here")
    p.set_defaults(func=cmd_attack_one)

    p = sub.add_parser("verify-lemma", help="check the log-probability line integral numerically")
    _add_model_args(p)
    p.add_argument("--panels", type=int, default=128)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--sample-seed", type=int, default=1)
    p.add_argument("--slope", action="store_true", help="also fit the quadrature convergence slope")
    p.set_defaults(func=cmd_verify_lemma)

    p = sub.add_parser("fedsim", help="one FedAvg round with selective mock encryption")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--model", default="lenet-small")
    p.add_argument("--input-shape", type=_shape, default=(8, 8, 1), metavar="H,W,C")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--shard", type=int, default=2, help="images per client")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-seed", type=int, default=1)
    p.add_argument("--transcript", help="dump the round transcript as JSON here")
    p.add_argument("--attack-iterations", type=int, default=0, help="also invert every intercept")
    p.set_defaults(func=cmd_fedsim)

    p = sub.add_parser("bench-metrics", help="time each significance metric")
    _add_model_args(p)
    p.add_argument("--metrics", default="Grad,Param,ProdSig,SensDiscrete,Sens")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--sample-seed", type=int, default=1)
    p.set_defaults(func=cmd_bench_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
