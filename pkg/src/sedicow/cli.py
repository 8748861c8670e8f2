"""Command-line entry point: synth, train, eval, sweep, score, check-grads."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from .diar_io import read_rttm, read_seglist, segments_to_activity
from .metrics import der_report, format_table, msce, tcpwer_report
from .model import EncoderConfig, SEDiCoW, loss as model_loss
from .synth import dump_dataset, generate_mixture, token_table
from .train import RunConfig, evaluate, format_sweep, sweep, train, write_manifest


def parse_value(text: str):
    """Scalar or list from config text: JSON first, then true/false, then a bare string."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    flat = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        flat[key.strip()] = parse_value(value)
    return flat


def load_run_config(args) -> RunConfig:
    flat = read_config(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        flat[key.strip()] = parse_value(value)
    if getattr(args, "output_dir", None):
        flat["output_dir"] = args.output_dir
    if getattr(args, "seed", None) is not None:
        flat["seed"] = args.seed
    return RunConfig.from_flat(flat)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_run_config(args)
    rng = np.random.default_rng(cfg.seed)
    table = token_table(cfg.data)
    samples = [generate_mixture(cfg.n_speakers, rng, cfg.data, table=table) for _ in range(args.count)]
    out = dump_dataset(cfg.output_dir, samples, cfg.data, cfg.seed)
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    train(cfg, verbose=not args.quiet)
    print(f"checkpoint written to {Path(cfg.output_dir) / 'checkpoint.json'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    model = SEDiCoW.load(args.checkpoint)
    report = evaluate(model, cfg, n=args.samples)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval_report.json"
    _write_json(path, report)
    write_manifest(out, cfg.to_dict(), cfg.seed, report, [path, Path(args.checkpoint)])
    print(json.dumps(report, indent=1))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args)
    model = SEDiCoW.load(args.checkpoint)
    result = sweep(model, cfg, n=args.samples)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep_report.json"
    _write_json(path, result)
    write_manifest(out, cfg.to_dict(), cfg.seed, result, [path, Path(args.checkpoint)])
    print(format_sweep(result), end="")
    return 0


def _records_by_recording(path) -> dict:
    by_rec = {}
    for r in read_rttm(path):
        by_rec.setdefault(r.recording_id, []).append(r)
    return by_rec


def cmd_score(args) -> int:
    if args.metric == "tcpwer":
        report = tcpwer_report(read_seglist(args.ref), read_seglist(args.hyp), args.collar)
    elif args.metric == "der":
        ref, hyp = _records_by_recording(args.ref), _records_by_recording(args.hyp)
        ref_m, hyp_m = {}, {}
        for rec, recs in ref.items():
            hyp_recs = hyp.get(rec, [])
            end = max(r.onset + r.duration for r in recs + hyp_recs)
            duration = args.duration if args.duration is not None else end
            ref_m[rec] = segments_to_activity(recs, args.frame_rate, duration)
            hyp_m[rec] = segments_to_activity(hyp_recs, args.frame_rate, duration)
        report = der_report(ref_m, hyp_m, args.collar)
    else:
        ref = json.loads(Path(args.ref).read_text())
        hyp = json.loads(Path(args.hyp).read_text())
        value = msce(ref, hyp)
        report = {"msce": value, "recordings": len(ref)}
        print(f"{value}")
        if args.output:
            _write_json(Path(args.output), report)
        return 0
    if args.output:
        _write_json(Path(args.output), report)
    print(format_table(report), end="")
    return 0


def cmd_check_grads(args) -> int:
    cfg = EncoderConfig(
        layers=args.layers, d_model=args.d_model, heads=args.heads,
        ff_dim=2 * args.d_model, fusion_hidden=2 * args.d_model, enroll_window=args.window,
    )
    err = gradient_check(cfg, frames=args.frames, seed=args.seed)
    print(f"max relative error {err:.3e}")
    return 0 if err < args.tolerance else 1


def gradient_check(cfg: EncoderConfig, frames: int = 20, seed: int = 0, eps: float = 1e-5) -> float:
    """Finite-difference check of the full loss on a randomly perturbed tiny model.

    ``frames`` and ``cfg.enroll_window`` count encoder frames (after subsampling).
    Parameters are jittered away from initialization so that zero-initialized
    fusion outputs and identity FDDT sites carry non-trivial gradients.
    """
    rng = np.random.default_rng(seed)
    model = SEDiCoW(cfg, seed=seed)
    for p in model.parameters():
        p.data += rng.normal(0.0, 0.1, size=p.shape)
    t0 = frames * cfg.stride
    x = rng.normal(size=(1, t0, cfg.n_features))
    stno = rng.dirichlet(np.ones(4), size=(1, frames))
    w = cfg.enroll_window
    e = rng.normal(size=(1, w * cfg.stride, cfg.n_features))
    e_stno = rng.dirichlet(np.ones(4), size=(1, w))
    targets = rng.integers(0, cfg.vocab, size=(1, frames))
    targets[0, :2] = -1
    return ag.finite_diff_check(lambda: model_loss(model(x, stno, e, e_stno), targets), model.parameters(), eps)


# parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedicow", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def run_options(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="dump a synthetic dataset")
    run_options(p)
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    run_options(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                              ("sweep", cmd_sweep, "enrollment composition x overlap grid")):
        p = sub.add_parser(name, help=help_)
        run_options(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--samples", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("score", help="score hypotheses against references")
    scores = p.add_subparsers(dest="metric", required=True)
    s = scores.add_parser("tcpwer", help="segment-list JSON files")
    s.add_argument("--collar", type=float, default=5.0)
    s = scores.add_parser("der", help="RTTM files")
    s.add_argument("--collar", type=float, default=0.25)
    s.add_argument("--frame-rate", type=float, default=100.0)
    s.add_argument("--duration", type=float, help="recording length in seconds")
    scores.add_parser("msce", help="JSON arrays of per-recording speaker counts")
    for s in scores.choices.values():
        s.add_argument("--ref", required=True)
        s.add_argument("--hyp", required=True)
        s.add_argument("--output", help="write the JSON report here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("check-grads", help="finite-difference gradient check on a tiny model")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grads)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
