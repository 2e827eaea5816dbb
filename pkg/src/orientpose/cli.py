"""Command line: ``orientpose <gen-data|train|eval|sweep|render-maps> ...``.

Every command writes into a run directory and refreshes its ``manifest.json``.
Failed internal checks exit with status 3, bad input with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import perturb as P
from . import synthdata as S
from . import train as T

log = logging.getLogger("orientpose")


def _config(args) -> T.ExperimentConfig:
    cfg = T.ExperimentConfig.load(args.config) if args.config else T.ExperimentConfig()
    over = {}
    for key in ("seed", "epochs1", "epochs2", "n_train", "n_val", "dataset", "eval_seeds"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return replace(cfg, **over) if over else cfg


def _perturb_spec(text: str) -> P.PerturbSpec:
    """``kind`` or ``kind:key=value,key=value`` (e.g. ``translation:tau=0.4``)."""
    kind, _, rest = text.partition(":")
    kw: dict = {}
    for item in filter(None, rest.split(",")):
        key, _, val = item.partition("=")
        if key in ("count", "size"):
            lo, hi = val.split("-")
            kw[key] = (int(lo), int(hi)) if key == "count" else (float(lo), float(hi))
        elif key == "seed":
            kw[key] = int(val)
        else:
            kw[key] = float(val)
    try:
        return P.PerturbSpec(kind, **kw)
    except TypeError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = S.generate_dataset(cfg.n_train, cfg.seed, cfg.synth)
    S.write_dataset(samples, out, cfg.synth.map_size)
    print(f"wrote {len(samples)} samples to {out} ({out.stat().st_size} bytes)")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    run = Path(args.run_dir)
    if args.step == 1:
        T.run_experiment(cfg, run, steps=(1,), sweep=False)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else run / "step1.ckpt"
        if not ckpt.exists():
            print(f"error: step 2 needs a step-1 checkpoint, {ckpt} not found", file=sys.stderr)
            return 2
        T.run_experiment(cfg, run, steps=(2,), sweep=False, model=T.load_model(ckpt))
    print(f"trained step {args.step}; artifacts in {run}")
    return 0


def _model_for(args, run: Path):
    if args.checkpoint:
        return T.load_model(args.checkpoint)
    for name in ("step2.ckpt", "step1.ckpt"):
        if (run / name).exists():
            return T.load_model(run / name)
    raise FileNotFoundError(f"no checkpoint in {run}")


def _sweep(args, specs) -> int:
    cfg = _config(args)
    run = Path(args.run_dir)
    model = _model_for(args, run)
    _, val = T.load_data(cfg)
    rows = T.eval_sweep(model, val, specs, cfg.eval_seeds, cfg.eval_seed)
    T.write_sweep(Path(args.out) if args.out else run, rows)
    print((run / "eval_table.txt").read_text() if not args.out else
          (Path(args.out) / "eval_table.txt").read_text())
    T.write_manifest(run, cfg, " ".join(sys.argv[1:]) or args.command)
    return 0


def cmd_eval(args) -> int:
    return _sweep(args, args.perturb or [P.PerturbSpec("none")])


def cmd_sweep(args) -> int:
    return _sweep(args, _config(args).eval_perturbations)


def cmd_render_maps(args) -> int:
    cfg = _config(args)
    run = Path(args.run_dir)
    model = _model_for(args, run)
    _, val = T.load_data(cfg)
    paths = T.render_overlays(model, val, run / "renders", cfg.synth, args.count)
    T.write_manifest(run, cfg, "render-maps")
    print(f"wrote {len(paths)} images under {run / 'renders'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orientpose", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n-train", dest="n_train", type=int)
        sp.add_argument("--n-val", dest="n_val", type=int)
        sp.add_argument("--dataset")
        if run:
            sp.add_argument("--run-dir", dest="run_dir", default="runs/default")

    g = sub.add_parser("gen-data", help="write a synthetic dataset file")
    common(g, run=False)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training step 1 or 2")
    common(t)
    t.add_argument("--step", type=int, choices=(1, 2), required=True)
    t.add_argument("--epochs1", type=int)
    t.add_argument("--epochs2", type=int)
    t.add_argument("--checkpoint", help="step-1 checkpoint for step 2")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate chosen perturbations"),
                                 ("sweep", cmd_sweep, "evaluate the configured perturbation list")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        e.add_argument("--checkpoint")
        e.add_argument("--out", help="directory for the CSVs (default: run dir)")
        e.add_argument("--eval-seeds", dest="eval_seeds", type=int)
        if name == "eval":
            e.add_argument("--perturb", type=_perturb_spec, action="append",
                           help="e.g. none, occlusion, translation:tau=0.4, bbox_noise:sigma_c=0.1")
        e.set_defaults(func=func)

    r = sub.add_parser("render-maps", help="overlay and per-channel map images")
    common(r)
    r.add_argument("--checkpoint")
    r.add_argument("--count", type=int, default=4)
    r.set_defaults(func=cmd_render_maps)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AssertionError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 3
    except (T.ConfigError, S.DatasetError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
