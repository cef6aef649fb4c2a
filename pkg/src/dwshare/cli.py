"""Command-line front end.

    python -m dwshare pretrain   --config run.cfg --out runs/base
    python -m dwshare add-domain --config run.cfg --bundle runs/base/bundle --domain stripes --out runs/stripes
    python -m dwshare train-gate --config run.cfg --bundle runs/all/bundle --domain stripes --region late --out runs/gate
    python -m dwshare eval       --config run.cfg --bundle runs/gate/bundle --domain stripes
    python -m dwshare score      --config run.cfg [--bundle DIR]
    python -m dwshare params     --config run.cfg
    python -m dwshare gradcheck
    python -m dwshare desk       --config run.cfg --out runs/desk

Exit codes: 0 success, 2 bad config or arguments, 3 bad or missing data,
4 numerical failure (non-finite loss or failed gradient check).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path

from . import evalscore
from .config import RunConfig
from .errors import ConfigError, DataError, DWShareError, NumericalError
from .gating import attach_gates, load_bundle, save_bundle, train_gates
from .model import DomainSpec, add_domain, build_base, with_sharing_mode
from .training import EpochMetrics, evaluate, finetune_domain, pretrain_base

log = logging.getLogger("dwshare")

METRIC_COLUMNS = ("epoch", "split", "loss", "accuracy")


def write_metrics(path: Path, rows: list[EpochMetrics]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in rows:
            w.writerow(m.row())
    return path


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.get("output_dir"))
    if args.bundle and out.resolve() == Path(args.bundle).resolve().parent:
        # outputs land next to the input bundle; make sure we never write into it
        if (out / "bundle").resolve() == Path(args.bundle).resolve():
            raise ConfigError(f"--out {out} would overwrite the input bundle {args.bundle}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(args, *names):
    for n in names:
        if not getattr(args, n):
            raise ConfigError(f"{args.command} needs --{n}")


def _splits(cfg: RunConfig, name: str):
    splits = cfg.datasets(name)
    if "train" not in splits:
        raise DataError(f"domain {name!r} has no train split")
    return splits


def _adopt_mode(model, cfg: RunConfig):
    """Bring a loaded model to the configured sharing regime, if it can change."""
    want = cfg.model_config()
    have = model.config
    if (want.sharing_mode, want.last_layer_domain_specific) == (have.sharing_mode, have.last_layer_domain_specific):
        return model
    if model.num_domains != 1:
        raise ConfigError(f"bundle uses {have.sharing_mode!r} with {model.num_domains} domains; "
                          f"cannot switch to {want.sharing_mode!r}")
    return with_sharing_mode(model, want.sharing_mode, want.last_layer_domain_specific)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    name = cfg.base_domain
    splits = _splits(cfg, name)
    train = splits["train"]
    model = build_base(cfg.model_config(), cfg.seed, cfg.dtype)
    rows = pretrain_base(model, cfg.domain_spec(name, train.num_classes), train, cfg.optim("pretrain"),
                         seed=cfg.seed, test=splits.get("test"))
    save_bundle(model, out / "bundle")
    write_metrics(out / "metrics.csv", rows)
    cfg.write_resolved(out)
    print(f"pretrained {name}: train accuracy {rows[len(rows) - 1 - ('test' in splits)].accuracy:.4f}")
    return 0


def cmd_add_domain(args, cfg: RunConfig) -> int:
    _need(args, "bundle", "domain")
    out = _out_dir(args, cfg)
    model, gated = load_bundle(args.bundle)
    model = _adopt_mode(model, cfg)
    splits = _splits(cfg, args.domain)
    train = splits["train"]
    d = add_domain(model, cfg.domain_spec(args.domain, train.num_classes))
    rows = finetune_domain(model, d, train, cfg.optim("finetune"), seed=cfg.seed, test=splits.get("test"))
    # earlier gates mixed fewer domains; they no longer fit and are dropped
    save_bundle(model, out / "bundle")
    write_metrics(out / "metrics.csv", rows)
    cfg.write_resolved(out)
    print(f"added {args.domain}: {rows[-1].split} accuracy {rows[-1].accuracy:.4f}")
    return 0


def cmd_train_gate(args, cfg: RunConfig) -> int:
    _need(args, "bundle", "domain")
    region = args.region or cfg.get("gate.region")
    out = _out_dir(args, cfg)
    model, gated = load_bundle(args.bundle)
    splits = _splits(cfg, args.domain)
    gm = attach_gates(model, args.domain, region, seed=cfg.seed, per_example=cfg.per_example)
    ungated = evaluate(model, args.domain, splits["test"]) if "test" in splits else None
    history = []
    rows = train_gates(gm, splits["train"], cfg.optim("gate"), seed=cfg.seed, test=splits.get("test"),
                       on_scales=history.append)
    if ungated is not None:
        ungated.epoch, ungated.split = rows[-1].epoch, "test_ungated"
        rows.append(ungated)
    gated[args.domain] = gm
    save_bundle(model, out / "bundle", list(gated.values()))
    write_metrics(out / "metrics.csv", rows)
    with (out / "gate_scales.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "layer", *[model.domains[i].name for i in range(model.num_domains)]])
        for n, step in enumerate(history):
            for layer, s in sorted(step.items()):
                w.writerow([n, layer, *[f"{float(v):.6f}" for v in s]])
    cfg.write_resolved(out)
    for layer, s in sorted(gm.scales().items()):
        print(f"layer {layer}: " + " ".join(f"{model.domains[i].name}={float(v):.4f}" for i, v in enumerate(s)))
    return 0


def _eval_errors(bundle, cfg: RunConfig, names) -> dict[str, float]:
    model, gated = load_bundle(bundle)
    errors = {}
    for name in names:
        splits = cfg.datasets(name)
        if "test" not in splits:
            raise DataError(f"domain {name!r} has no test split")
        gm = gated.get(name)
        errors[name] = evalscore.test_error(model, name, splits["test"], gm.gates if gm else None)
    return errors


def cmd_eval(args, cfg: RunConfig) -> int:
    _need(args, "bundle")
    model, _ = load_bundle(args.bundle)
    names = [args.domain] if args.domain else [s.name for s in model.domains]
    errors = _eval_errors(args.bundle, cfg, names)
    for name, e in errors.items():
        print(f"{name} error {e:.6f}")
    if args.out:
        out = _out_dir(args, cfg)
        with (out / "eval.csv").open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["domain", "error"])
            for name, e in errors.items():
                w.writerow([name, f"{e:.6f}"])
        cfg.write_resolved(out)
    return 0


def _keyed(cfg: RunConfig, prefix: str) -> dict[str, float]:
    out = {}
    for k, v in cfg.values.items():
        if k.startswith(prefix):
            try:
                out[k[len(prefix):]] = float(v)
            except ValueError:
                raise ConfigError(f"{k}: expected a number, got {v!r}") from None
    return out


def cmd_score(args, cfg: RunConfig) -> int:
    explicit = _keyed(cfg, "score.error.")
    emax = _keyed(cfg, "score.emax.")
    baseline = _keyed(cfg, "score.baseline.")
    names = cfg.domains or list(explicit) or list(emax) or list(baseline)
    if not names:
        raise ConfigError("score needs data.domains or score.* entries naming the domains")
    missing = [n for n in names if n not in explicit]
    errors = dict(explicit)
    if missing:
        if not args.bundle:
            raise ConfigError(f"no score.error for {missing} and no --bundle to evaluate them")
        errors.update(_eval_errors(args.bundle, cfg, missing))
    gamma = float(cfg.get("score.gamma"))
    e_max = []
    for n in names:
        if n in emax:
            e_max.append(emax[n])
        elif n in baseline:
            e_max.append(evalscore.emax_from_baseline([baseline[n]]).e_max[0])
        else:
            raise ConfigError(f"domain {n!r} needs score.emax.{n} or score.baseline.{n}")
    spec = evalscore.ScoreSpec(tuple(e_max), (gamma,) * len(names), tuple(names))
    errs = [errors[n] for n in names]
    for r in evalscore.score_rows(errs, spec):
        print(f"{r['domain']:<16} error {r['error']:.4f}  e_max {r['e_max']:.4f}  contribution {r['contribution']:.2f}")
    score = evalscore.decathlon_score(errs, spec)
    print(f"score {score:.2f}")
    if args.out:
        out = _out_dir(args, cfg)
        evalscore.write_score_csv(out / "score.csv", errs, spec)
        cfg.write_resolved(out)
    return 0


def cmd_params(args, cfg: RunConfig) -> int:
    names = ([cfg.get("data.base")] if cfg.get("data.base") else []) + cfg.domains
    classes = [int(cfg.domain_keys(n).get("classes", 10)) for n in names] or [10]
    extra = cfg.get("params.new_classes")
    try:
        new = int(extra) if extra else None
    except ValueError:
        raise ConfigError(f"params.new_classes: expected int, got {extra!r}") from None
    report = evalscore.count_params(cfg.model_config(), len(classes), num_classes=classes, new_classes=new)
    print(evalscore.format_report(report))
    if args.out:
        out = _out_dir(args, cfg)
        evalscore.write_param_csv(out / "params.csv", report)
        with (out / "params_summary.csv").open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["key", "value"])
            for k, v in report.summary().items():
                w.writerow([k, v])
        cfg.write_resolved(out)
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import run_all

    results = run_all(seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_desk(args, cfg: RunConfig) -> int:
    from .experiment import DeskSettings, run_desk

    out = _out_dir(args, cfg)
    s = DeskSettings(seed=cfg.seed, model=cfg.model_config(), pretrain=cfg.optim("pretrain"),
                     finetune=cfg.optim("finetune"), gate=cfg.optim("gate"), gate_region=args.region or cfg.get("gate.region"))
    r = run_desk(s, out)
    cfg.write_resolved(out)
    for mode, accs in r.accuracy.items():
        print(f"{mode:<16} " + "  ".join(f"{k}={v:.4f}" for k, v in accs.items()))
    print("gated            " + "  ".join(f"{k}={v:.4f}" for k, v in r.gated_accuracy.items()))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain, "add-domain": cmd_add_domain, "train-gate": cmd_train_gate,
    "eval": cmd_eval, "score": cmd_score, "params": cmd_params, "gradcheck": cmd_gradcheck, "desk": cmd_desk,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwshare", description="Multi-domain separable-convolution networks.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat key=value run config (required except for gradcheck)")
    p.add_argument("--domain", help="domain name")
    p.add_argument("--region", choices=("early", "middle", "late"), help="gate placement")
    p.add_argument("--bundle", help="input model bundle directory (never modified)")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--serial", action="store_true", help="single-threaded math for bit-exact reruns")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results")
    return p


def _serial():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command != "gradcheck":
            if not args.config:
                raise ConfigError(f"{args.command} needs --config")
            cfg = RunConfig.from_file(args.config)
            if args.seed is not None:
                cfg.override("seed", args.seed)
        with _serial() if args.serial else contextlib.nullcontext():
            return COMMANDS[args.command](args, cfg)
    except DWShareError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: missing file {e.filename}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
