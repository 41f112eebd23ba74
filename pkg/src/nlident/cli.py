"""Command-line interface: ``nlident {generate,identify,validate,report,run}``.

Exit codes: 0 success, 2 configuration or input error, 3 fit failure,
4 time budget exceeded.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as hz
from .exceptions import SpecError
from .signals import save_dataset


def _config(args):
    if args.config is None:
        return None
    return hz.ExperimentConfig.load(args.config)


def cmd_generate(args):
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    est, val = hz.generate_datasets(cfg)
    for ds in (est, val):
        save_dataset(ds, out / f"dataset_{ds.role}")
    print(f"wrote {out / 'dataset_estimation'}.csv and {out / 'dataset_validation'}.csv "
          f"({len(est)} operating points, N={est.period_length}, P={est.period_count})")
    return hz.EXIT_OK


def _method_config(args, cfg):
    if cfg is not None:
        try:
            m = cfg.method(args.method)
        except SpecError:
            m = None
        if m is not None:
            return m if args.budget is None else hz.MethodConfig(
                m.name, m.type, m.options, args.budget)
    if args.method not in hz.METHOD_DEFAULTS:
        raise SpecError(f"unknown method {args.method!r}; expected one of "
                        f"{sorted(hz.METHOD_DEFAULTS)}")
    budget = args.budget if args.budget is not None else \
        (cfg.budget_seconds if cfg is not None else 600.0)
    return hz.MethodConfig(args.method, args.method, dict(hz.METHOD_DEFAULTS[args.method]),
                           budget)


def cmd_identify(args):
    cfg = _config(args)
    data = Path(args.data)
    est = hz.load_experiment_data(data, "estimation")
    method = _method_config(args, cfg)
    ref = int(est.meta.get("reference_operating_point", len(est) // 2 + 1)) - 1
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else int(est.meta.get("seed", 0)))
    val_path = data / "dataset_validation.json" if data.is_dir() else None
    val = hz.load_experiment_data(data, "validation") if val_path and val_path.exists() else est
    res, model = hz.fit_and_score(method, est, val, ref, seed)
    out = Path(args.out) if args.out else (data if data.is_dir() else data.parent)
    out.mkdir(parents=True, exist_ok=True)
    if model is not None:
        hz.atomic_write(out / f"model_{method.name}.json", hz.dump_json(hz.model_to_dict(model)))
    d = res.to_dict(timing=True)
    d["schema_version"] = hz.SCHEMA_VERSION
    d["dataset_role"] = val.role
    hz.atomic_write(out / f"result_{method.name}.json", hz.dump_json(d))
    if res.status == "ok":
        print(f"{method.name}: {res.n_params} parameters, fitted in {res.fit_seconds:.1f} s; "
              f"e_rel on the {val.role} set:")
        print(hz.error_table(val.offsets, res.e_rel))
        print(f"model written to {out / f'model_{method.name}.json'}")
        return hz.EXIT_OK
    print(f"{method.name}: {res.status}: {res.message}", file=sys.stderr)
    return hz.EXIT_BUDGET if res.status == "budget_exceeded" else hz.EXIT_FIT


def cmd_validate(args):
    model = hz.load_model(args.model)
    ds = hz.load_experiment_data(args.data, "validation")
    e = hz.evaluate(model, ds)
    print(f"{Path(args.model).name}: {hz.count_parameters(model)} parameters, "
          f"{ds.role} set {args.data}")
    print(hz.error_table(ds.offsets, e))
    return hz.EXIT_OK


def cmd_report(args):
    results = hz.merge_reports(args.results)
    rows = [[m.name, m.average, m.minimum, m.maximum, m.n_params, m.n_params_table,
             m.fit_seconds, m.status] for m in results]
    md = hz.table_markdown(rows)
    print(md, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        hz.atomic_write(out / "table.csv", hz.table_csv(rows))
        hz.atomic_write(out / "table.md", md)
    return hz.EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    report = hz.run_experiment(cfg, args.out)
    rows = report.table_rows()
    print(hz.table_markdown(rows), end="")
    return report.exit_code


def build_parser():
    p = argparse.ArgumentParser(prog="nlident", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write estimation and validation datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="output directory (default: config output_dir)")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("identify", help="fit one method on a generated dataset")
    i.add_argument("--data", required=True, help="directory written by generate, or a dataset")
    i.add_argument("--method", required=True, help=", ".join(sorted(hz.METHOD_DEFAULTS)))
    i.add_argument("--config", help="take method options from this config")
    i.add_argument("--budget", type=float, help="time budget in seconds")
    i.add_argument("--seed", type=int)
    i.add_argument("--out", help="output directory (default: the data directory)")
    i.set_defaults(func=cmd_identify)

    v = sub.add_parser("validate", help="score a saved model on a dataset")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("report", help="merge result files into one table")
    r.add_argument("results", nargs="+", help="report.json or result_<method>.json files")
    r.add_argument("--out", help="also write table.csv and table.md here")
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("run", help="generate, identify and validate every configured method")
    x.add_argument("--config", required=True)
    x.add_argument("--out", help="output directory (default: config output_dir)")
    x.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SpecError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return hz.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
