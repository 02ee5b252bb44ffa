"""Command-line entry points: generate / recover / sweep / nyquist."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .harness import (
    ExperimentConfig,
    emit_report,
    generate_benchmark_data,
    load_dataset,
    load_real_csv,
    data_nyquist_rate,
    run_experiment,
    save_dataset,
)
from .neural import TrainConfig, recover


def _train_config(doc: dict) -> TrainConfig:
    fields = dict(doc)
    for key in ("shift_channels", "head_layers"):
        if key in fields:
            fields[key] = tuple(fields[key])
    return TrainConfig(**fields)


def _experiment_config(doc: dict) -> ExperimentConfig:
    fields = dict(doc)
    if "train" in fields:
        fields["train"] = _train_config(fields["train"])
    for key in ("mask", "injected_shifts"):
        if key in fields and fields[key] is not None:
            fields[key] = tuple(fields[key])
    if "generation" in fields:
        fields["generation"] = tuple(sorted(dict(fields["generation"]).items()))
    return ExperimentConfig(**fields)


def _cmd_generate(args) -> int:
    overrides = json.loads(args.overrides) if args.overrides else {}
    if args.preset == "unperturbed":
        overrides["perturbation"] = False
    elif args.preset.startswith("shifted"):
        overrides["injected_shift"] = int(args.preset.split(":", 1)[1]) if ":" in args.preset else 10
    spec, coeffs, traces, meta = generate_benchmark_data(args.system, overrides, seed=args.seed)
    save_dataset(args.out, spec, coeffs, traces, meta)
    print(f"wrote {len(traces)} traces for {spec.name} to {args.out}")
    return 0


def _cmd_recover(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    train_cfg = _train_config(doc.get("train", {}))
    spec, coeffs_true, traces, _ = load_dataset(args.data)
    mask = doc.get("mask")
    if mask is not None:
        from .dynamics import SensingMask
        from .harness import apply_mask_to_traces

        traces = apply_mask_to_traces(traces, SensingMask(tuple(mask)))
    result = recover(
        traces,
        spec,
        args.arch,
        train_cfg,
        k_window=int(doc.get("k_window", 200)),
        split_ratio=float(doc.get("split_ratio", 0.75)),
        coeffs_true=coeffs_true,
    )
    out = {
        "arch": args.arch,
        "system": spec.name,
        "coeffs_est": result.coeffs.values.tolist(),
        "coeff_names": list(spec.coeff_names),
        "shifts": np.asarray(result.shifts).tolist(),
        "rmse_y": result.rmse_y,
        "rmse_coeffs": result.rmse_coeffs,
        "loss_history": result.loss_history,
    }
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    print(f"rmse_y={result.rmse_y:.6g} rmse_coeffs={result.rmse_coeffs}")
    return 0


def _cmd_sweep(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    doc["experiment"] = args.experiment
    cfg = _experiment_config(doc)
    rows = run_experiment(cfg)
    fmt = "json" if str(args.out).endswith(".json") else "csv"
    emit_report(rows, fmt, args.out, include_runtime=args.include_runtime)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_nyquist(args) -> int:
    traces, _ = load_real_csv(args.data)
    rate = data_nyquist_rate(traces)
    print(f"{rate:.6g}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="physrec",
        description="Recover control-affine model coefficients from sampled traces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="simulate a benchmark dataset")
    p_gen.add_argument("--system", required=True, help="preset name or system config path")
    p_gen.add_argument("--preset", default="default", help="default | unperturbed | shifted[:N]")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--overrides", help="JSON dict of generation overrides")
    p_gen.set_defaults(fn=_cmd_generate)

    p_rec = sub.add_parser("recover", help="fit coefficients to a dataset directory")
    p_rec.add_argument("--arch", required=True, choices=("ltc", "ctrnn", "node", "sindyc"))
    p_rec.add_argument("--data", required=True)
    p_rec.add_argument("--config", required=True, help="JSON file of training settings")
    p_rec.add_argument("--out", required=True)
    p_rec.set_defaults(fn=_cmd_recover)

    p_sweep = sub.add_parser("sweep", help="run an experiment sweep")
    p_sweep.add_argument("--experiment", required=True, choices=("c1", "c2", "c5", "aid", "eeg"))
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--include-runtime", action="store_true")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_nyq = sub.add_parser("nyquist", help="estimate the Nyquist rate of a trace CSV")
    p_nyq.add_argument("--data", required=True)
    p_nyq.set_defaults(fn=_cmd_nyquist)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # diagnostics to stderr, nonzero exit
        print(f"physrec: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
