"""Command-line interface: ``coulomb-dft <command> ...``."""

from __future__ import annotations

import argparse
import gzip
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import __version__
from .descriptor import DegenerateGeometryError, FeatureMatrix, featurize
from .experiment import (
    DEFAULT_GAMMA_GRID,
    DEFAULT_LAMBDA_GRID,
    ExperimentConfig,
    Metrics,
    PipelineError,
    grid_search,
    make_split,
    run_experiment,
)
from .ingest import Dataset, ParseError, convert_energy, parse_csv, parse_xyz, write_csv
from .krr import (
    KernelConfig,
    ModelFormatError,
    SingularSystemError,
    fit,
    load_model,
    predict,
    save_model,
    squared_distances,
)
from .spectral import dft, magnitude, spectrogram, to_domain, write_pgm

log = logging.getLogger("coulomb_dft")

DOMAIN_FLAGS = {"raw": "raw", "dft-mag": "dft_magnitude", "dft-complex": "dft_complex"}
DOMAIN_FILE_TAGS = {"raw": "raw", "dft_magnitude": "dft", "dft_complex": "dft_complex"}
LOW_CONFIDENCE_KERNEL = 1e-12


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _format_of(path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    suffixes = [s for s in path.suffixes if s != ".gz"]
    ext = suffixes[-1].lstrip(".").lower() if suffixes else ""
    if ext in ("xyz", "csv"):
        return ext
    raise CliError("ingest", f"cannot infer format of {path}; pass --format xyz|csv")


def load_dataset(path: Path, fmt: str | None = None, length_unit: str = "angstrom",
                 energy_unit: str = "kcal_per_mol") -> Dataset:
    fmt = _format_of(path, fmt)
    try:
        with _open_text(path) as fh:
            if fmt == "xyz":
                return parse_xyz(fh, length_unit=length_unit, energy_unit=energy_unit)
            return parse_csv(fh)
    except ParseError as exc:
        raise CliError("ingest", f"{path}: {exc}") from None
    except OSError as exc:
        raise CliError("ingest", str(exc)) from None


def provenance(args: argparse.Namespace, inputs: list[Path]) -> dict:
    config = {k: (str(v) if isinstance(v, Path) else v)
              for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    return {"tool": "coulomb-dft", "version": __version__, "config": config,
            "inputs": {str(p): file_sha256(p) for p in inputs}}


def _comment_lines(prov: dict) -> list[str]:
    return [f"{prov['tool']} {prov['version']}",
            "config " + json.dumps(prov["config"], sort_keys=True),
            "inputs " + json.dumps(prov["inputs"], sort_keys=True)]


def _write_rows(path: Path, rows, header: list[str] | None, prov: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in _comment_lines(prov):
            fh.write(f"# {c}\n")
        if header:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(float(v)) for v in row) + "\n")


def _read_grid(text: str | None, default) -> tuple[float, ...]:
    """Parse ``pow2:a:b[:step]`` or a comma list of numbers / ``2^k`` terms."""
    if text is None:
        return tuple(default)
    text = text.strip()
    try:
        if text.startswith("pow2:"):
            parts = [int(p) for p in text[5:].split(":")]
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
            return tuple(2.0 ** k for k in range(lo, hi + 1, step))
        values = []
        for item in text.split(","):
            item = item.strip()
            if item.startswith("2^"):
                values.append(2.0 ** float(item[2:]))
            else:
                values.append(float(item))
        return tuple(values)
    except (ValueError, IndexError):
        raise CliError("config", f"cannot parse grid {text!r}") from None


def _domains(text: str) -> tuple[str, ...]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if item not in DOMAIN_FLAGS:
            raise CliError("config", f"unknown domain {item!r}; choose from {', '.join(DOMAIN_FLAGS)}")
        out.append(DOMAIN_FLAGS[item])
    return tuple(out)


def cmd_convert(args) -> None:
    ds = load_dataset(args.input, args.format, args.length_unit, args.energy_unit)
    prov = provenance(args, [args.input])
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_csv(ds, fh, comments=_comment_lines(prov))
    print(f"converted {len(ds)} molecules to {args.out}")


def cmd_featurize(args) -> None:
    ds = load_dataset(args.dataset, args.format, args.length_unit)
    if len(ds) == 0:
        raise CliError("featurize", "dataset is empty")
    try:
        fm = to_domain(featurize(ds, args.n_max), DOMAIN_FLAGS[args.domain])
    except (DegenerateGeometryError, ValueError) as exc:
        raise CliError("featurize", str(exc)) from None
    rows = fm.values.tolist()
    if args.labels:
        rows = [[lab or ""] + r for lab, r in zip(fm.labels, rows)]
    _write_rows(args.out, rows, None, provenance(args, [args.dataset]))
    print(f"wrote {fm.shape[0]} x {fm.shape[1]} {fm.domain} features to {args.out}")


def cmd_spectrogram(args) -> None:
    ds = load_dataset(args.dataset, args.format, args.length_unit)
    if not 0 <= args.index < len(ds):
        raise CliError("spectrogram", f"molecule index {args.index} out of range 0..{len(ds) - 1}")
    try:
        signal = featurize(ds, args.n_max).values[args.index]
        spec = spectrogram(signal, args.window, args.hop, args.window_kind)
    except ValueError as exc:
        raise CliError("spectrogram", str(exc)) from None
    prov = provenance(args, [args.dataset])
    prefix = str(args.out)
    bins = [f"bin{b}" for b in range(spec.n_bins)]
    _write_rows(Path(prefix + ".csv"), spec.frames.tolist(), bins, prov)
    # Image rows are frequency bins, highest frequency on top; columns are frames.
    write_pgm(prefix + ".pgm", spec.frames.T[::-1])
    mag = magnitude(dft(signal))
    _write_rows(Path(prefix + "_signal.csv"),
                ([str(i), s, a] for i, (s, a) in enumerate(zip(signal, mag))),
                ["index", "signal", "dft_magnitude"], prov)
    print(f"spectrogram of molecule {args.index}: {spec.n_frames} frames x {spec.n_bins} bins "
          f"-> {prefix}.csv, {prefix}.pgm, {prefix}_signal.csv")


def _kernel_config(args) -> KernelConfig:
    if args.sigma is not None:
        return KernelConfig.from_sigma(args.sigma)
    return KernelConfig(args.gamma)


def cmd_train(args) -> None:
    ds = load_dataset(args.dataset, args.format, args.length_unit)
    if len(ds) == 0:
        raise CliError("train", "dataset is empty")
    try:
        col = ds.column_index(args.target)
    except KeyError as exc:
        raise CliError("ingest", exc.args[0]) from None
    if not args.ridge_lambda > 0 and not args.allow_zero_lambda:
        raise CliError("config", "--lambda must be > 0 (pass --allow-zero-lambda to interpolate)")
    y = ds.target(col)
    domain = DOMAIN_FLAGS[args.domain]
    try:
        fm = to_domain(featurize(ds, args.n_max), domain)
        if args.train_fraction >= 1.0:
            train, test = list(range(len(ds))), []
        else:
            split = make_split(len(ds), args.train_fraction, args.seed)
            train, test = list(split.train_indices), list(split.test_indices)
        cfg = _kernel_config(args)
    except (DegenerateGeometryError, ValueError) as exc:
        raise CliError("train", str(exc)) from None
    try:
        model = fit(fm.rows(train), y[train], cfg, args.ridge_lambda,
                    target_name=ds.property_names[col], threads=args.threads)
    except SingularSystemError as exc:
        raise CliError("fit", str(exc)) from None
    model.descriptor_meta.update({"train_fraction": args.train_fraction, "seed": args.seed,
                                  "provenance": provenance(args, [args.dataset])})
    save_model(model, args.out)
    print(f"trained {domain} model on {len(train)} molecules -> {args.out}")
    if test:
        m = Metrics.compute(y[test], predict(model, fm.rows(test), threads=args.threads))
        print(f"held-out {len(test)}: MAE {m.mae:.4f}  RMSE {m.rmse:.4f} kcal/mol  r {m.pearson_r:.6f}")


def cmd_predict(args) -> None:
    try:
        model = load_model(args.model)
    except (ModelFormatError, OSError) as exc:
        raise CliError("load", str(exc)) from None
    ds = load_dataset(args.dataset, args.format, args.length_unit)
    if len(ds) == 0:
        raise CliError("predict", "dataset is empty")
    n_max = model.training_features.n_max
    try:
        fm = to_domain(featurize(ds, n_max), model.domain)
        pred, kmax = predict(model, fm, threads=args.threads, return_max_kernel=True)
    except (DegenerateGeometryError, ValueError) as exc:
        raise CliError("predict", str(exc)) from None
    far = int(np.sum(kmax < LOW_CONFIDENCE_KERNEL))
    if far:
        print(f"warning[predict]: {far} molecule(s) are far from all training data "
              f"(max kernel < {LOW_CONFIDENCE_KERNEL:g}); their predictions are near 0 "
              "and unreliable", file=sys.stderr)
    pred_u = convert_energy(pred, model.energy_unit, args.unit)
    header = ["label", f"predicted_{args.unit}"]
    columns = [pred_u]
    if model.target_name in ds.property_names:
        ref = ds.target(model.target_name, args.unit)
        header.append(f"reference_{args.unit}")
        columns.append(ref)
    rows = ([mol.label or ""] + [c[i] for c in columns] for i, mol in enumerate(ds.molecules))
    _write_rows(args.out, rows, header, provenance(args, [args.model, args.dataset]))
    print(f"predicted {len(pred)} molecules -> {args.out}")
    if len(columns) > 1 and len(pred) >= 2:
        try:
            m = Metrics.compute(columns[1], pred_u, args.unit)
            print(f"MAE {m.mae:.4f}  RMSE {m.rmse:.4f} {args.unit}  r {m.pearson_r:.6f}")
        except ValueError:
            pass


def _write_report_files(report, out: Path, prov: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"provenance": prov, **report.to_dict()}
    with open(out / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for domain, res in report.results.items():
        tag = DOMAIN_FILE_TAGS[domain]
        _write_rows(out / f"scatter_{tag}.csv", zip(res.reference, res.predicted),
                    ["reference_kcal_per_mol", "predicted_kcal_per_mol"], prov)
        rows = [(g, lam, mae, stage) for stage, grid in res.grids.items()
                for g, lam, mae in grid.table]
        _write_rows(out / f"grid_{tag}.csv", rows, ["gamma", "lambda", "mae", "stage"], prov)


def _experiment_config(args, seed: int) -> ExperimentConfig:
    return ExperimentConfig(
        seed=seed, train_fraction=args.train_fraction, domains=_domains(args.domains),
        gamma_grid=_read_grid(args.gamma_grid, DEFAULT_GAMMA_GRID),
        lambda_grid=_read_grid(args.lambda_grid, DEFAULT_LAMBDA_GRID),
        staged=not args.no_staged,
        coarse_subsample=args.coarse_subsample or None, fine_octaves=args.fine_octaves,
        validation_fraction=args.validation_fraction, paper_mode=args.paper_mode,
        target=args.target, threads=args.threads)


def cmd_experiment(args) -> None:
    ds = load_dataset(args.dataset, args.format, args.length_unit)
    seeds = [int(s) for s in str(args.seed).split(",")]
    prov = provenance(args, [args.dataset])
    reports = {}
    for seed in seeds:
        report = run_experiment(ds, _experiment_config(args, seed))
        out = args.out if len(seeds) == 1 else args.out / f"seed_{seed}"
        _write_report_files(report, out, prov)
        reports[seed] = report
        print(f"seed {seed}: {len(report.split.train_indices)} train / "
              f"{len(report.split.test_indices)} test molecules -> {out}")
        print(report.summary())
    if len(seeds) > 1:
        mean = {}
        for domain in reports[seeds[0]].results:
            ms = [reports[s].results[domain].metrics["kcal_per_mol"] for s in seeds]
            mean[domain] = {stat: float(np.mean([getattr(m, stat) for m in ms]))
                            for stat in ("rmse", "mae", "pearson_r")}
        with open(args.out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump({"provenance": prov, "seeds": seeds, "mean_kcal_per_mol": mean},
                      fh, indent=1, sort_keys=True)
        print(f"mean over seeds {seeds}: " + json.dumps(mean))


def cmd_gridsearch(args) -> None:
    ds = load_dataset(args.dataset, args.format, args.length_unit)
    if len(ds) < 2:
        raise CliError("gridsearch", "need at least two molecules")
    try:
        y = ds.target(args.target)
    except KeyError as exc:
        raise CliError("ingest", exc.args[0]) from None
    gammas = _read_grid(args.gamma_grid, DEFAULT_GAMMA_GRID)
    lambdas = _read_grid(args.lambda_grid, DEFAULT_LAMBDA_GRID)
    prov = provenance(args, [args.dataset])
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        split = make_split(len(ds), args.train_fraction, args.seed)
        raw = featurize(ds)
        results = {}
        for domain in _domains(args.domains):
            fm = to_domain(raw, domain)
            d_train = squared_distances(fm.values[list(split.train_indices)], threads=args.threads)
            results[domain] = grid_search(fm, y, split, gammas, lambdas, args.subsample,
                                          validation_fraction=args.validation_fraction,
                                          sq_dist=d_train, threads=args.threads)
    except (DegenerateGeometryError, ValueError, SingularSystemError) as exc:
        raise CliError("gridsearch", str(exc)) from None
    for domain, res in results.items():
        tag = DOMAIN_FILE_TAGS[domain]
        _write_rows(args.out / f"grid_{tag}.csv", res.table, ["gamma", "lambda", "mae"], prov)
        print(f"{domain}: best gamma={res.best[0]:g} lambda={res.best[1]:g}")
    with open(args.out / "gridsearch.json", "w", encoding="utf-8") as fh:
        json.dump({"provenance": prov, "split": split.to_dict(),
                   "results": {d: r.to_dict() for d, r in results.items()}},
                  fh, indent=1, sort_keys=True)


def _add_input_flags(p: argparse.ArgumentParser, name: str = "dataset") -> None:
    p.add_argument(name, type=Path, help="dataset file (.xyz or canonical .csv, optionally .gz)")
    p.add_argument("--format", choices=("xyz", "csv"), help="input format (default: from extension)")
    p.add_argument("--length-unit", choices=("angstrom", "bohr"), default="angstrom",
                   help="coordinate unit of XYZ input (default: angstrom)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="coulomb-dft",
        description="Coulomb-signal features, Fourier spectra and kernel ridge regression "
                    "of molecular atomization energies.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=1, help="worker/BLAS thread cap (default 1)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert XYZ or CSV input to the canonical CSV")
    _add_input_flags(p, "input")
    p.add_argument("--energy-unit", choices=("kcal_per_mol", "eV"), default="kcal_per_mol",
                   help="unit of energy= values in XYZ input")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("featurize", help="write the feature matrix as CSV")
    _add_input_flags(p)
    p.add_argument("--domain", choices=tuple(DOMAIN_FLAGS), default="raw")
    p.add_argument("--n-max", type=int, default=None, help="pad to this many atoms")
    p.add_argument("--labels", action="store_true", help="prefix each row with its label")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("spectrogram", help="spectrogram of one molecule's Coulomb signal")
    _add_input_flags(p)
    p.add_argument("--index", type=int, default=0, help="molecule index (0-based)")
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--hop", type=int, default=8)
    p.add_argument("--window-kind", choices=("hann", "rectangular"), default="hann")
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="output prefix")
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("train", help="fit one kernel ridge model")
    _add_input_flags(p)
    p.add_argument("--domain", choices=tuple(DOMAIN_FLAGS), default="raw")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--gamma", type=float, help="kernel sharpness in exp(-gamma d^2)")
    g.add_argument("--sigma", type=float, help="kernel width in exp(-d^2 / (2 sigma^2))")
    p.add_argument("--lambda", dest="ridge_lambda", type=float, required=True)
    p.add_argument("--allow-zero-lambda", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8,
                   help="fraction used for training; 1.0 trains on everything")
    p.add_argument("--target", default=None, help="property column name or index")
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="model file (.krr.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict with a saved model")
    p.add_argument("model", type=Path)
    _add_input_flags(p)
    p.add_argument("--unit", choices=("kcal_per_mol", "eV"), default="kcal_per_mol")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    for name, func in (("gridsearch", cmd_gridsearch), ("experiment", cmd_experiment)):
        p = sub.add_parser(name, help="hyperparameter grid search" if name == "gridsearch"
                           else "split, tune, refit and compare domains")
        _add_input_flags(p)
        p.add_argument("--seed", default="0",
                       help="split seed" + ("; comma list runs each seed" if name == "experiment" else ""))
        p.add_argument("--train-fraction", type=float, default=0.8)
        p.add_argument("--domains", default="raw,dft-mag", help="comma list of raw, dft-mag, dft-complex")
        p.add_argument("--gamma-grid", default=None, help="pow2:a:b[:step] or comma list (default pow2:-24:-4)")
        p.add_argument("--lambda-grid", default=None, help="as --gamma-grid (default pow2:-20:-4:2)")
        p.add_argument("--validation-fraction", type=float, default=0.25)
        p.add_argument("--target", default=None)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "gridsearch":
            p.add_argument("--subsample", type=int, default=None)
        else:
            p.add_argument("--coarse-subsample", type=int, default=1000, help="0 disables")
            p.add_argument("--fine-octaves", type=int, default=2)
            p.add_argument("--no-staged", action="store_true", help="single full-size grid stage")
            p.add_argument("--paper-mode", action="store_true",
                           help="score the grid on the test split (leaks; for comparison only)")
        p.set_defaults(func=func)
    return ap


def _blas_threads(requested: int) -> int:
    """BLAS thread cap: ``requested``, but never above the pools' startup size.

    OpenBLAS sizes its buffers when it loads, and raising the thread count
    past that size can crash inside the factorization.
    """
    startup = [pool["num_threads"] for pool in threadpool_info()]
    return min([max(1, requested)] + startup)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "gridsearch":
            args.seed = int(args.seed)
        with threadpool_limits(limits=_blas_threads(args.threads)):
            args.func(args)
    except CliError as exc:
        print(f"error[{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error[{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"error[{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
