"""Command line entry point: ``snpboostlss <subcommand>``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or schema
error, 4 numerical failure. Errors print one line to stderr of the form
``snpboostlss: error: <ErrorClass>: <message>``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np
import pandas as pd

from . import __version__
from .boost import BoostConfig, fit
from .errors import ConfigError, DataError, SchemaError, SnpBoostError
from .genotype import GenotypeMatrix, load_genotypes, load_plink
from .gxe import (
    DesignMatrix,
    eligibility_filter,
    extreme_groups,
    gxe_interaction_test,
    iptw_weights,
    logistic_propensity,
    quintile_effects,
    read_table,
    self_controlled_test,
    subgroup_interaction_test,
    treatment_effect,
    weighted_cell_means,
    write_results,
)
from .metrics import EvalReport, evaluate
from .model import export_coefficients, import_coefficients, predict, standardize
from .simulate import SimSpec, read_cohort, simulate, write_cohort

ENV_OUTDIR = "SNPBOOSTLSS_OUTDIR"
ENV_THREADS = "SNPBOOSTLSS_THREADS"

BOOST_FLAGS = {
    "p_batch": int,
    "m_batch": int,
    "b_max": int,
    "b_stop": int,
    "step_mode": str,
    "nu": float,
    "lam": float,
    "nu_sigma": float,
}


class UsageError(SnpBoostError):
    exit_code = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def header_comment(obj) -> str:
    return f"snpboostlss {__version__} config={config_hash(obj)}"


def _outdir(args) -> str:
    out = args.out or os.environ.get(ENV_OUTDIR)
    if not out:
        raise UsageError("no output directory: pass --out or set " + ENV_OUTDIR)
    os.makedirs(out, exist_ok=True)
    return out


def _threads(args) -> int:
    t = args.threads if args.threads is not None else int(os.environ.get(ENV_THREADS, "1"))
    if t < 1:
        raise ConfigError(f"threads must be >= 1, got {t}")
    return t


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _split_list(text):
    return [c for c in (text or "").split(",") if c]


# --------------------------------------------------------------------------- fit


def _load_geno(args) -> GenotypeMatrix:
    if getattr(args, "bed", None):
        return load_plink(args.bed, args.bim, args.fam)
    path = getattr(args, "text_geno", None) or getattr(args, "geno", None)
    if not path:
        raise UsageError("no genotype input: pass --bed or --text-geno")
    return load_genotypes(path)


def _sample_keys(G):
    return [(s.family_id, s.individual_id) for s in G.samples]


def _read_ids(path):
    keys = []
    with open(path) as fh:
        for line in fh:
            f = line.split()
            if not f or f[0].startswith("#") or f[:2] == ["FID", "IID"]:
                continue
            keys.append((f[0], f[1]) if len(f) > 1 else (f[0], f[0]))
    return keys


def _index_of(G, keys, what):
    pos = {k: i for i, k in enumerate(_sample_keys(G))}
    by_iid = {k[1]: i for k, i in pos.items()}
    out = []
    for k in keys:
        i = pos.get(k, by_iid.get(k[1]) if k[0] == k[1] else None)
        if i is None:
            raise DataError(f"{what}: sample {k[0]}/{k[1]} not in genotype data")
        out.append(i)
    return np.asarray(out, dtype=np.intp)


def _phenotype(G, path, column):
    df = pd.read_csv(path, sep="\t", comment="#", dtype={"FID": str, "IID": str}, float_precision="round_trip")
    for c in ("FID", "IID"):
        if c not in df.columns:
            raise SchemaError(f"{path}: missing column {c}")
    if column is None:
        rest = [c for c in df.columns if c not in ("FID", "IID")]
        if not rest:
            raise SchemaError(f"{path}: no phenotype column")
        column = rest[0]
    if column not in df.columns:
        raise SchemaError(f"{path}: missing phenotype column {column}")
    vals = dict(zip(zip(df["FID"], df["IID"]), df[column].astype(float)))
    try:
        return np.array([vals[k] for k in _sample_keys(G)])
    except KeyError as exc:
        raise DataError(f"{path}: no phenotype for sample {exc.args[0]}") from None


def _boost_config(args) -> BoostConfig:
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    for name in BOOST_FLAGS:
        val = getattr(args, name)
        if val is not None:
            cfg[name] = val
    if args.no_sigma:
        cfg["sigma_model_enabled"] = False
    return BoostConfig.from_dict(cfg).validate()


def cmd_fit(args):
    config = _boost_config(args)
    threads = _threads(args)
    out = _outdir(args)
    G = _load_geno(args)
    y = _phenotype(G, args.pheno, args.pheno_col)
    if args.split:
        sp = pd.read_csv(args.split, sep="\t", comment="#", dtype=str)
        if "split" not in sp.columns:
            raise SchemaError(f"{args.split}: missing column split")
        lab = dict(zip(zip(sp["FID"], sp["IID"]), sp["split"]))
        labels = np.array([lab.get(k, "") for k in _sample_keys(G)])
        tr, va = np.flatnonzero(labels == "train"), np.flatnonzero(labels == "valid")
    elif args.train_ids and args.valid_ids:
        tr = _index_of(G, _read_ids(args.train_ids), "train ids")
        va = _index_of(G, _read_ids(args.valid_ids), "valid ids")
    else:
        raise UsageError("pass --split or both --train-ids and --valid-ids")
    if len(va) == 0:
        raise DataError("validation set is empty")
    geno = args.bed or args.text_geno
    echo = {"boost": config.to_dict(), "geno": os.path.basename(geno), "pheno": os.path.basename(args.pheno),
            "pheno_col": args.pheno_col, "n_train": int(len(tr)), "n_valid": int(len(va))}
    head = header_comment(echo)
    t0 = time.perf_counter()
    model, trace = fit((G.subset_samples(tr), y[tr]), (G.subset_samples(va), y[va]), config, threads=threads)
    seconds = time.perf_counter() - t0
    export_coefficients(model, os.path.join(out, "model.tsv"), head)
    trace.write_tsv(os.path.join(out, "trace.tsv"), head)
    _write_json(os.path.join(out, "run.json"), {
        "subcommand": "fit", "version": __version__, "config": echo, "threads": threads,
        "inputs": {k: os.path.abspath(v) if v else None for k, v in
                   (("geno", geno), ("pheno", args.pheno), ("split", args.split),
                    ("train_ids", args.train_ids), ("valid_ids", args.valid_ids))},
        "seed": args.seed, "fit_seconds": seconds, "m_stop": model.m_stop,
        "iterations": len(trace.iterations), "batches": trace.batches,
    })
    print(f"m_stop={model.m_stop} mu_variants={len(model.selected_mu)} "
          f"sigma_variants={len(model.selected_sigma)} out={out}")


# --------------------------------------------------------------------------- score


def cmd_score(args):
    model = import_coefficients(args.model)
    G = load_genotypes(args.geno)
    pred = predict(model, G)
    if args.reference_scores:
        ref_df = pd.read_csv(args.reference_scores, sep="\t", comment="#", float_precision="round_trip")
        if "vPRS" not in ref_df.columns:
            raise SchemaError(f"{args.reference_scores}: missing column vPRS")
        ref = ref_df["vPRS"].to_numpy(float)
    else:
        ref = pred.eta_sigma
    vstd = standardize(pred.eta_sigma, ref)
    out = os.path.join(_outdir(args), "scores.tsv")
    with open(out, "w") as fh:
        fh.write(f"# {header_comment({'model': os.path.basename(args.model), 'geno': os.path.basename(args.geno)})}\n")
        fh.write("FID\tIID\tmPRS\tvPRS\tvPRS_std\n")
        for s, m, v, z in zip(G.samples, pred.mu, pred.eta_sigma, vstd):
            fh.write(f"{s.family_id}\t{s.individual_id}\t{float(m)!r}\t{float(v)!r}\t{float(z)!r}\n")
    print(out)


# --------------------------------------------------------------------------- simulate


def cmd_simulate(args):
    out = _outdir(args)
    made = []
    for h2 in args.h2:
        for s in args.sparsity:
            spec = SimSpec(n=args.n, p=args.p, h2=h2, sparsity=s, repeats=args.repeats,
                           split=tuple(args.split), seed=args.seed,
                           maf_range=(args.maf_low, args.maf_high)).validate()
            cdir = os.path.join(out, f"h2_{h2:g}_s_{s:g}")
            spec_d = dict(spec.__dict__)
            write_cohort(simulate(spec), cdir, header_comment(spec_d))
            _write_json(os.path.join(cdir, "spec.json"), spec_d)
            made.append(cdir)
    for d in made:
        print(d)


# --------------------------------------------------------------------------- evaluate


def cmd_evaluate(args):
    model = import_coefficients(args.model)
    cohort = read_cohort(args.cohort)
    seconds = float("nan")
    run_json = os.path.join(os.path.dirname(os.path.abspath(args.model)), "run.json")
    if os.path.exists(run_json):
        with open(run_json) as fh:
            seconds = float(json.load(fh).get("fit_seconds", float("nan")))
    report = evaluate(model, cohort, args.split, fit_seconds=seconds)
    out = _outdir(args)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    if args.report_tsv:
        append_report_row(args.report_tsv, report, key=f"{os.path.abspath(args.model)}|{os.path.abspath(args.cohort)}|{args.split}")
    print(report.to_json())


def append_report_row(path, report: EvalReport, key: str) -> None:
    """Add ``report`` to a TSV keyed by ``key``; an existing row with the same key is replaced."""
    header = "run_key\t" + "\t".join(EvalReport.columns())
    rows = []
    if os.path.exists(path):
        with open(path) as fh:
            rows = [line.rstrip("\n") for line in fh if line.strip() and not line.startswith("run_key")]
    rows = [r for r in rows if r.split("\t", 1)[0] != key]
    rows.append(f"{key}\t{report.tsv_row()}")
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(r + "\n")


# --------------------------------------------------------------------------- gxe


def _cols(df, names, what="table"):
    missing = [c for c in names if c not in df.columns]
    if missing:
        raise SchemaError(f"{what} lacks columns: {', '.join(missing)}")
    return df


def _gxe_replicates(args, out):
    from . import montecarlo as mc

    n = args.replicates
    if args.mode == "test":
        res = {"null": mc.gxe_replicates(n, seed=args.seed).summary(),
               "planted_-0.088": mc.gxe_replicates(n, n=5000, interaction=-0.088, seed=args.seed + 1).summary()}
    elif args.mode == "quintiles":
        tabs = mc.quintile_replicates(n, seed=args.seed, interaction=-0.3)
        est = np.array([t["estimate"].to_numpy() for t in tabs])
        res = {"replicates": n, "mean_estimate_by_quintile": est.mean(axis=0).tolist(),
               "monotone_fraction": float(np.mean(np.all(np.diff(est, axis=1) < 0, axis=1)))}
    elif args.mode == "self-controlled":
        res = {"null": mc.subgroup_power(n, effects=(-1.0, -1.0), seed=args.seed)}
    else:
        res = {"bias": mc.iptw_bias(n, seed=args.seed),
               "power": mc.subgroup_power(n, seed=args.seed + 1)}
    _write_json(os.path.join(out, f"calibration_{args.mode}.json"), res)
    print(json.dumps(res, indent=1))


def cmd_gxe(args):
    out = _outdir(args)
    if args.replicates:
        return _gxe_replicates(args, out)
    if not args.table:
        raise UsageError("--table is required unless --replicates is given")
    df = read_table(args.table)
    cov_names = _split_list(args.covariates)
    echo = {k: v for k, v in vars(args).items() if k not in ("func", "out", "threads")}
    echo["table"] = os.path.basename(args.table)
    head = header_comment(echo)

    if args.mode in ("test", "quintiles"):
        _cols(df, [args.pheno_col, args.mprs_col, args.vprs_col, args.env_col] + cov_names)
        df = df.dropna(subset=[args.pheno_col, args.mprs_col, args.vprs_col, args.env_col] + cov_names)
        v = df[args.vprs_col].to_numpy(float)
        vstd = v if args.standardized else standardize(v, v)
        cov = df[cov_names] if cov_names else None
        if args.mode == "test":
            res = gxe_interaction_test(df[args.pheno_col], df[args.mprs_col], vstd, df[args.env_col], cov,
                                       robust=args.robust, robust_terms=_split_list(args.robust_terms))
            write_results(res, os.path.join(out, "gxe_test.tsv"), head,
                          {"test_of_record": res.term("vPRS:E")})
            print(res.table().to_string(index=False))
        else:
            cov = {"mPRS": df[args.mprs_col].to_numpy(float), **({c: df[c].to_numpy(float) for c in cov_names})}
            tab = quintile_effects(df[args.pheno_col], df[args.env_col], vstd, cov)
            with open(os.path.join(out, "quintiles.tsv"), "w") as fh:
                fh.write(f"# {head}\n")
                tab.to_csv(fh, sep="\t", index=False, float_format="%.17g")
            print(tab.to_string(index=False))
        return

    _cols(df, ["id", "pheno_0", "pheno_1", "treated_0", "treated_1", args.vprs_col], "cohort table")
    reference = df[args.vprs_col].dropna().to_numpy(float)

    if args.mode == "self-controlled":
        sel = df[["pheno_0", "pheno_1", "treated_0", "treated_1"]].notna().all(axis=1)
        sel &= (df["treated_0"] == 0) & (df["treated_1"] == 1)
        sub = df.loc[sel]
        res = self_controlled_test(sub["pheno_1"] - sub["pheno_0"], sub[args.vprs_col], reference,
                                   args.q_low, args.q_high, equal_var=args.pooled)
        res["n_eligible"] = int(sel.sum())
        _write_json(os.path.join(out, "self_controlled.json"), res)
        print(json.dumps(res, indent=1))
        return

    conf = _split_list(args.confounders)
    adjust = _split_list(args.adjust)
    elig = eligibility_filter(df, args.ldl_threshold)
    _cols(elig, conf + adjust, "cohort table")
    elig = elig.dropna(subset=conf + adjust + [args.vprs_col])
    if len(elig) == 0:
        raise DataError("no subjects satisfy the eligibility criteria")
    treated = elig["arm"].to_numpy(float)
    _, ps = logistic_propensity(DesignMatrix.build({c: elig[c].to_numpy(float) for c in conf}), treated)
    w = iptw_weights(ps, treated, tuple(args.truncate) if args.truncate else None)
    wpath = os.path.join(out, "weights.tsv")
    with open(wpath, "w") as fh:
        fh.write(f"# {head}\n")
        pd.DataFrame({"id": elig["id"], "arm": elig["arm"], "propensity": ps, "weight": w}).to_csv(
            fh, sep="\t", index=False, float_format="%.17g")
    base = {"pheno_0": elig["pheno_0"].to_numpy(float), **{c: elig[c].to_numpy(float) for c in adjust}}
    delta = elig["delta"].to_numpy(float)
    overall = treatment_effect(delta, treated, base, w)
    low, high = extreme_groups(elig[args.vprs_col], reference, args.q_low, args.q_high)
    keep = low | high
    group = high[keep].astype(float)
    sub_args = (delta[keep], treated[keep], group, {k: v[keep] for k, v in base.items()}, w[keep])
    inter = subgroup_interaction_test(*sub_args)
    per_group = {}
    for name, mask in (("high", high), ("low", low)):
        per_group[name] = treatment_effect(delta[mask], treated[mask],
                                           {k: v[mask] for k, v in base.items()}, w[mask]).term("treated")
    cells = weighted_cell_means(delta[keep], treated[keep], group, w[keep])
    write_results(overall, os.path.join(out, "treatment_effect.tsv"), head)
    write_results(inter, os.path.join(out, "subgroup_interaction.tsv"), head,
                  {"test_of_record": inter.term("subgroup:treated")})
    with open(os.path.join(out, "cell_means.tsv"), "w") as fh:
        fh.write(f"# {head}\n")
        cells.to_csv(fh, sep="\t", index=False, float_format="%.17g")
    forest = pd.DataFrame([{"group": "all", **overall.term("treated")}]
                          + [{"group": g, **r} for g, r in per_group.items()])
    with open(os.path.join(out, "forest.tsv"), "w") as fh:
        fh.write(f"# {head}\n")
        forest.to_csv(fh, sep="\t", index=False, float_format="%.17g")
    summary = {"n_eligible": len(elig), "n_treated": int(treated.sum()), "weights_file": wpath,
               "treatment_effect": overall.term("treated"), "by_group": per_group,
               "interaction": inter.term("subgroup:treated")}
    _write_json(os.path.join(out, "iptw_summary.json"), summary)
    print(json.dumps(summary, indent=1, default=str))


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snpboostlss", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", help=f"output directory (env {ENV_OUTDIR})")
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--threads", type=int, default=None, help=f"worker threads (env {ENV_THREADS})")

    f = sub.add_parser("fit", help="fit mean and log-SD polygenic models")
    g = f.add_mutually_exclusive_group(required=True)
    g.add_argument("--bed")
    g.add_argument("--text-geno")
    f.add_argument("--bim")
    f.add_argument("--fam")
    f.add_argument("--pheno", required=True)
    f.add_argument("--pheno-col")
    f.add_argument("--split")
    f.add_argument("--train-ids")
    f.add_argument("--valid-ids")
    f.add_argument("--config", help="JSON file with boosting options")
    for name, typ in BOOST_FLAGS.items():
        f.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    f.add_argument("--no-sigma", action="store_true", help="mean-only fit")
    common(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("score", help="compute mPRS / vPRS")
    s.add_argument("--model", required=True)
    s.add_argument("--geno", required=True)
    s.add_argument("--reference-scores")
    common(s)
    s.set_defaults(func=cmd_score)

    m = sub.add_parser("simulate", help="simulate cohorts over an h2 x sparsity grid")
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--p", type=int, required=True)
    m.add_argument("--h2", type=float, nargs="+", required=True)
    m.add_argument("--sparsity", type=float, nargs="+", required=True)
    m.add_argument("--repeats", type=int, default=100)
    m.add_argument("--split", type=float, nargs=3, default=[0.5, 0.2, 0.3])
    m.add_argument("--maf-low", type=float, default=0.05)
    m.add_argument("--maf-high", type=float, default=0.5)
    common(m)
    m.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="score a model against simulated truth")
    e.add_argument("--model", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report-tsv")
    common(e)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("gxe", help="gene-environment interaction analyses")
    x.add_argument("mode", choices=["test", "quintiles", "self-controlled", "iptw"])
    x.add_argument("--table")
    x.add_argument("--replicates", type=int, default=0, help="run the Monte-Carlo suite instead")
    x.add_argument("--pheno-col", default="pheno")
    x.add_argument("--mprs-col", default="mPRS")
    x.add_argument("--vprs-col", default="vPRS")
    x.add_argument("--env-col", default="E")
    x.add_argument("--covariates", default="")
    x.add_argument("--standardized", action="store_true", help="vPRS column is already standardized")
    x.add_argument("--robust", action="store_true")
    x.add_argument("--robust-terms", default="age,sex")
    x.add_argument("--q-low", type=float, default=0.25)
    x.add_argument("--q-high", type=float, default=0.75)
    x.add_argument("--pooled", action="store_true", help="pooled-variance t-test")
    x.add_argument("--ldl-threshold", type=float, default=3.36)
    x.add_argument("--confounders", default="")
    x.add_argument("--adjust", default="")
    x.add_argument("--truncate", type=float, nargs=2)
    common(x)
    x.set_defaults(func=cmd_gxe)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except SnpBoostError as exc:
        msg = " ".join(str(exc).split())
        print(f"snpboostlss: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"snpboostlss: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"snpboostlss: error: NumericError: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
