"""Experiment driver: generate -> fit -> select-k -> evaluate -> report.

Every command takes explicit seeds, echoes its configuration into a
manifest next to its outputs, and writes tables as TSV, so a whole
experiment reruns byte-identically from one config file.

Exit codes: 0 success/converged, 2 iteration budget exhausted, 1 error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .datamodel import (FitConfig, SampleTaxaMatrix, load_counts, load_model,
                        load_truth, save_counts, save_edge_list, save_model,
                        save_truth)
from .errors import MicromixError, RefusalError
from .metrics import evaluate_model
from .mixggm import fit_mixggm
from .mixmcmc import fit_mixmcmc
from .mixmpln import fit_mixmpln
from .modelsel import VIPriors, bic_select, preprocess_counts, select_k, silhouette, vi_gmm_fit, vi_mpln_fit
from .synthgen import GraphSpec, MarginalSpec, MixtureSpec, gen_mixture_dataset
from ._numutil import kmeans

ENGINES = {"mixmpln": fit_mixmpln, "mixmcmc": fit_mixmcmc, "mixggm": fit_mixggm}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, config, files, extra=None):
    manifest = {
        "tool": "micromix",
        "version": __version__,
        "config": config,
        "files": {os.path.basename(f): _sha256(f) for f in files},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def _prepare_out(out_dir, force: bool):
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise RefusalError(f"output dir {out_dir!r} is not empty (use --force)")
    os.makedirs(out_dir, exist_ok=True)


def _load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# generate


def _mixture_spec_from(block: dict) -> MixtureSpec:
    graph = GraphSpec(
        topology=block.get("topology", "random"),
        d=int(block["d"]),
        sparsity=float(block["sparsity"]),
        band_width=block.get("band_width"),
        n_clusters=block.get("n_clusters"),
        attach_count=block.get("attach_count"),
    )
    marginals = None
    mblock = block.get("marginals")
    if mblock is not None:
        if mblock.get("family", "zinb") == "zinb" and "zero_prob" not in mblock:
            marginals = MarginalSpec.default_zinb(graph.d, seed=int(mblock.get("seed", 0)))
        else:
            marginals = MarginalSpec(**{k: (np.array(v) if isinstance(v, list) else v)
                                        for k, v in mblock.items() if k != "seed"})
    return MixtureSpec(
        graph=graph,
        n_per_component=tuple(block["n_per_component"]),
        mode=block.get("mode", "mpln"),
        marginals=marginals,
        mean_low=float(block.get("mean_low", 0.0)),
        mean_high=float(block.get("mean_high", 2.0)),
        depth_lo=int(block.get("depth_lo", 5000)),
        depth_hi=int(block.get("depth_hi", 10000)),
        independent_graphs=bool(block.get("independent_graphs", True)),
        cond_target=float(block.get("cond_target", 0.1)),
        mag_low=float(block.get("mag_low", 0.4)),
        mag_high=float(block.get("mag_high", 0.8)),
    )


def cmd_generate(args) -> int:
    config = _load_config(args.config)
    block = config["generation"] if "generation" in config else config
    _prepare_out(args.out, args.force)
    spec = _mixture_spec_from(block)
    seed = int(block.get("seed", 0))
    ds = gen_mixture_dataset(spec, seed=seed)
    paths = []
    for name, matrix in (("X.tsv", ds.original), ("XS.tsv", ds.sampled)):
        p = os.path.join(args.out, name)
        save_counts(matrix, p)
        paths.append(p)
    ts_path = os.path.join(args.out, "TS.tsv")
    _write_tsv(ts_path, ["sample_id", *ds.original.taxon_ids],
               [[sid, *row] for sid, row in zip(ds.original.sample_ids,
                                                ds.normalized.tolist())])
    paths.append(ts_path)
    truth_path = os.path.join(args.out, "truth.json")
    save_truth(ds.truth, truth_path)
    paths.append(truth_path)
    _write_manifest(args.out, config, paths,
                    extra={"pi_true": ds.pi_true.tolist(), "seed": seed})
    print(f"generated {ds.original.n} x {ds.original.d} dataset "
          f"(K={ds.truth.k}, pi_true={ds.pi_true.tolist()}) in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _fit_config_from(args, block: dict) -> FitConfig:
    merged = dict(block)
    for key in ("engine", "k", "penalty", "tol", "max_iter", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    if getattr(args, "restarts", None) is not None:
        merged["n_restarts"] = args.restarts
    if getattr(args, "rho_grid", None):
        merged["rho_grid"] = tuple(float(r) for r in args.rho_grid.split(","))
    merged.setdefault("rho_grid", ())
    allowed = {f.name for f in FitConfig.__dataclass_fields__.values()}
    return FitConfig(**{k: v for k, v in merged.items() if k in allowed})


def cmd_fit(args) -> int:
    block = {}
    if args.config:
        config = _load_config(args.config)
        block = config.get("fit", config)
    cfg = _fit_config_from(args, block)
    data = load_counts(args.data)
    _prepare_out(args.out, args.force)
    model = ENGINES[cfg.engine](data, cfg)

    model_path = os.path.join(args.out, "model.json")
    save_model(model, model_path)
    paths = [model_path]

    trace_path = os.path.join(args.out, "trace.tsv")
    pen = model.diagnostics.get("penalized_trace")
    header = ["iteration", "objective"] + (["penalized_objective"] if pen else [])
    rows = []
    for i, v in enumerate(model.loglik_trace):
        row = [i, float(v)]
        if pen:
            row.append(float(pen[i]) if i < len(pen) else float("nan"))
        rows.append(row)
    _write_tsv(trace_path, header, rows)
    paths.append(trace_path)

    if "mcmc" in model.diagnostics:
        diag_path = os.path.join(args.out, "mcmc_diagnostics.tsv")
        _write_tsv(diag_path, ["sample", "component", "rhat_max", "neff_min", "iterations"],
                   [[r["sample"], r["component"], r["rhat_max"], r["neff_min"], r["iterations"]]
                    for r in model.diagnostics["mcmc"]])
        paths.append(diag_path)

    for l, comp in enumerate(model.components):
        edge_path = os.path.join(args.out, f"edges_component{l}.tsv")
        save_edge_list(comp.precision, edge_path, list(data.taxon_ids))
        paths.append(edge_path)

    cfg_echo = {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in cfg.__dict__.items()}
    _write_manifest(args.out, {"fit": cfg_echo, "data": os.path.abspath(args.data)}, paths,
                    extra={"converged": model.diagnostics.get("converged"),
                           "objective": model.diagnostics.get("objective")})
    converged = model.diagnostics.get("converged", False)
    print(f"fit {cfg.engine} K={cfg.k}: objective={model.diagnostics.get('objective'):.6g} "
          f"converged={converged}")
    return 0 if converged else 2


# ---------------------------------------------------------------------------
# select-k


def _selection_methods(data_counts, sel_block, seed):
    """Run the requested selection methods on one count matrix."""
    methods = sel_block.get("methods", ["vi", "bic"])
    m_max = int(sel_block.get("m_max", 5))
    k_range = list(sel_block.get("k_range", range(1, m_max + 1)))
    threshold = float(sel_block.get("threshold", 0.1))
    cutoff = float(sel_block.get("pca_cutoff", 0.90))
    reduced, proj = preprocess_counts(data_counts, cutoff)
    rows = []
    for method in methods:
        if method == "vi":
            priors = VIPriors(beta=float(sel_block.get("beta", 1e-6)),
                              nu=proj.d_reduced, v_scale=float(sel_block.get("v_scale", 0.1)),
                              m_max=m_max)
            st = vi_gmm_fit(reduced, priors, seed=seed,
                            max_iter=int(sel_block.get("vi_max_iter", 200)))
            rows.append({"method": "vi", "selected_k": select_k(st.pi, threshold),
                         "detail": json.dumps([round(float(p), 4) for p in st.pi])})
        elif method == "vi_mpln":
            priors = VIPriors(beta=float(sel_block.get("beta", 1e-6)),
                              nu=None, v_scale=float(sel_block.get("v_scale", 0.1)),
                              m_max=m_max)
            st = vi_mpln_fit(data_counts, priors, seed=seed,
                             max_iter=int(sel_block.get("vi_max_iter", 60)))
            rows.append({"method": "vi_mpln", "selected_k": select_k(st.pi, threshold),
                         "detail": json.dumps([round(float(p), 4) for p in st.pi])})
        elif method == "bic":
            best, scores = bic_select(reduced, k_range, seed=seed,
                                      variant=sel_block.get("bic_variant", "free_params"))
            rows.append({"method": "bic", "selected_k": best,
                         "detail": json.dumps({str(k): round(float(s), 2)
                                               for k, s in scores.items()})})
        elif method == "silhouette":
            scores = {}
            for k in k_range:
                if k < 2:
                    continue
                labels, _, _ = kmeans(reduced, k, np.random.default_rng(seed + k))
                if len(np.unique(labels)) < 2:
                    continue
                scores[k] = silhouette(reduced, labels)
            if scores:
                best = max(scores, key=scores.get)
                rows.append({"method": "silhouette", "selected_k": best,
                             "detail": json.dumps({str(k): round(float(s), 4)
                                                   for k, s in scores.items()})})
        else:
            raise MicromixError(f"unknown selection method {method!r}")
    return rows


def cmd_select_k(args) -> int:
    config = _load_config(args.config) if args.config else {}
    sel_block = config.get("selection", {})
    if args.m_max is not None:
        sel_block["m_max"] = args.m_max
    if args.methods:
        sel_block["methods"] = args.methods.split(",")
    _prepare_out(args.out, args.force)

    rows = []
    truth_k = sel_block.get("truth_k")
    if args.data:
        counts = load_counts(args.data).counts
        for row in _selection_methods(counts, sel_block, int(sel_block.get("seed", 0))):
            rows.append({"replicate": 0, **row})
    else:
        gen_block = config["generation"]
        n_rep = int(sel_block.get("replicates", 1))
        seeds = sel_block.get("seeds") or list(range(n_rep))
        spec = _mixture_spec_from(gen_block)
        truth_k = spec.k if truth_k is None else truth_k

        def one(idx_seed):
            idx, seed = idx_seed
            ds = gen_mixture_dataset(spec, seed=seed)
            return [{"replicate": idx, **row}
                    for row in _selection_methods(ds.original.counts, sel_block, seed)]

        workers = max(1, args.threads)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for batch in pool.map(one, enumerate(seeds)):
                    rows.extend(batch)
        else:
            for pair in enumerate(seeds):
                rows.extend(one(pair))

    header = ["replicate", "method", "selected_k", "detail"]
    if truth_k is not None:
        header.append("truth_k")
        for row in rows:
            row["truth_k"] = truth_k
    table_path = os.path.join(args.out, "selection.tsv")
    _write_tsv(table_path, header, [[row[h] for h in header] for row in rows])

    summary = {}
    if truth_k is not None:
        for method in {r["method"] for r in rows}:
            hits = [r for r in rows if r["method"] == method]
            rate = sum(1 for r in hits if r["selected_k"] == truth_k) / len(hits)
            summary[method] = {"detection_rate": rate, "n": len(hits)}
        summary_path = os.path.join(args.out, "summary.json")
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
    _write_manifest(args.out, config or sel_block, [table_path],
                    extra={"summary": summary})
    for method, stats in sorted(summary.items()):
        print(f"{method}: detection rate {stats['detection_rate']:.0%} over {stats['n']} replicates")
    if not summary:
        for row in rows:
            print(f"{row['method']}: K={row['selected_k']}  {row['detail']}")
    return 0


# ---------------------------------------------------------------------------
# evaluate / report


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    truth = load_truth(args.truth)
    if model.k != truth.k:
        print(f"error: model has K={model.k} but truth has K={truth.k}", file=sys.stderr)
        return 1
    report = evaluate_model(truth.precisions, model.precisions())
    _prepare_out(args.out, args.force)
    table_path = os.path.join(args.out, "report.tsv")
    rows = [[r["component"], r["matched_est"], r["relative_difference"],
             r["rd_skipped"], r["frobenius_pc"], r["auc"]] for r in report.rows()]
    rows.append(["mean", "-", report.mean_relative_difference, "-",
                 report.mean_frobenius_pc, report.mean_auc])
    _write_tsv(table_path, ["component", "matched_est", "relative_difference",
                            "rd_skipped", "frobenius_pc", "auc"], rows)
    json_path = os.path.join(args.out, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({
            "pairing": list(report.pairing),
            "relative_difference": list(report.relative_difference),
            "rd_skipped": list(report.rd_skipped),
            "frobenius_pc": list(report.frobenius_pc),
            "auc": list(report.auc),
            "mean_relative_difference": report.mean_relative_difference,
            "mean_frobenius_pc": report.mean_frobenius_pc,
            "mean_auc": report.mean_auc,
        }, fh, indent=1, sort_keys=True)
    _write_manifest(args.out, {"model": os.path.abspath(args.model),
                               "truth": os.path.abspath(args.truth)},
                    [table_path, json_path])
    print(f"mean AUC {report.mean_auc:.4f}, mean Frobenius {report.mean_frobenius_pc:.4f}, "
          f"pairing {list(report.pairing)}")
    return 0


def cmd_report(args) -> int:
    runs = []
    for root, _dirs, files in sorted(os.walk(args.dir)):
        if "report.json" not in files:
            continue
        with open(os.path.join(root, "report.json"), "r", encoding="utf-8") as fh:
            rep = json.load(fh)
        meta = {}
        manifest = os.path.join(root, "manifest.json")
        run_dir = os.path.dirname(os.path.relpath(os.path.join(root, "x"), args.dir))
        if os.path.exists(manifest):
            with open(manifest, "r", encoding="utf-8") as fh:
                meta = json.load(fh).get("config", {})
        runs.append((run_dir, meta, rep))
    runs.sort(key=lambda t: t[0])
    _prepare_out(args.out, args.force)
    header = ["run_id", "engine", "k", "n", "mean_relative_difference",
              "mean_frobenius_pc", "mean_auc"]
    rows = []
    for run_id, meta, rep in runs:
        fit_meta = meta.get("fit", {}) if isinstance(meta, dict) else {}
        rows.append([run_id, fit_meta.get("engine", "-"), fit_meta.get("k", "-"),
                     fit_meta.get("n", "-"), rep["mean_relative_difference"],
                     rep["mean_frobenius_pc"], rep["mean_auc"]])
    table_path = os.path.join(args.out, "table.tsv")
    _write_tsv(table_path, header, rows)
    curve_path = os.path.join(args.out, "curves.csv")
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    if not rows:
        print("warning: no evaluation reports found", file=sys.stderr)
    print(f"aggregated {len(rows)} run(s) into {table_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micromix",
                                     description="Mixture-model microbial network inference")
    parser.add_argument("--version", action="version", version=f"micromix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a K-network mixture model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--engine", choices=sorted(ENGINES))
    p.add_argument("--k", type=int)
    p.add_argument("--penalty", choices=["none", "cv", "fixed", "iterative", "stars"])
    p.add_argument("--rho-grid", dest="rho_grid")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select-k", help="estimate the number of components")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--methods")
    p.add_argument("--m-max", dest="m_max", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("evaluate", help="score a fitted model against ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate evaluation reports into tables")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MicromixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
