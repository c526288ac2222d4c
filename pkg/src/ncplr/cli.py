"""Command-line front end.

Subcommands cover the whole pipeline: `synth` writes a dataset, `graph` /
`cluster` / `refine` run single stages against a feature file, `train`
runs the full loop, `eval` scores a model (or raw features), `sweep`
grids one hyper-parameter, and `ablate` trains the six loss variants.

Hyper-parameters resolve in three layers: built-in defaults, then a flat
JSON config file (--config), then explicit CLI flags. Every output is
accompanied by a manifest recording the fully resolved configuration, so
any run can be reproduced bit-for-bit from its manifest alone (pass the
manifest as --config). `NCPLR_THREADS` caps BLAS-level parallelism.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import dbscan, write_clusters_csv
from .data import FeatureSet, SyntheticSpec, generate_synthetic, load_features, save_features
from .errors import ConfigError, FormatError, NcplrError
from .evaluation import EvalReport, cluster_quality, cmc_map, noise_rate, split_query_gallery, write_eval_json
from .graph import build_affinity_graph, write_graph_csv
from .model import embed_features, load_model, save_model
from .refinement import init_prediction_bank, refine_all
from .trainer import TrainConfig, train, write_history, write_refined_csv

_THREAD_LIMITER = None  # keeps a threadpoolctl handle alive for the process

# variant name -> TrainConfig overrides; ordered from bare contrastive
# training up to the full method
ABLATION_VARIANTS: dict[str, dict] = {
    "cc": {"lambda1": 0.0, "lambda2": 0.0, "ncr_mode": "off", "use_refined_ce": False},
    "cc_ce": {"lambda2": 0.0, "ncr_mode": "off", "use_refined_ce": False},
    "cc_refce": {"lambda2": 0.0, "ncr_mode": "off", "use_refined_ce": True,
                 "use_distance_weight": False},
    "cc_refce_w": {"lambda2": 0.0, "ncr_mode": "off", "use_refined_ce": True,
                   "use_distance_weight": True},
    "cc_refce_w_ncr1": {"ncr_mode": "one_stream"},
    "full": {"ncr_mode": "two_stream"},
}


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {list(ABLATION_VARIANTS)}")
    return replace(base, **ABLATION_VARIANTS[name])


_TRAIN_FIELD_HELP = {
    "epochs": "training epochs",
    "steps_per_epoch": "gradient steps per epoch",
    "P": "identities per batch",
    "K_inst": "instances per identity",
    "learning_rate": "base learning rate (x0.1 step decay over thirds of the run)",
    "eps_dbscan": "DBSCAN neighbourhood radius on the Jaccard matrix",
    "min_samples": "DBSCAN core-point threshold",
    "kappa": "reciprocal-set size for the affinity graph",
    "rho": "refinement/consistency neighbourhood radius",
    "alpha": "hard-label weight in refinement",
    "lambda1": "cross-entropy weight",
    "lambda2": "consistency weight (ramped from 0)",
    "warmup_frac": "fraction of epochs over which lambda2 and EMA ramp",
    "ema_momentum": "teacher EMA momentum ramp target",
    "gamma": "memory-bank momentum (weight kept on the old centroid)",
    "tau": "contrastive/classifier temperature",
    "tau_d": "distance-weighting temperature",
    "aug_std": "std of the Gaussian input perturbation",
    "seed": "RNG seed",
    "hidden_dim": "encoder hidden width (0 = twice the input dim)",
    "embed_dim": "encoder output dim (0 = input dim)",
    "use_refined_ce": "train cross-entropy on refined soft targets",
    "use_distance_weight": "distance-softmax neighbour weights instead of uniform",
    "ncr_mode": "consistency variant",
}


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    parser.add_argument("--config", type=Path, default=None,
                        help="flat JSON config file (or a manifest with a 'config' key)")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-").lower()
        default = getattr(defaults, f.name)
        help_text = f"{_TRAIN_FIELD_HELP[f.name]} (default: {default})"
        if f.type == "bool":
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction, help=help_text)
        elif f.name == "ncr_mode":
            parser.add_argument(flag, dest=f.name, default=None,
                                choices=("off", "one_stream", "two_stream"), help=help_text)
        else:
            ftype = int if f.type == "int" else float
            parser.add_argument(flag, dest=f.name, type=ftype, default=None, help=help_text)


def _resolve_train_config(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """defaults <- config file <- explicit CLI flags; returns the config and
    a provenance record for the manifest."""
    resolved = asdict(TrainConfig())
    file_values: dict = {}
    config_file = getattr(args, "config", None)
    if config_file is not None:
        try:
            raw = json.loads(Path(config_file).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"{config_file}: not valid JSON ({e})") from e
        if isinstance(raw, dict) and isinstance(raw.get("config"), dict):
            raw = raw["config"]  # accept a manifest as a config source
        if not isinstance(raw, dict):
            raise FormatError(f"{config_file}: expected a JSON object")
        unknown = set(raw) - set(resolved)
        if unknown:
            raise ConfigError(f"{config_file}: unknown config keys {sorted(unknown)}")
        file_values = raw
        resolved.update(raw)
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(TrainConfig)
        if getattr(args, f.name, None) is not None
    }
    resolved.update(overrides)
    return TrainConfig(**resolved), {
        "config_file": str(config_file) if config_file else None,
        "config_file_values": file_values,
        "cli_overrides": overrides,
    }


def _write_manifest(
    target: Path,
    command: str,
    config: dict,
    inputs: dict,
    outputs: dict,
    provenance: dict | None = None,
) -> Path:
    """Manifest path: <dir>/manifest.json for directory outputs, else
    <file>.manifest.json next to a file output."""
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    payload = {
        "tool": "ncplr",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    }
    if provenance:
        payload.update(provenance)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _load_bank_csv(path: Path, n: int, k: int) -> np.ndarray:
    """Student predictions from CSV: header index,p0..p{K-1}; instances
    missing from the file keep their one-hot initialization."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["index"] + [f"p{j}" for j in range(k)]
        if header != expected:
            raise FormatError(
                f"{path}: bank header {header} does not match current K={k} "
                f"(expected {expected})"
            )
        rows = [(int(r[0]), [float(v) for v in r[1:]]) for r in reader]
    out = {}
    for idx, vec in rows:
        if not 0 <= idx < n:
            raise FormatError(f"{path}: instance index {idx} out of range for N={n}")
        if len(vec) != k:
            raise FormatError(f"{path}: row for index {idx} has {len(vec)} values, need {k}")
        out[idx] = np.asarray(vec, dtype=np.float64)
    return out


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        num_ids=args.ids, points_per_id=args.per_id, dim=args.dim,
        intra_std=args.intra_std, num_cams=args.cams, seed=args.seed,
    )
    fs = generate_synthetic(spec)
    out = Path(args.output)
    save_features(fs, out)
    _write_manifest(
        out, "synth", asdict(spec), inputs={},
        outputs={"features": str(out), "metadata": str(out) + ".meta.csv"},
    )
    print(f"wrote {fs.n} x {fs.dim} features to {out}")
    return 0


def cmd_graph(args: argparse.Namespace) -> int:
    fs = load_features(args.data)
    kappa = min(args.kappa, fs.n)
    g = build_affinity_graph(fs, kappa)
    out = Path(args.output)
    rows = write_graph_csv(g, out)
    _write_manifest(
        out, "graph", {"kappa": kappa}, inputs={"data": str(args.data)},
        outputs={"graph": str(out)},
    )
    print(f"wrote {rows} graph edges (d < 1.0) to {out}")
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    fs = load_features(args.data)
    cfg, provenance = _resolve_train_config(args)
    kappa = min(cfg.kappa, fs.n)
    g = build_affinity_graph(fs, kappa)
    pls = dbscan(g, cfg.eps_dbscan, cfg.min_samples)
    out = Path(args.output)
    write_clusters_csv(pls, out)
    _write_manifest(
        out, "cluster",
        {"kappa": kappa, "eps_dbscan": cfg.eps_dbscan, "min_samples": cfg.min_samples},
        inputs={"data": str(args.data)}, outputs={"clusters": str(out)},
        provenance=provenance,
    )
    print(f"K={pls.num_clusters} clusters, {pls.n_clustered}/{fs.n} inliers -> {out}")
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    fs = load_features(args.data)
    cfg, provenance = _resolve_train_config(args)
    kappa = min(cfg.kappa, fs.n)
    g = build_affinity_graph(fs, kappa)
    pls = dbscan(g, cfg.eps_dbscan, cfg.min_samples)
    if pls.num_clusters == 0:
        print("error: no clusters found, nothing to refine", file=sys.stderr)
        return 1
    pbank = init_prediction_bank(pls)
    if args.bank is not None:
        for idx, vec in _load_bank_csv(Path(args.bank), fs.n, pls.num_clusters).items():
            pbank.student[idx] = vec
    refined = refine_all(pls, pbank, g, cfg.refine_config())
    out = Path(args.output)
    write_refined_csv(pls, refined, out)
    _write_manifest(
        out, "refine",
        {"kappa": kappa, "eps_dbscan": cfg.eps_dbscan, "min_samples": cfg.min_samples,
         "alpha": cfg.alpha, "rho": cfg.rho, "tau_d": cfg.tau_d,
         "strategy": cfg.refine_config().strategy},
        inputs={"data": str(args.data), "bank": str(args.bank) if args.bank else None},
        outputs={"refined": str(out)}, provenance=provenance,
    )
    print(f"refined {refined.indices.size} inliers -> {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    fs = load_features(args.data)
    cfg, provenance = _resolve_train_config(args)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    pair, history = train(
        cfg, fs,
        dump_clusters_dir=outdir if args.dump_clusters else None,
        dump_refined_dir=outdir if args.dump_refined else None,
    )
    history_path = outdir / "history.csv"
    model_path = outdir / "model.ncpm"
    write_history(history, history_path)
    save_model(pair.student, model_path)
    _write_manifest(
        outdir, "train", asdict(cfg), inputs={"data": str(args.data)},
        outputs={"history": str(history_path), "model": str(model_path)},
        provenance=provenance,
    )
    last = history[-1] if history else None
    if last is None:
        print(f"trained 0 epochs -> {outdir}")
    else:
        ari = "n/a" if last.ari is None else f"{last.ari:.4f}"
        print(f"trained {len(history)} epochs, final K={last.k}, ARI={ari} -> {outdir}")
    return 0


def _evaluate_features(emb: FeatureSet, cfg: TrainConfig, query_cam: int) -> EvalReport:
    query, gallery = split_query_gallery(emb, query_cam)
    retrieval = cmc_map(query, gallery)
    kappa = min(cfg.kappa, emb.n)
    g = build_affinity_graph(emb, kappa)
    pls = dbscan(g, cfg.eps_dbscan, cfg.min_samples)
    quality = cluster_quality(pls, emb.true_ids) if emb.true_ids is not None else None
    nr = (
        noise_rate(pls.assignment, pls, emb.true_ids)
        if emb.true_ids is not None and pls.num_clusters > 0
        else None
    )
    return EvalReport(
        map=retrieval.map, cmc=retrieval.cmc,
        n_queries=retrieval.n_queries, n_excluded=retrieval.n_excluded,
        ari=quality[0] if quality else None,
        nmi=quality[1] if quality else None,
        purity=quality[2] if quality else None,
        noise_rate=nr,
    )


def cmd_eval(args: argparse.Namespace) -> int:
    fs = load_features(args.data)
    cfg, provenance = _resolve_train_config(args)
    emb = embed_features(load_model(args.model), fs) if args.model else fs
    report = _evaluate_features(emb, cfg, args.query_cam)
    out = Path(args.output)
    write_eval_json(report, out, protocol={
        "query_cam": args.query_cam,
        "camera_filtering": True,
        "kappa": min(cfg.kappa, fs.n),
        "eps_dbscan": cfg.eps_dbscan,
        "min_samples": cfg.min_samples,
        "model": str(args.model) if args.model else None,
    })
    _write_manifest(
        out, "eval",
        {"query_cam": args.query_cam, "kappa": min(cfg.kappa, fs.n),
         "eps_dbscan": cfg.eps_dbscan, "min_samples": cfg.min_samples},
        inputs={"data": str(args.data), "model": str(args.model) if args.model else None},
        outputs={"report": str(out)}, provenance=provenance,
    )
    cmc = "n/a" if report.cmc is None else f"{report.cmc[0]:.4f}"
    print(f"mAP={report.map:.4f} rank1={cmc} -> {out}")
    return 0


SWEEP_PARAMS = ("alpha", "lambda1", "lambda2", "rho")


def cmd_sweep(args: argparse.Namespace) -> int:
    fs = load_features(args.data)
    base, provenance = _resolve_train_config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"--values must be comma-separated numbers: {e}") from e
    if not values:
        raise ConfigError("--values is empty")
    out = Path(args.output)
    rows = []
    for v in values:
        cfg = replace(base, **{args.param: v})
        pair, history = train(cfg, fs)
        emb = embed_features(pair.student, fs)
        report = _evaluate_features(emb, cfg, args.query_cam)
        final_ari = next((r.ari for r in reversed(history) if r.ari is not None), None)
        rows.append([
            repr(v), repr(report.map),
            repr(report.cmc[0]) if report.cmc else "",
            "" if final_ari is None else repr(final_ari),
        ])
        print(f"{args.param}={v}: map={report.map:.4f} ari={final_ari}")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.param, "map", "rank1", "ari"])
        writer.writerows(rows)
    _write_manifest(
        out, "sweep",
        {**asdict(base), "sweep_param": args.param, "sweep_values": values},
        inputs={"data": str(args.data)}, outputs={"table": str(out)},
        provenance=provenance,
    )
    print(f"wrote {len(rows)} sweep rows -> {out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    fs = load_features(args.data)
    base, provenance = _resolve_train_config(args)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = []
    for name in ABLATION_VARIANTS:
        cfg = variant_config(base, name)
        vdir = outdir / name
        vdir.mkdir(parents=True, exist_ok=True)
        pair, history = train(cfg, fs)
        write_history(history, vdir / "history.csv")
        save_model(pair.student, vdir / "model.ncpm")
        _write_manifest(
            vdir, "train", asdict(cfg), inputs={"data": str(args.data)},
            outputs={"history": str(vdir / "history.csv"), "model": str(vdir / "model.ncpm")},
        )
        emb = embed_features(pair.student, fs)
        report = _evaluate_features(emb, cfg, args.query_cam)
        final_ari = next((r.ari for r in reversed(history) if r.ari is not None), None)
        summary.append([
            name,
            "" if final_ari is None else repr(final_ari),
            repr(report.map),
            repr(report.cmc[0]) if report.cmc else "",
        ])
        print(f"{name}: ari={final_ari} map={report.map:.4f}")
    with open(outdir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "ari", "map", "rank1"])
        writer.writerows(summary)
    _write_manifest(
        outdir, "ablate", asdict(base), inputs={"data": str(args.data)},
        outputs={"variants": sorted(ABLATION_VARIANTS),
                 "summary": str(outdir / "summary.csv")},
        provenance=provenance,
    )
    print(f"wrote {len(summary)} variant runs -> {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncplr",
        description="Desk-scale pipeline that refines clustering "
                    "pseudo-labels with neighbour consistency on embedding "
                    "vectors.",
    )
    parser.add_argument("--version", action="version", version=f"ncplr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--ids", type=int, required=True, help="number of identities")
    p.add_argument("--per-id", type=int, required=True, help="instances per identity")
    p.add_argument("--dim", type=int, required=True, help="embedding dimension")
    p.add_argument("--intra-std", type=float, default=0.1,
                   help="within-identity noise std (default: 0.1)")
    p.add_argument("--cams", type=int, default=4, help="camera count (default: 4)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    p.add_argument("-o", "--output", required=True, help="output feature file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("graph", help="build the affinity graph and dump its edges")
    p.add_argument("--data", required=True, help="input feature file")
    p.add_argument("--kappa", type=int, default=TrainConfig().kappa,
                   help=f"reciprocal-set size (default: {TrainConfig().kappa})")
    p.add_argument("-o", "--output", required=True, help="output CSV")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("cluster", help="cluster a feature file and dump assignments")
    p.add_argument("--data", required=True, help="input feature file")
    _add_train_flags(p)
    p.add_argument("-o", "--output", required=True, help="output CSV")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("refine", help="one-shot label refinement over a feature file")
    p.add_argument("--data", required=True, help="input feature file")
    p.add_argument("--bank", default=None,
                   help="CSV of student predictions (index,p0..pK-1); "
                        "defaults to one-hot cluster labels")
    _add_train_flags(p)
    p.add_argument("-o", "--output", required=True, help="output CSV")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("--data", required=True, help="input feature file")
    _add_train_flags(p)
    p.add_argument("--dump-clusters", action="store_true",
                   help="write per-epoch cluster assignments")
    p.add_argument("--dump-refined", action="store_true",
                   help="write per-epoch refined-label summaries")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval + clustering metrics")
    p.add_argument("--data", required=True, help="input feature file")
    p.add_argument("--model", default=None,
                   help="model file; omit to evaluate the raw features")
    p.add_argument("--query-cam", type=int, default=0,
                   help="camera id whose captures form the query set (default: 0)")
    _add_train_flags(p)
    p.add_argument("-o", "--output", required=True, help="output JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid one hyper-parameter, one CSV row per value")
    p.add_argument("--data", required=True, help="input feature file")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS,
                   help="hyper-parameter to sweep")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--query-cam", type=int, default=0,
                   help="camera id for retrieval queries (default: 0)")
    _add_train_flags(p)
    p.add_argument("-o", "--output", required=True, help="output CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train the six loss variants on one seed")
    p.add_argument("--data", required=True, help="input feature file")
    p.add_argument("--query-cam", type=int, default=0,
                   help="camera id for retrieval queries (default: 0)")
    _add_train_flags(p)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    return parser


def _apply_thread_cap() -> None:
    global _THREAD_LIMITER
    raw = os.environ.get("NCPLR_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"NCPLR_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    _THREAD_LIMITER = threadpool_limits(limits=n)


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        _apply_thread_cap()
        return args.func(args)
    except NcplrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
