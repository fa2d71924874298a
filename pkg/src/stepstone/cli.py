"""Command-line harness: fit, simulate, featurize, train, score, evaluate, obfuscate,
predict-length.

Every command prints one JSON record on success. Exit codes: 0 success,
1 runtime failure (including fewer than 99% of chains simulated), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .features import interval_features, packet_features, save_features
from .metrics import (DEFAULT_TAUS, MetricsError, chain_report, chainlen_accuracy,
                      default_neg_per_pos, export_roc_csv, make_pairs, metrics_report,
                      roc_curve)
from .obfuscation import DELAY_PROFILES, obfuscate
from .simulator import DatasetManifest, generate_dataset
from .traffic import (DEFAULT_GAP_THRESHOLD, BurstModel, TraceError, default_burst_model,
                      fit_burst_model, load_trace, parse_bursts, save_trace)

logger = logging.getLogger("stepstone")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MIN_OK_FRACTION = 0.99


class UsageError(Exception):
    pass


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _config(args) -> ExperimentConfig:
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, seed=args.seed))
    return cfg


def _manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _progress(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


# --- commands ----------------------------------------------------------------

def cmd_fit(args) -> int:
    root = Path(args.traces)
    if not root.is_dir():
        raise UsageError(f"trace directory not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.suffix in (".csv", ".jsonl"))
    seqs, skipped = [], []
    for p in files:
        try:
            seqs.append(parse_bursts(load_trace(p), args.threshold))
        except TraceError as exc:
            skipped.append(str(exc))
            logger.warning("skipping %s", exc)
    if not seqs:
        print(f"error: no parsable traces under {root}", file=sys.stderr)
        return EXIT_FAIL
    model = fit_burst_model(seqs)
    out = _out(args, "burst_model.json")
    model.save(out)
    _emit({"command": "fit", "out": str(out), "traces": len(seqs), "skipped": len(skipped),
           "bursts": int(sum(len(s) for s in seqs)), "threshold": args.threshold})
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    ds = cfg.dataset
    model = BurstModel.load(ds.burst_model) if ds.burst_model else default_burst_model()
    n = args.n_chains if args.n_chains is not None else ds.n_chains
    out = _out(args, ds.name)
    manifest = generate_dataset(cfg.sim, n, ds.seed, out, model, ds.name, ds.format, args.workers)
    ok = len(manifest.ok_chains)
    _emit({"command": "simulate", "out": str(out), "n_chains": n, "ok": ok,
           "failed": n - ok, "digest": manifest.digest()})
    return EXIT_OK if ok >= MIN_OK_FRACTION * n else EXIT_FAIL


def cmd_featurize(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args.manifest)
    out = _out(args, "features")
    n = 0
    for entry in manifest.ok_chains:
        chain = manifest.load_chain(entry)
        (out / chain.chain_id).mkdir(parents=True, exist_ok=True)
        for name, trace in chain.captures.items():
            tensor = interval_features(trace, bins=cfg.fen.input_len)
            save_features(tensor, out / chain.chain_id / f"{name}.feat")
            n += 1
    _emit({"command": "featurize", "out": str(out), "chains": len(manifest.ok_chains),
           "tensors": n})
    return EXIT_OK


def _network_tensors(chains, bins):
    xa = np.stack([interval_features(c.attacker, bins=bins).data for c in chains])
    xp = np.stack([interval_features(c.target, bins=bins).data for c in chains])
    la = np.array([c.capture_labels("h0_egress") for c in chains], dtype=np.float32)
    lp = np.array([c.capture_labels(f"h{c.config.n_links}_ingress") for c in chains],
                  dtype=np.float32)
    return xa, xp, la, lp


def ingress_examples(chains, max_len):
    """Packet tensors and (up, down) labels for every ingress capture of every chain."""
    x, y = [], []
    for c in chains:
        for h in range(1, c.config.n_links + 1):
            cp = f"h{h}_ingress"
            x.append(packet_features(c.captures[cp], max_len).data)
            y.append(c.capture_labels(cp))
    return np.stack(x), np.array(y, dtype=np.float64)


def cmd_train(args) -> int:
    from .model.chainlen import train_chainlen
    from .model.training import fit_bundle, save_checkpoint

    cfg = _config(args)
    manifest = _manifest(args.manifest)
    chains = manifest.load_chains()
    n_val = int(round(cfg.model.val_fraction * len(chains)))
    train, val = chains[:len(chains) - n_val], chains[len(chains) - n_val:]
    if len(train) < 2:
        raise UsageError("need at least two training chains")
    xa, xp, la, lp = _network_tensors(train, cfg.fen.input_len)
    val_t = None
    if len(val) >= 2:
        va, vp, _, _ = _network_tensors(val, cfg.fen.input_len)
        val_t = (va, vp)
    # progress goes to stderr as JSON lines; stdout carries only the result record
    bundle = fit_bundle(xa, xp, cfg.train, cfg.fen, la, lp, val_t, log_fn=_progress)
    chainlen = None
    if cfg.model.chainlen:
        x, y = ingress_examples(train, cfg.chainlen.max_len)
        chainlen, log = train_chainlen(x, y, cfg.chainlen, log_fn=_progress)
        bundle.log.extend(log)
    out = _out(args, "model.npz")
    save_checkpoint(out, bundle, chainlen, cfg.chainlen)
    rec = {"command": "train", "out": str(out), "train_chains": len(train),
           "val_chains": len(val)}
    fen_log = [r for r in bundle.log if r.get("phase") == "fen"]
    if fen_log and "val_auc" in fen_log[-1]:
        rec["val_auc"] = fen_log[-1]["val_auc"]
    _emit(rec)
    return EXIT_OK


SCORE_FIELDS = ("a_chain", "a_capture", "b_chain", "b_capture", "label", "score")


def score_population(bundle, chains, mode: str, neg_per_pos, seed: int):
    """Score every pair of a population; embeddings are computed once per trace."""
    pop = make_pairs(chains, mode, neg_per_pos, seed)
    by_id = {c.chain_id: c for c in chains}
    refs = sorted({r for p in pop.pairs for r in (p.a, p.b)},
                  key=lambda r: (r.chain_id, r.capture_point))
    index = {r: i for i, r in enumerate(refs)}
    x = np.stack([bundle.featurize(by_id[r.chain_id].captures[r.capture_point]) for r in refs])
    emb = bundle.embed(x)
    ia = [index[p.a] for p in pop.pairs]
    ib = [index[p.b] for p in pop.pairs]
    scores = bundle.score_embeddings(emb[ia], emb[ib])
    return pop, scores


def cmd_score(args) -> int:
    from .model.training import load_checkpoint

    cfg = _config(args)
    manifest = _manifest(args.manifest)
    bundle, _ = load_checkpoint(args.checkpoint)
    chains = manifest.load_chains()
    mode = args.mode or cfg.eval.mode
    npp = cfg.eval.neg_per_pos
    if npp == "auto":
        npp = default_neg_per_pos(len(chains))
    pop, scores = score_population(bundle, chains, mode, npp, cfg.dataset.seed)
    out = _out(args, "scores.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_FIELDS)
        for p, s in zip(pop.pairs, scores):
            w.writerow([p.a.chain_id, p.a.capture_point, p.b.chain_id, p.b.capture_point,
                        int(p.correlated), repr(float(s))])
    _emit({"command": "score", "out": str(out), "mode": mode, "pairs": len(pop),
           "positives": int(pop.labels.sum())})
    return EXIT_OK


def read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(SCORE_FIELDS) - set(rows[0]):
        raise UsageError(f"{path}: not a score table (columns {', '.join(SCORE_FIELDS)})")
    return rows


def _host_links(rows):
    """Group positive host-mode rows by chain: every row is one stone's link."""
    links: dict[str, list[float]] = {}
    for r in rows:
        if r["label"] == "1":
            links.setdefault(r["a_chain"], []).append(float(r["score"]))
    return list(links.values())


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    rows = read_scores(args.scores)
    scores = np.array([float(r["score"]) for r in rows])
    labels = np.array([r["label"] == "1" for r in rows])
    taus = tuple(args.taus) if args.taus else cfg.eval.taus or DEFAULT_TAUS
    report = metrics_report(scores, labels, taus)
    out = _out(args, "metrics.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    roc_path = out.with_name(out.stem + "_roc.csv")
    export_roc_csv(roc_curve(scores, labels), roc_path)
    host = all(r["a_capture"].endswith("_ingress") and r["b_capture"].endswith("_egress")
               for r in rows)
    if host:
        report["chain"] = chain_report(_host_links(rows), scores[~labels], taus).to_dict()
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    rec = {"command": "evaluate", "out": str(out), "roc_csv": str(roc_path),
           "auc": report["auc"], "per_tau": report["per_tau"]}
    if host:
        rec["chain"] = report["chain"]
    _emit(rec)
    return EXIT_OK


def cmd_obfuscate(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args.manifest)
    ob = cfg.obfuscation
    overhead = args.pad_overhead if args.pad_overhead is not None else ob.overhead_pct
    profile = args.delay_profile or ob.delay_profile
    seed = args.seed if args.seed is not None else ob.seed
    if profile != "none" and profile not in DELAY_PROFILES:
        raise UsageError(f"unknown delay profile {profile!r}")
    out = _out(args, f"{manifest.name}_obf")
    captures = set(args.captures.split(","))
    root = manifest.root or Path(".")
    entries = []
    touched = 0
    for entry in manifest.chains:
        entry = json.loads(json.dumps(entry))
        if entry.get("status") == "ok":
            rng = np.random.default_rng([seed, int(entry["seed"])])
            for name, rel in entry["captures"].items():
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                if name in captures:
                    trace = obfuscate(load_trace(root / rel, capture_point=name), rng,
                                      overhead or None, profile)
                    save_trace(trace, out / rel)
                    touched += 1
                else:
                    shutil.copyfile(root / rel, out / rel)
        entries.append(entry)
    obf = DatasetManifest(manifest.name + "_obf", manifest.protocol_mode, manifest.n_chains,
                          manifest.base_seed, entries, out)
    obf.save(out / "manifest.json")
    _emit({"command": "obfuscate", "out": str(out), "pad_overhead": overhead,
           "delay_profile": profile, "seed": seed, "traces": touched})
    return EXIT_OK


def cmd_predict_length(args) -> int:
    from .model.chainlen import chainlen_forward
    from .model.training import load_checkpoint

    manifest = _manifest(args.manifest)
    _, chainlen = load_checkpoint(args.checkpoint)
    if chainlen is None:
        raise UsageError("checkpoint has no chain-length model (set model.chainlen: true)")
    cfg = _config(args)
    chains = manifest.load_chains()
    x, y = ingress_examples(chains, cfg.chainlen.max_len)
    pred = chainlen_forward(chainlen, x)
    up, down, avg = chainlen_accuracy(pred, y)
    out = _out(args, "chain_length.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain_id", "capture", "up_true", "down_true", "up_pred", "down_pred"])
        k = 0
        for c in chains:
            for h in range(1, c.config.n_links + 1):
                w.writerow([c.chain_id, f"h{h}_ingress", int(y[k, 0]), int(y[k, 1]),
                            repr(float(pred[k, 0])), repr(float(pred[k, 1]))])
                k += 1
    _emit({"command": "predict-length", "out": str(out), "flows": len(y),
           "up_acc": up, "down_acc": down, "avg_acc": avg})
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stepstone", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", parents=[common], help="fit a burst model to a trace directory")
    s.add_argument("--traces", required=True)
    s.add_argument("--threshold", type=float, default=DEFAULT_GAP_THRESHOLD)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", parents=[common], help="generate a chain dataset")
    s.add_argument("--n-chains", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("featurize", parents=[common], help="write interval tensors")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", parents=[common], help="train FEN, head, chain-length model")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", parents=[common], help="score a pair population")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", choices=("network", "host"), default=None)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("evaluate", parents=[common], help="ROC, pAUC and chain metrics")
    s.add_argument("--scores", required=True)
    s.add_argument("--taus", type=float, nargs="+", default=None)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("obfuscate", parents=[common], help="pad and delay captures")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pad-overhead", type=float, default=None, help="percent of packet count")
    s.add_argument("--delay-profile", default=None,
                   choices=("none",) + tuple(DELAY_PROFILES))
    s.add_argument("--captures", default="h0_egress", help="comma-separated capture points")
    s.set_defaults(func=cmd_obfuscate)

    s = sub.add_parser("predict-length", parents=[common], help="chain-length predictions")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_predict_length)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceError, MetricsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
