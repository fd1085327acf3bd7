"""Command-line front end.

Verbs:
  run        train + evaluate a configured protocol for each seed
  eval       standalone retrieval evaluation from saved snapshots
  gradcheck  finite-difference verification of every analytic gradient
  gen-data   write synthetic corpora in the on-disk format

Exit codes: 0 success; 2 invalid config or usage; 3 training abort;
4 snapshot/config digest mismatch; 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    apply_overrides,
    config_digest,
    load_config,
    parse_toggle_args,
)
from .continual import run_protocol
from .data import DomainSpec, PairPolicy, generate_domain, load_corpus, save_corpus
from .encoder import (
    backward,
    encode,
    encode_with_cache,
    flatten_params,
    init_params,
    load_snapshot,
    unflatten_params,
)
from .errors import ConfigurationError, TrainingError, UsageError
from .evaluation import (
    RECALL_CSV,
    RESULTS_FILE,
    build_index,
    dump_results,
    evaluate_protocol,
    recall_at_n,
    results_dict,
    write_recall_csv,
)
from .gradcheck import GradCheckSuite, check_gradient
from .losses import (
    LossToggles,
    batch_hard_triplet,
    combined_loss,
    distribution_distill_loss,
    ranking_distill_loss,
    triplet_loss,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_DIGEST = 4
EXIT_GRADCHECK = 5


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankfuse", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"rankfuse {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed list")
    common.add_argument("--out", type=str, default=None, help="output directory override")

    run = sub.add_parser("run", parents=[common], help="train and evaluate a protocol")
    run.add_argument("--config", required=True, help="experiment config (YAML)")
    run.add_argument(
        "--toggle",
        action="append",
        nargs="+",
        metavar="NAME=on|off",
        help="flip terms: pr, rkd, dkd, buffer, fusion (repeatable, space-separable)",
    )
    run.add_argument("--lambda-variant", choices=["literal", "incloud"], default=None)
    run.add_argument("--divergence", choices=["skl", "kl", "js"], default=None)
    run.add_argument("--fusion", choices=["on", "off"], default=None)

    ev = sub.add_parser("eval", parents=[common], help="evaluate saved snapshots on a corpus")
    ev.add_argument("--snapshot", action="append", required=True, help="snapshot file (repeatable)")
    ev.add_argument("--corpus", required=True, help="database corpus directory")
    ev.add_argument("--queries", required=True, help="query corpus directory")
    ev.add_argument("--fusion", choices=["on", "off"], default="off")
    ev.add_argument("--config", default=None, help="verify snapshots against this config")
    ev.add_argument("--pos-test", type=float, default=25.0, help="positive radius, meters")
    ev.add_argument("--at", type=int, default=1, help="N for Recall@N")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--batch", type=int, default=5)
    gc.add_argument("--dim", type=int, default=8)
    gc.add_argument("--points", type=int, default=32)
    gc.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    gd = sub.add_parser("gen-data", parents=[common], help="write synthetic corpora to disk")
    gd.add_argument("--config", required=True, help="experiment config (YAML)")
    return p


# ---------------------------------------------------------------------------
# run


def _effective_config(args):
    cfg = load_config(args.config)
    return apply_overrides(
        cfg,
        seed=args.seed,
        out=args.out,
        toggles=parse_toggle_args(getattr(args, "toggle", None)),
        lambda_variant=getattr(args, "lambda_variant", None),
        divergence=getattr(args, "divergence", None),
        fusion={"on": True, "off": False}.get(getattr(args, "fusion", None)),
    )


def cmd_run(args) -> int:
    cfg = _effective_config(args)
    digest = config_digest(cfg)
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    manifest = {
        "tool_version": __version__,
        "config_digest": digest,
        "seeds": list(cfg.seeds),
        "results": {},
        "wall_clock": {},
    }
    agg = {"single": {"mean_recall_at_1": [], "forgetting": []},
           "fused": {"mean_recall_at_1": [], "forgetting": []}}
    for seed in cfg.seeds:
        seed_dir = out_root / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        run = run_protocol(cfg, seed, out_dir=seed_dir, digest=digest)
        t1 = time.perf_counter()
        single = evaluate_protocol(run, fusion=False, forgetting_max=cfg.forgetting_max)
        fused = (
            evaluate_protocol(run, fusion=True, forgetting_max=cfg.forgetting_max)
            if cfg.fusion
            else None
        )
        t2 = time.perf_counter()
        headline = fused if fused is not None else single
        results = results_dict(headline, single, fused, seed, digest)
        (seed_dir / RESULTS_FILE).write_text(dump_results(results), encoding="utf-8")
        write_recall_csv(headline.recall_matrix, run.domain_names, seed_dir / RECALL_CSV)
        manifest["results"][str(seed)] = str(seed_dir / RESULTS_FILE)
        manifest["wall_clock"][str(seed)] = {
            "train_seconds": t1 - t0,
            "eval_seconds": t2 - t1,
            "per_step_seconds": run.step_seconds,
        }
        agg["single"]["mean_recall_at_1"].append(single.mean_recall_at_1)
        if single.forgetting:
            agg["single"]["forgetting"].append(single.forgetting.score)
        if fused is not None:
            agg["fused"]["mean_recall_at_1"].append(fused.mean_recall_at_1)
            if fused.forgetting:
                agg["fused"]["forgetting"].append(fused.forgetting.score)
        print(
            f"seed {seed}: mean R@1 {headline.mean_recall_at_1:.2f}"
            + (f", F {headline.forgetting.score:.2f}" if headline.forgetting else "")
        )

    aggregate = {"config_digest": digest, "n_seeds": len(cfg.seeds)}
    for mode, stats in agg.items():
        for key, vals in stats.items():
            if vals:
                aggregate[f"{mode}_{key}_mean"] = float(np.mean(vals))
                aggregate[f"{mode}_{key}_std"] = float(np.std(vals))
    (out_root / "aggregate.json").write_text(
        json.dumps(aggregate, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out_root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    fusion = args.fusion == "on"
    snaps = [load_snapshot(p) for p in args.snapshot]
    if fusion and len(snaps) != 2:
        raise UsageError(f"--fusion on needs exactly two snapshots, got {len(snaps)}")
    if not fusion and len(snaps) != 1:
        raise UsageError(f"single-model eval needs one snapshot, got {len(snaps)}")

    digests = {s.config_digest for s in snaps}
    if len(digests) > 1:
        print("error: snapshots come from different configs", file=sys.stderr)
        return EXIT_DIGEST
    if args.config is not None:
        cfg = load_config(args.config)
        if config_digest(cfg) not in digests:
            print("error: snapshot digest does not match --config", file=sys.stderr)
            return EXIT_DIGEST

    policy = PairPolicy(pos_test=args.pos_test)
    database = load_corpus(args.corpus, policy)
    queries = load_corpus(args.queries, policy)
    index = build_index(snaps if fusion else snaps[0], database, fusion)
    outcome = recall_at_n(index, queries, args.pos_test, args.at)
    report = {
        "recall_at_n": outcome.percent,
        "n": args.at,
        "evaluated": outcome.evaluated,
        "excluded": outcome.excluded,
        "embedding_dim": int(index.embeddings.shape[1]),
        "fusion": fusion,
        "snapshots": [str(p) for p in args.snapshot],
    }
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _random_relation(rng, n):
    from .continual import batch_relation
    from .data import PlaceSample, PointScan

    samples = []
    for i in range(n):
        pose = rng.uniform(0.0, 100.0, 2)
        pts = rng.uniform(-1.0, 1.0, (4, 3))
        samples.append(
            PlaceSample(scan=PointScan(points=pts), pose=pose, domain_id=0, sample_id=i)
        )
    return batch_relation(samples, PairPolicy())


def gradcheck_suite(seed: int, batch: int, dim: int, points: int, corrupt: float = 0.0) -> GradCheckSuite:
    """FD-verify the encoder and every loss; ``corrupt`` is a negative control."""
    rng = np.random.Generator(np.random.PCG64(seed))
    suite = GradCheckSuite()
    hidden = 6

    # Encoder: scalar probe <W, E(params)> exercises every parameter path.
    scans = rng.uniform(-1.0, 1.0, (batch, points, 3))
    params = init_params(seed, hidden, dim)
    probe = rng.normal(0.0, 1.0, (batch, dim))
    for normalize in (False, True):
        e, cache = encode_with_cache(params, scans, normalize)
        g = backward(params, scans, probe, normalize, cache=cache)
        suite.reports.append(
            check_gradient(
                lambda v: float(
                    np.sum(probe * encode(unflatten_params(v, hidden, dim), scans, normalize).vectors)
                ),
                flatten_params(g),
                flatten_params(params),
                name=f"encoder[normalize={normalize}]",
                corrupt=corrupt,
            )
        )

    # Triplet margin loss on a generic triple.
    tri = rng.normal(0.0, 1.0, (3, dim))
    res = triplet_loss(tri[0], tri[1], tri[2], margin=2.5)
    suite.reports.append(
        check_gradient(
            lambda v: triplet_loss(v[0], v[1], v[2], margin=2.5).value,
            res.grad_new,
            tri,
            name="triplet",
            corrupt=corrupt,
        )
    )

    # Batch-hard triplet over a random relation.
    e = rng.normal(0.0, 1.0, (batch, dim))
    relation = _random_relation(rng, batch)
    bh = batch_hard_triplet(e, relation, margin=0.5)
    suite.reports.append(
        check_gradient(
            lambda v: batch_hard_triplet(v, relation, margin=0.5).loss.value,
            bh.loss.grad_new,
            e,
            name="batch_hard_triplet",
            corrupt=corrupt,
        )
    )

    # Ranking distillation against a fixed old batch.
    e_old = rng.normal(0.0, 1.0, (batch, dim))
    e_new = rng.normal(0.0, 1.0, (batch, dim))
    rkd = ranking_distill_loss(e_old, e_new, tau=0.3)
    suite.reports.append(
        check_gradient(
            lambda v: ranking_distill_loss(e_old, v, tau=0.3).value,
            rkd.grad_new,
            e_new,
            name="ranking_distill",
            corrupt=corrupt,
        )
    )

    # Distribution distillation, all three divergences.
    for div in ("skl", "kl", "js"):
        dkd = distribution_distill_loss(e_old, e_new, temp=1.0, divergence=div)
        suite.reports.append(
            check_gradient(
                lambda v, d=div: distribution_distill_loss(e_old, v, temp=1.0, divergence=d).value,
                dkd.grad_new,
                e_new,
                name=f"distribution_distill[{div}]",
                corrupt=corrupt,
            )
        )

    # Combined objective with every term on.
    comb = combined_loss(
        e_old, e_new, relation, margin=0.5, rank_temp=0.3, dist_temp=1.0, lam=0.5,
        toggles=LossToggles(),
    )
    suite.reports.append(
        check_gradient(
            lambda v: combined_loss(
                e_old, v, relation, margin=0.5, rank_temp=0.3, dist_temp=1.0, lam=0.5,
                toggles=LossToggles(),
            ).loss.value,
            comb.loss.grad_new,
            e_new,
            name="combined",
            corrupt=corrupt,
        )
    )
    return suite


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    suite = gradcheck_suite(seed, args.batch, args.dim, args.points, corrupt=args.corrupt)
    for line in suite.lines():
        print(line)
    if suite.passed:
        return EXIT_OK
    offenders = [r.name for r in suite.reports if not r.passed]
    print(f"gradient check failed: {', '.join(offenders)}", file=sys.stderr)
    return EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    out_root = Path(cfg.out_dir) / "corpora"
    for i, dom in enumerate(cfg.domains):
        style = dom.style_params()
        for split, session, n in (
            ("train", 0, dom.train_places),
            ("db", 1, dom.test_places),
            ("query", 2, dom.test_places),
        ):
            spec = DomainSpec(
                seed=dom.seed,
                n_places=n,
                trajectory_length=dom.trajectory_length,
                style=style,
                session=session,
            )
            samples = generate_domain(spec, points_per_scan=cfg.encoder.points_per_scan)
            save_corpus(samples, out_root / dom.name / split)
        print(f"domain {dom.name}: wrote train/db/query under {out_root / dom.name}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "run":
            return cmd_run(args)
        if args.verb == "eval":
            return cmd_eval(args)
        if args.verb == "gradcheck":
            return cmd_gradcheck(args)
        if args.verb == "gen-data":
            return cmd_gen_data(args)
        raise UsageError(f"unknown verb {args.verb!r}")
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
