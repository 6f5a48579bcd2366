"""Command-line pipeline driver.

Stages communicate through files in a working directory:

    corpus/            item features (gen-data)
    logs.csv           behavior log (gen-data)
    users.csv          user feature table (gen-data)
    embeddings.bin     frozen content embeddings (train-embed)
    tree.bin           index tree (build-tree)
    train/             metrics.csv + checkpoints (train)
    retrieved.jsonl    per-user results (retrieve)
    report.json        evaluation report (eval)
    attention/         attention export (export-attention)
    ablation.json      variant grid (ablate)

Every error class exits with its own code so scripts can tell a bad
config from a missing artifact from a training blowup.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import corpus as corpus_mod
from . import evaluation, mmembed, retrieval, training, tree as tree_mod
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DependencyError,
    FormatError,
    FrozenStoreError,
    IngestError,
    LookupFailure,
    MMTreeError,
    ShapeError,
    TrainingError,
)
from .estimator import EstimatorParams, load_params, save_params

EXIT_CODES = {
    ConfigError: 2,
    DependencyError: 3,
    IngestError: 4,
    TrainingError: 5,
    FormatError: 6,
    LookupFailure: 7,
    ShapeError: 8,
    FrozenStoreError: 9,
}


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(
            f"missing artifact {path}; produce it with `mmtree {producer}` first"
        )
    return path


def _load_logs(workdir: Path):
    instances, stats = corpus_mod.read_logs(_require(workdir / "logs.csv", "gen-data"))
    stream = corpus_mod.LogStream(instances=instances, users={})
    return stream, stats


def _load_users(workdir: Path) -> dict[int, np.ndarray]:
    return corpus_mod.read_users(_require(workdir / "users.csv", "gen-data"))


def _load_store(workdir: Path):
    return mmembed.load_store(_require(workdir / "embeddings.bin", "train-embed"))


def _load_tree(workdir: Path):
    return tree_mod.load_tree(_require(workdir / "tree.bin", "build-tree"))


def _load_ckpt(workdir: Path):
    params, meta = load_params(
        _require(workdir / "train" / "ckpt_final.bin", "train")
    )
    return params, meta


def cmd_gen_data(cfg: RunConfig, workdir: Path) -> int:
    workdir.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    corpus = corpus_mod.generate_corpus(
        d.n_items, d.n_clusters, d.d_text, d.d_image, d.seed, noise=d.noise
    )
    stream = corpus_mod.generate_logs(
        corpus, d.n_users, d.events_per_user, d.T, seed=d.seed + 1,
        max_seq_len=d.max_seq_len,
    )
    corpus_mod.save_corpus(corpus, workdir / "corpus",
                           extra_meta={"config": cfg.to_dict()})
    n = corpus_mod.write_logs(stream.instances, workdir / "logs.csv", T=d.T)
    corpus_mod.write_users(stream.users, workdir / "users.csv")
    print(f"gen-data: {d.n_items} items, {len(stream.users)} users, {n} log lines")
    return 0


def cmd_train_embed(cfg: RunConfig, workdir: Path) -> int:
    corpus = corpus_mod.load_corpus(_require(workdir / "corpus", "gen-data"))
    pairs = mmembed.build_pairs(corpus, cfg.embed.pairs_per_item, cfg.embed.seed)
    store = mmembed.train_embeddings(corpus, pairs, cfg.embed.train_config())
    mmembed.save_store(store, workdir / "embeddings.bin")
    losses = store.meta["epoch_losses"]
    with open(workdir / "embeddings_meta.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"config": cfg.to_dict(), "epoch_losses": losses},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    first = f"{losses[0]:.4f}" if losses else "n/a"
    last = f"{losses[-1]:.4f}" if losses else "n/a"
    print(f"train-embed: {store.n_items} items, d={store.d}, "
          f"loss {first} -> {last}")
    return 0


def cmd_build_tree(cfg: RunConfig, workdir: Path) -> int:
    store = _load_store(workdir)
    tree = tree_mod.build_tree(store, seed=cfg.tree.seed)
    tree_mod.save_tree(tree, workdir / "tree.bin")
    with open(workdir / "tree_meta.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "config": cfg.to_dict(),
                "height": tree.height,
                "n_items": tree.n_items,
                "n_placeholders": int(tree.placeholder.sum()),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    print(f"build-tree: height {tree.height}, {tree.n_nodes} nodes, "
          f"{int(tree.placeholder.sum())} placeholders")
    return 0


def cmd_train(cfg: RunConfig, workdir: Path) -> int:
    stream, _ = _load_logs(workdir)
    users = _load_users(workdir)
    store = _load_store(workdir)
    tree = _load_tree(workdir)
    train_events, _held = training.time_split(stream, cfg.eval.train_frac)
    params, metrics = training.train_estimator(
        train_events, users, tree, store, cfg.estimator, cfg.train,
        out_dir=workdir / "train",
    )
    save_params(params, workdir / "train" / "ckpt_final.bin",
                extra_config={"run_config": cfg.to_dict()})
    last = metrics[-1].mean_loss if metrics else float("nan")
    print(f"train: {len(train_events)} instances, {len(metrics)} steps, "
          f"final mean loss {last:.4f}")
    return 0


def cmd_retrieve(cfg: RunConfig, workdir: Path, users_arg: str | None,
                 out_path: str | None) -> int:
    stream, _ = _load_logs(workdir)
    user_feats = _load_users(workdir)
    store = _load_store(workdir)
    tree = _load_tree(workdir)
    params, _ = _load_ckpt(workdir)
    by_user = training.instances_by_user(stream)
    if users_arg:
        wanted = [int(u) for u in users_arg.split(",")]
        missing = [u for u in wanted if u not in by_user]
        if missing:
            raise LookupFailure(f"users not in logs: {missing}")
    else:
        wanted = sorted(by_user)
    out_fh = open(out_path, "w", encoding="utf-8") if out_path else sys.stdout
    try:
        results = []
        for user in wanted:
            events = by_user[user]
            hist = np.array([e.target for e in events], dtype=np.int64)
            res = retrieval.retrieve(
                corpus_mod.user_feature(user_feats.get(user)), hist, params,
                tree, store, cfg.retrieval.beam_width, cfg.retrieval.m_ret,
                user=user,
            )
            results.append(res)
        n = retrieval.write_results(results, out_fh)
    finally:
        if out_path:
            out_fh.close()
    if out_path:
        meta_path = Path(out_path).with_name(Path(out_path).stem + "_meta.json")
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump({"config": cfg.to_dict(), "n_users": n},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"retrieve: {n} users -> {out_path or 'stdout'}", file=sys.stderr)
    return 0


def _eval_setup(cfg: RunConfig, workdir: Path):
    stream, _ = _load_logs(workdir)
    users = _load_users(workdir)
    store = _load_store(workdir)
    tree = _load_tree(workdir)
    train_events, held = training.time_split(stream, cfg.eval.train_frac)
    train_by_user: dict[int, list] = {}
    for e in train_events:
        train_by_user.setdefault(e.user, []).append(e)
    hier_levels = [h for h in cfg.eval.hier_levels if 0 <= h <= tree.height]
    return stream, users, store, tree, train_by_user, held, hier_levels


def cmd_eval(cfg: RunConfig, workdir: Path) -> int:
    t_start = time.perf_counter()
    _, users, store, tree, train_by_user, held, hier_levels = _eval_setup(cfg, workdir)
    params, _ = _load_ckpt(workdir)
    report = evaluation.evaluate_splits(
        users, train_by_user, held, params, tree, store,
        cfg.retrieval.beam_width, cfg.retrieval.m_ret,
        n_splits=cfg.eval.n_splits, hier_levels=hier_levels,
        config_echo=cfg.to_dict(),
    )
    relevant_by_user = {
        u: {int(e.target) for e in evs} for u, evs in held.items()
    }
    report.extras["random_recall"] = evaluation.random_baseline_recall(
        relevant_by_user, tree.n_items, cfg.retrieval.m_ret, cfg.train.seed
    )
    untrained = EstimatorParams.init(cfg.estimator, tree.n_nodes,
                                     seed=cfg.train.seed)
    untrained_report = evaluation.evaluate_splits(
        users, train_by_user, held, untrained, tree, store,
        cfg.retrieval.beam_width, cfg.retrieval.m_ret,
        n_splits=cfg.eval.n_splits,
    )
    report.extras["untrained_recall_mean"] = untrained_report.recall_mean
    report.extras["untrained_recall_std"] = untrained_report.recall_std
    # wall-clock only; the determinism contract excludes this key
    report.extras["runtime"] = {
        "eval_seconds": round(time.perf_counter() - t_start, 3)
    }
    with open(workdir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    print(
        f"eval: recall@{cfg.retrieval.m_ret} = {report.recall_mean:.4f} "
        f"± {report.recall_std:.4f} over {report.n_users} users "
        f"(random {report.extras['random_recall']:.4f}, "
        f"untrained {report.extras['untrained_recall_mean']:.4f})"
    )
    return 0


def cmd_export_attention(cfg: RunConfig, workdir: Path, n_users: int | None) -> int:
    _, users, store, tree, train_by_user, held, _ = _eval_setup(cfg, workdir)
    params, _ = _load_ckpt(workdir)
    limit = n_users if n_users is not None else cfg.eval.attention_users
    evals: list[evaluation.UserEval] = []
    for user in sorted(held)[:limit]:
        feat = corpus_mod.user_feature(users.get(user))
        hist, relevant = evaluation.history_and_relevant(
            train_by_user.get(user, []), held[user]
        )
        if not relevant:
            continue
        evals.append(
            evaluation.evaluate_user(
                user, feat, hist, relevant, params, tree, store,
                cfg.retrieval.beam_width, cfg.retrieval.m_ret,
            )
        )
    summary = evaluation.export_attention(
        evals, workdir / "attention", cfg.estimator.M_co, cfg.estimator.M_mm
    )
    print(
        f"export-attention: {len(evals)} users -> {workdir / 'attention'} "
        f"(entropy co {summary['mean_entropy_co']:.3f}, "
        f"mm {summary['mean_entropy_mm']:.3f})"
    )
    return 0


def cmd_ablate(cfg: RunConfig, workdir: Path) -> int:
    _, users, store, tree, train_by_user, held, _ = _eval_setup(cfg, workdir)
    grid = evaluation.run_ablation(
        users, train_by_user, held, tree, store, cfg.estimator, cfg.train,
        cfg.retrieval.beam_width, cfg.retrieval.m_ret,
        n_splits=cfg.eval.n_splits, config_echo=cfg.to_dict(),
    )
    with open(workdir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(grid, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, row in grid["variants"].items():
        print(f"ablate: {name:10s} recall {row['recall_mean']:.4f} "
              f"± {row['recall_std']:.4f}")
    return 0


def cmd_pipeline(cfg: RunConfig, workdir: Path) -> int:
    for step in (cmd_gen_data, cmd_train_embed, cmd_build_tree, cmd_train):
        rc = step(cfg, workdir)
        if rc != 0:
            return rc
    rc = cmd_retrieve(cfg, workdir, None, str(workdir / "retrieved.jsonl"))
    if rc != 0:
        return rc
    return cmd_eval(cfg, workdir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtree",
        description="Tree-based multi-modal retrieval pipeline",
    )
    parser.add_argument("--config", "-c", required=True,
                        help="TOML run configuration")
    parser.add_argument("--workdir", "-w", default="runs/default",
                        help="artifact directory (default: runs/default)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    parser.add_argument("--seed", type=int, default=None,
                        help="global seed: overrides every stage seed "
                             "(data, embed, tree, train) from one value")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (default: library choice)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate corpus, logs, user table")
    sub.add_parser("train-embed", help="train content embeddings")
    sub.add_parser("build-tree", help="build the index tree")
    sub.add_parser("train", help="train the node estimator")
    p_ret = sub.add_parser("retrieve", help="beam-search retrieval to JSONL")
    p_ret.add_argument("--users", help="comma-separated user ids (default all)")
    p_ret.add_argument("--out", help="output JSONL path (default stdout)")
    sub.add_parser("eval", help="evaluate retrieval quality")
    p_att = sub.add_parser("export-attention", help="dump attention matrices")
    p_att.add_argument("--n-users", type=int, help="number of users to export")
    sub.add_parser("ablate", help="train and compare model variants")
    sub.add_parser("pipeline", help="run gen-data through eval")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        threadpool_limits(limits=args.threads)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            # one flag fans out to the per-stage seeds so a single value
            # reproduces the whole pipeline
            overrides += [
                f"data.seed={args.seed}",
                f"embed.seed={args.seed + 1}",
                f"tree.seed={args.seed + 2}",
                f"train.seed={args.seed + 3}",
            ]
        cfg = load_config(args.config, overrides)
        workdir = Path(args.workdir)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, workdir)
        if args.command == "train-embed":
            return cmd_train_embed(cfg, workdir)
        if args.command == "build-tree":
            return cmd_build_tree(cfg, workdir)
        if args.command == "train":
            return cmd_train(cfg, workdir)
        if args.command == "retrieve":
            return cmd_retrieve(cfg, workdir, args.users, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, workdir)
        if args.command == "export-attention":
            return cmd_export_attention(cfg, workdir, args.n_users)
        if args.command == "ablate":
            return cmd_ablate(cfg, workdir)
        if args.command == "pipeline":
            return cmd_pipeline(cfg, workdir)
        parser.error(f"unknown command {args.command}")
    except MMTreeError as exc:
        code = EXIT_CODES.get(type(exc), 1)
        print(f"error: {exc}", file=sys.stderr)
        return code
    return 1


if __name__ == "__main__":
    sys.exit(main())
