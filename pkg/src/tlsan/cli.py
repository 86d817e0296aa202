"""``tlsan`` command line: prep, synth, train, eval, recommend, gradcheck."""

import argparse
import logging
import os
import sys

from . import config as cfg
from .evaluate import evaluate, evaluate_popularity, rank_catalog, write_report_csv
from .ingest import build_dataset, dump_tsv, latest_context, parse_categories, parse_reviews, read_dataset
from .ingest import summarize, write_dataset
from .model import encode_batch, encode_context, load_checkpoint
from .plots import figure_path, plot_report, plot_training
from .synth import generate_synthetic
from .train import grad_check, read_metrics, train_loop

log = logging.getLogger("tlsan")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CommandError(Exception):
    pass


def _setup_logging():
    name = os.environ.get("TLSAN_LOG", "error").lower()
    level = LOG_LEVELS.get(name, logging.ERROR)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(level)


def _require(path, what):
    if not path:
        raise CommandError(f"missing --{what}")
    if not os.path.exists(path):
        raise CommandError(f"{what} file not found: {path}")
    return path


def _need(value, what):
    if not value:
        raise CommandError(f"missing --{what}")
    return value


def _resolve(args, keys):
    """Merge the optional --config file with the subcommand's flags."""
    file_values = cfg.load_config(_require(args.config, "config")) if args.config else {}
    return cfg.resolve(file_values, {k: getattr(args, k, None) for k in keys})


def _csv_ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_prep(args):
    c = _resolve(args, ["reviews", "meta", "dataset", "max_long", "data_seed"])
    with open(_require(c.reviews, "reviews"), "rb") as fh:
        reviews, skipped = parse_reviews(fh)
    with open(_require(c.meta, "meta"), "rb") as fh:
        categories = parse_categories(fh)
    ds = build_dataset(reviews, categories, max_long=c.max_long, seed=c.data_seed)
    write_dataset(_need(c.dataset, "out"), ds)
    with open(c.dataset + ".manifest.json", "w", encoding="utf-8") as fh:
        fh.write(ds.manifest.to_json() + "\n")
    if args.tsv:
        with open(args.tsv, "w", encoding="utf-8") as fh:
            dump_tsv(ds, fh)
    stats = summarize(ds)
    print(f"records read              {len(reviews)} (skipped {skipped})")
    for key, value in stats.items():
        print(f"{key:<26}{value:.2f}" if isinstance(value, float) else f"{key:<26}{value}")
    return 0


def cmd_synth(args):
    keys = ["reviews", "meta"] + list(cfg.SYNTH_KEYS)
    c = _resolve(args, keys)
    spec = c.synth_spec()
    truth = generate_synthetic(spec, _need(c.reviews, "reviews"), _need(c.meta, "meta"))
    print(f"wrote {c.reviews} and {c.meta}: {spec.n_users} users, {spec.n_items} items, "
          f"{spec.n_categories} categories, {sum(truth.drift)} drifted users")
    return 0


def _eval_fn(ds, c):
    if not ds.test:
        return None

    def run(params):
        rep = evaluate(ds, params, ks=(c.eval_k,), seed=c.eval_seed)
        return {"auc": rep.auc, "p_at_k": rep.precision[c.eval_k], "r_at_k": rep.recall[c.eval_k]}
    return run


def cmd_train(args):
    c = _resolve(args, ["dataset", "checkpoint", "metrics", "eval_seed"] + list(cfg.TRAIN_KEYS))
    ds = read_dataset(_require(c.dataset, "dataset"))
    if c.max_long != ds.manifest.max_long:
        raise CommandError(f"max_long={c.max_long} differs from the dataset's {ds.manifest.max_long}")
    tc = c.train_config()
    _, report = train_loop(ds, tc, checkpoint_path=_need(c.checkpoint, "checkpoint"),
                           metrics_path=c.metrics or None, eval_fn=_eval_fn(ds, c))
    if c.metrics:
        plot_training(read_metrics(c.metrics), figure_path(c.metrics))
    print(f"trained {report.steps} steps over {tc.epochs} epochs; final epoch loss "
          f"{report.epoch_losses[-1]:.5f}" if report.epoch_losses else "trained 0 epochs")
    if report.evals:
        last = report.evals[-1]
        print(f"test auc {last['auc']:.4f}  precision@{c.eval_k} {last['p_at_k']:.4f}  "
              f"recall@{c.eval_k} {last['r_at_k']:.4f}")
    print(f"checkpoint {c.checkpoint}")
    return 0


def cmd_eval(args):
    c = _resolve(args, ["dataset", "checkpoint", "report", "eval_ks", "eval_seed"])
    ds = read_dataset(_require(c.dataset, "dataset"))
    params = load_checkpoint(_require(c.checkpoint, "checkpoint"))
    reports = {
        "tlsan": evaluate(ds, params, ks=c.eval_ks, seed=c.eval_seed),
        "popularity": evaluate_popularity(ds, ks=c.eval_ks, seed=c.eval_seed),
    }
    for name, rep in reports.items():
        print(rep.table(name))
    write_report_csv(sys.stdout, reports)
    if c.report:
        write_report_csv(c.report, reports)
        plot_report(reports, figure_path(c.report))
    return 0


def cmd_recommend(args):
    c = _resolve(args, ["dataset", "checkpoint"])
    ds = read_dataset(_require(c.dataset, "dataset"))
    params = load_checkpoint(_require(c.checkpoint, "checkpoint"))
    index = ds.manifest.user_index()
    if args.user not in index:
        raise CommandError(f"unknown user {args.user!r}")
    history = ds.histories()[index[args.user]]
    example = latest_context(history, params.max_long)
    top = rank_catalog(example, params, ds.item_category, args.k)
    table = params.item_table(ds.item_category)
    u_t, _ = encode_context(params, encode_batch([example], ds.item_category, params.max_long))
    scores = table[top] @ u_t[0]
    for item, s in zip(top, scores):
        print(f"{ds.manifest.item_ids[item]}\t{s:.6f}")
    return 0


def cmd_gradcheck(args):
    worst = {}
    for seed in range(args.seed, args.seed + args.seeds):
        rep = grad_check(seed, d_f=args.d_f, max_long=args.max_long, heads=args.heads)
        for name, err in rep.errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        print(f"{name:<6} {err:.3e}")
    top = max(worst.values())
    ok = top < args.tol
    print(f"max relative error {top:.3e} ({'PASS' if ok else 'FAIL'} at {args.tol:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--d-f", dest="d_f", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--max-long", dest="max_long", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--l2", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--lr-initial", dest="lr_initial", type=float)
    g.add_argument("--lr-drop-fraction", dest="lr_drop_fraction", type=float)
    g.add_argument("--lr-after", dest="lr_after", type=float)
    g.add_argument("--negatives", dest="negatives_per_positive", type=int)
    g.add_argument("--loss-reduction", dest="loss_reduction", choices=("sum", "mean"))
    g.add_argument("--eval-every", dest="eval_every", type=int)
    g.add_argument("--eval-k", dest="eval_k", type=int)
    g.add_argument("--eval-seed", dest="eval_seed", type=int)
    g.add_argument("--no-short", dest="no_short", action="store_true", default=None)
    g.add_argument("--fixed-gamma", dest="fixed_gamma", action="store_true", default=None)
    g.add_argument("--fixed-position", dest="fixed_position", action="store_true", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="tlsan", description="Time-aware long/short-term attention recommender.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value file; flags override it")
        return p

    p = add("prep", "filter raw review logs into a binary dataset")
    p.add_argument("--reviews")
    p.add_argument("--meta")
    p.add_argument("--out", dest="dataset")
    p.add_argument("--max-long", dest="max_long", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--tsv", help="also dump the examples as TSV")
    p.set_defaults(func=cmd_prep)

    p = add("synth", "write a synthetic review log with planted structure")
    p.add_argument("--reviews")
    p.add_argument("--meta")
    p.add_argument("--n-users", dest="synth_n_users", type=int)
    p.add_argument("--n-items", dest="synth_n_items", type=int)
    p.add_argument("--n-categories", dest="synth_n_categories", type=int)
    p.add_argument("--days", dest="synth_days", type=int)
    p.add_argument("--strength", dest="synth_long_affinity_strength", type=float)
    p.add_argument("--drift", dest="synth_recent_drift_probability", type=float)
    p.add_argument("--seed", dest="synth_seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = add("train", "train a model; writes checkpoint, metrics CSV and loss figure")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--metrics")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add("eval", "evaluate a checkpoint against the popularity ranker")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--report", help="CSV path; a figure is written next to it")
    p.add_argument("--ks", dest="eval_ks", type=_csv_ints)
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = add("recommend", "top-K items for one user given their latest session")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--user", required=True, help="external user id")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--d-f", dest="d_f", type=int, default=4)
    p.add_argument("--max-long", dest="max_long", type=int, default=3)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, cfg.ConfigError, OSError, ValueError, KeyError, IndexError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"tlsan {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
