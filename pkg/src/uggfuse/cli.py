"""Command-line surface binding the modules into reproducible runs.

Every run resolves defaults, an optional flat config file, and --key value
overrides into one mapping, logs that mapping with its 64-bit hash, and
stamps the hash into every artifact it writes (CSV comment line, JSON field,
checkpoint config block, resolved.cfg next to feature files). Runs with
equal resolved configs produce byte-identical outputs.

Exit codes: 0 success, 1 check or training failure, 2 usage/config error,
3 I/O error. One process owns one output directory via a .lock file.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import os
import sys

from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint, write_history_csv
from .dataio import (SPLITS, generate, inject_noise, per_dim_std, read_features,
                     split_instances, write_features, write_manifest)
from .errors import (ConfigError, ContractViolationError, DomainError,
                     MissingCheckpointError, NonFiniteLossError)
from .evalkit import (ablation_run, ablation_table, evaluate, noise_sweep,
                      write_report_json, write_rows_csv)
from .objective import fit, variant_grad_reports


@contextlib.contextmanager
def _own_dir(out):
    """Exclusive ownership of an output directory for the whole run."""
    os.makedirs(out, exist_ok=True)
    fh = open(os.path.join(out, ".lock"), "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except OSError:
        fh.close()
        raise OSError(f"output directory {out} is locked by another process") from None
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _log_config(cfg: dict) -> str:
    h = cfgmod.config_hash(cfg)
    print(f"resolved config hash {h}")
    for line in cfgmod.canonical_text(cfg).rstrip("\n").split("\n"):
        print(f"  {line}")
    return h


def _write_resolved(cfg: dict, h: str, out) -> None:
    with open(os.path.join(out, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={h}\n" + cfgmod.canonical_text(cfg))


def _load_split(data_dir, split):
    path = os.path.join(data_dir, f"{split}.uggf")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing data file {path}")
    return read_features(path)


def _print_checks(checks) -> int:
    """checks: (name, passed, detail) triples. Returns the exit code."""
    failed = False
    for name, ok, detail in checks:
        print(f"check {name}: {'pass' if ok else 'FAIL'} ({detail})")
        failed = failed or not ok
    return 1 if failed else 0


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    h = _log_config(cfg)
    spec = cfgmod.synthetic_spec(cfg)
    with _own_dir(args.out):
        splits = split_instances(generate(spec))
        for ds in splits:
            write_features(ds, os.path.join(args.out, f"{ds.split}.uggf"))
        write_manifest(splits, os.path.join(args.out, "manifest.csv"),
                       comment=f"config_hash={h}")
        _write_resolved(cfg, h, args.out)
    sizes = ", ".join(f"{ds.split}={ds.num_samples}" for ds in splits)
    print(f"wrote {len(SPLITS)} splits to {args.out} ({sizes})")
    return 0


def cmd_train(args, cfg) -> int:
    h = _log_config(cfg)
    tcfg = cfgmod.train_config(cfg)
    dataset = _load_split(args.data, "train")
    resume = load_checkpoint(args.resume) if args.resume else None
    with _own_dir(args.out):
        ck = fit(tcfg, dataset, resume=resume)
        ck.config["config_hash"] = h
        save_checkpoint(ck, os.path.join(args.out, "model.uggc"))
        write_history_csv(ck.history, os.path.join(args.out, "loss.csv"),
                          comment=f"config_hash={h}")
        _write_resolved(cfg, h, args.out)
    final = float(ck.history[-1, -1]) if len(ck.history) else float("nan")
    print(f"trained variant {tcfg.variant} for {ck.epoch} epochs, "
          f"final loss {final:.6f}; checkpoint in {args.out}")
    return 0


def _noisy_test_splits(args, cfg):
    query = _load_split(args.data, "query")
    gallery = _load_split(args.data, "gallery")
    eps = float(cfg["noise.eps"])
    if eps > 0:
        # noise scale is pinned to the clean train split, like the sweep
        ref = per_dim_std(_load_split(args.data, "train"))
        spec = cfgmod.noise_spec(cfg)
        query = inject_noise(query, spec, ref_std=ref)
        gallery = inject_noise(gallery, spec, ref_std=ref)
    return query, gallery, eps


def cmd_eval(args, cfg) -> int:
    h = _log_config(cfg)
    ck = load_checkpoint(args.checkpoint)
    model = ck.build_model()
    query, gallery, eps = _noisy_test_splits(args, cfg)
    with _own_dir(args.out):
        rep = evaluate(model.embed(query.tokens), model.embed(gallery.tokens),
                       query.labels, gallery.labels,
                       query_ids=query.sample_ids, gallery_ids=gallery.sample_ids,
                       metric=cfg["eval.metric"])
        row = {"epsilon": eps, "metric": cfg["eval.metric"],
               "num_query": query.num_samples, "num_gallery": gallery.num_samples}
        row.update(rep.summary())
        write_rows_csv([row], os.path.join(args.out, "metrics.csv"),
                       comment=f"config_hash={h}")
        write_report_json(os.path.join(args.out, "metrics.json"),
                          run_id=f"eval-{h}", config_hash=h, rows=[row])
        _write_resolved(cfg, h, args.out)
    print(f"mAP {rep.map:.4f}  rank1 {rep.rank(1):.4f}  rank5 {rep.rank(5):.4f}  "
          f"rank10 {rep.rank(10):.4f}  invalid queries {rep.invalid_queries}")
    return 0


def _load_checkpoint_grid(ckpt_dir, variants, seeds) -> dict:
    grid: dict = {}
    for v in variants:
        grid[v] = {}
        for s in seeds:
            path = os.path.join(ckpt_dir, f"model-{v}-seed{s}.uggc")
            if not os.path.exists(path):
                raise MissingCheckpointError(
                    f"no checkpoint for variant {v!r} seed {s} at {path}")
            grid[v][s] = load_checkpoint(path)
    return grid


def cmd_sweep(args, cfg) -> int:
    h = _log_config(cfg)
    eps_list = cfgmod.float_list(cfg, "sweep.eps")
    seeds = cfgmod.int_list(cfg, "sweep.seeds")
    variants = [v.strip() for v in cfg["sweep.variants"].split(",") if v.strip()]
    if not eps_list or not seeds or not variants:
        raise ConfigError("sweep needs nonempty sweep.eps, sweep.seeds, sweep.variants")
    grid = _load_checkpoint_grid(args.ckpt_dir, variants, seeds)
    train = _load_split(args.data, "train")
    query = _load_split(args.data, "query")
    gallery = _load_split(args.data, "gallery")
    spec = cfgmod.noise_spec(cfg)
    with _own_dir(args.out):
        report = noise_sweep(grid, train, query, gallery, eps_list, seeds,
                             kind=spec.kind, modalities=spec.modalities,
                             metric=cfg["eval.metric"], variants=variants)
        summary = report.aggregate()
        write_rows_csv(report.rows, os.path.join(args.out, "sweep.csv"),
                       comment=f"config_hash={h}")
        write_rows_csv(summary, os.path.join(args.out, "sweep-summary.csv"),
                       comment=f"config_hash={h}")
        write_report_json(os.path.join(args.out, "sweep.json"),
                          run_id=f"sweep-{h}", config_hash=h, rows=report.rows,
                          extra={"summary": summary})
        _write_resolved(cfg, h, args.out)
    print(f"swept {len(report.rows)} cells "
          f"({len(eps_list)} intensities x {len(variants)} variants x {len(seeds)} seeds)")
    if not args.check:
        return 0
    lo, hi = min(eps_list), max(eps_list)
    checks = []
    for v in variants:
        drop = report.mean_map(v, lo) - report.mean_map(v, hi)
        checks.append((f"degrades[{v}]", drop >= 0,
                       f"mean mAP drop {drop:+.4f} from eps={lo:g} to {hi:g}"))
    if "b" in variants and "e" in variants:
        drop_b = report.mean_map("b", lo) - report.mean_map("b", hi)
        drop_e = report.mean_map("e", lo) - report.mean_map("e", hi)
        checks.append(("full-model-degrades-least", drop_e <= drop_b,
                       f"drop e {drop_e:.4f} vs b {drop_b:.4f}"))
    return _print_checks(checks)


def cmd_ablate(args, cfg) -> int:
    h = _log_config(cfg)
    seeds = cfgmod.int_list(cfg, "sweep.seeds")
    variants = [v.strip() for v in cfg["sweep.variants"].split(",") if v.strip()]
    if not seeds or not variants:
        raise ConfigError("ablate needs nonempty sweep.seeds and sweep.variants")
    base = cfgmod.train_config(cfg)
    train = _load_split(args.data, "train")
    query = _load_split(args.data, "query")
    gallery = _load_split(args.data, "gallery")
    with _own_dir(args.out):
        rows, checkpoints = ablation_run(base, train, query, gallery,
                                         seeds=seeds, variants=variants,
                                         metric=cfg["eval.metric"])
        for v, per_seed in checkpoints.items():
            for s, ck in per_seed.items():
                ck.config["config_hash"] = h
                save_checkpoint(ck, os.path.join(args.out, f"model-{v}-seed{s}.uggc"))
        table = ablation_table(rows)
        write_rows_csv(rows, os.path.join(args.out, "ablation.csv"),
                       comment=f"config_hash={h}")
        write_rows_csv(table, os.path.join(args.out, "ablation-summary.csv"),
                       comment=f"config_hash={h}")
        write_report_json(os.path.join(args.out, "ablation.json"),
                          run_id=f"ablate-{h}", config_hash=h, rows=rows,
                          extra={"summary": table})
        _write_resolved(cfg, h, args.out)
    means = {t["variant"]: t["mAP_mean"] for t in table}
    print("mean mAP " + "  ".join(f"{v}={means[v]:.4f}" for v in variants))
    if not args.check:
        return 0
    checks = []
    if "a" in means and "e" in means:
        checks.append(("full-beats-baseline", means["e"] >= means["a"],
                       f"mean mAP e {means['e']:.4f} vs a {means['a']:.4f}"))
    return _print_checks(checks)


def cmd_gradcheck(args, cfg) -> int:
    _log_config(cfg)
    variant = cfg["train.variant"]
    reports = variant_grad_reports(variant, seed=cfg["seed"])
    print(f"gradient check, variant {variant}, {len(reports)} parameter groups:")
    failed = 0
    for rep in reports:
        print(f"  {rep.line()}")
        failed += 0 if rep.passed else 1
    if failed:
        print(f"{failed} parameter group(s) FAILED")
        return 1
    print("all parameter groups pass")
    return 0


# -- argument parsing ------------------------------------------------------------


def _parse_overrides(tokens) -> dict:
    """--key value / --key=value pairs against the config registry."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(
                f"unexpected argument {tok!r} (overrides look like --key value)")
        key, sep, value = tok[2:].partition("=")
        if not sep:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override --{key} is missing a value")
            value = tokens[i + 1]
            i += 1
        i += 1
        if key not in cfgmod.REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uggfuse", allow_abbrev=False,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=__doc__, epilog=cfgmod.help_epilog())
    sub = parser.add_subparsers(dest="command")

    def add(name, help_, func, **flags):
        p = sub.add_parser(name, help=help_, allow_abbrev=False,
                           formatter_class=argparse.RawDescriptionHelpFormatter,
                           epilog=cfgmod.help_epilog())
        p.add_argument("--config", help="flat key = value config file")
        for flag, (required, text) in flags.items():
            if flag == "check":
                p.add_argument("--check", action="store_true", help=text)
            else:
                p.add_argument(f"--{flag}", required=required, help=text)
        p.set_defaults(func=func)
        return p

    add("synth", "generate a synthetic dataset (train/query/gallery + manifest)",
        cmd_synth, out=(True, "output directory"))
    add("train", "train one model on a synthesized dataset", cmd_train,
        data=(True, "dataset directory from synth"),
        out=(True, "output directory for model.uggc and loss.csv"),
        resume=(False, "checkpoint to continue training from"))
    add("eval", "retrieval metrics for a trained checkpoint", cmd_eval,
        checkpoint=(True, "model.uggc to evaluate"),
        data=(True, "dataset directory from synth"),
        out=(True, "output directory for metrics.json/csv"))
    add("sweep", "noise-robustness grid over trained variants", cmd_sweep,
        **{"ckpt-dir": (True, "directory of model-<variant>-seed<seed>.uggc files "
                              "as written by ablate")},
        data=(True, "dataset directory from synth"),
        out=(True, "output directory for sweep reports"),
        check=(False, "verify degradation direction; exit 1 on failure"))
    add("gradcheck", "finite-difference check on a 4-identity micro-batch",
        cmd_gradcheck)
    add("ablate", "train and evaluate the variant ladder", cmd_ablate,
        data=(True, "dataset directory from synth"),
        out=(True, "output directory for checkpoints and the ablation table"),
        check=(False, "verify full model beats baseline; exit 1 on failure"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:  # argparse prints its own message (--help or usage)
        return int(exc.code or 0)
    if getattr(args, "command", None) is None or not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        overrides = _parse_overrides(rest)
        file_values = cfgmod.parse_config_file(args.config) if args.config else None
        cfg = cfgmod.resolve(file_values, overrides)
        return args.func(args, cfg)
    except NonFiniteLossError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, ContractViolationError, DomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
