"""Command-line front door: data generation, training, evaluation, diagnostics.

Thread pinning has to happen before numpy first loads (BLAS reads its
environment variables once, at library load), so this module scans
`sys.argv` and sets them at import time, ahead of any numpy-importing
sibling.  The package `__init__` is deliberately lazy for the same
reason.

Subcommands and their artifacts (every artifact directory receives
`config.json` — the fully resolved configuration, persisted verbatim —
and `run.json` with seed, argv, and input digests, enough to reproduce
the run):

    gen-data        synthetic corpus under OUT/corpus/
    train           checkpoints + metrics.csv under OUT/checkpoints/
    eval            report.json + outcomes.csv under OUT/
    retrieve        top-k table on stdout (artifacts only with --out)
    link-entities   entity-selection accuracy report under OUT/
    grad-check      numerical gradient verification, prints max error

Exit status: 0 on success, 2 on configuration errors, 1 when a
requested check fails (grad-check above tolerance).
"""

from __future__ import annotations

import os
import sys


def _requested_threads(argv: list[str]) -> int | None:
    """Extract --threads from raw argv, tolerating malformed values."""
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            try:
                return int(argv[i + 1])
            except ValueError:
                return None  # argparse rejects it properly later
        if arg.startswith("--threads="):
            try:
                return int(arg.split("=", 1)[1])
            except ValueError:
                return None
    return None


_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
              "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# Commands whose hot loop is training-like default to one thread for
# reproducibility; read-only evaluation keeps the BLAS default (all
# cores).  An explicit --threads always wins, including over the
# caller's environment.
_SINGLE_THREAD_COMMANDS = ("train", "gen-data", "grad-check")


def _pin_threads(argv: list[str]) -> int | None:
    n = _requested_threads(argv)
    if n is not None and n >= 1:
        for var in _BLAS_VARS:
            os.environ[var] = str(n)
        return n
    if any(cmd in argv for cmd in _SINGLE_THREAD_COMMANDS):
        for var in _BLAS_VARS:
            os.environ.setdefault(var, "1")
    return None


_PINNED_THREADS = _pin_threads(sys.argv)

import argparse          # noqa: E402
import dataclasses       # noqa: E402
import hashlib           # noqa: E402
import json              # noqa: E402
import logging           # noqa: E402
from pathlib import Path # noqa: E402

from . import __version__                                     # noqa: E402
from .data import (                                           # noqa: E402
    CheckpointError,
    CorpusFormatError,
    load_corpus,
    load_model,
    to_eval_queries,
    to_gallery,
    to_training_set,
)
from .evaluation import (                                     # noqa: E402
    EVAL_MODES,
    EvalQuery,
    GalleryScorer,
    evaluate,
    rank_gallery,
    write_outcomes_csv,
)
from .gradcheck import check_alignment_loss, check_primitives # noqa: E402
from .model import AlignmentModel, ModelConfig                # noqa: E402
from .retrieval import FusionConfig                           # noqa: E402
from .synthetic import SyntheticSpec, generate_synthetic      # noqa: E402
from .text import encode_query                                # noqa: E402
from .training import TrainSchedule, Validation, run_schedule # noqa: E402

log = logging.getLogger("kgir.cli")


class ConfigError(ValueError):
    """Configuration that cannot be turned into a runnable experiment."""


# -- configuration ------------------------------------------------------------


def default_config() -> dict:
    """The full configuration schema with desk-scale defaults."""
    return {
        "seed": 0,
        "corpus": None,        # path to a corpus manifest.json
        "checkpoint": None,    # path to a trained .krmt file
        "split": "gallery_small",
        "mode": "full",        # full | no_knowledge | no_vision | oracle | knowledge_only
        "validate": False,     # train: evaluate on `split` per schedule.eval_every
        "model": {
            "vocab_size": None,  # resolved from the corpus vocabulary
            "d_model": 64,
            "n_joint_layers": 2,
            "n_heads": 4,
            "query_len": 12,
            "knowledge_len": 24,
            "n_regions": 8,
            "d_app": 64,
            "align_hidden": 128,
            "n_text_layers": 2,
        },
        "fusion": {
            "likelihood_weight": 0.5,
            "similarity_weight": 0.5,
            "top_k": 5,
            "normalize": True,
            "mode": "argmax",
        },
        "schedule": {
            "seed": None,  # defaults to the top-level seed
            "mlm_prob": 0.15,
            "negative_ratio": 1.0,
            "text_lr_multiplier": 0.1,
            "eval_every": 0,
            "phases": [
                {"objective": "itm_mlm", "epochs": 2, "lr": 1e-3,
                 "batch_size": 32, "mode": "no_knowledge"},
                {"objective": "mlm_only", "epochs": 1, "lr": 1e-3,
                 "batch_size": 32, "mode": "full"},
                {"objective": "itm_mlm", "epochs": 4, "lr": 5e-4,
                 "batch_size": 32, "mode": "full"},
            ],
        },
        "synthetic": dataclasses.asdict(SyntheticSpec()),
    }


def _deep_merge(base: dict, override: dict) -> dict:
    """Dicts merge recursively; everything else (lists included) replaces."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _parse_set(expr: str) -> tuple[list[str], object]:
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    if not key:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quoting
    return key.split("."), value


def _apply_set(config: dict, path: list[str], value) -> None:
    """Walk dotted keys (integers index into lists) and set the leaf."""
    node = config
    for step in path[:-1]:
        if isinstance(node, list):
            try:
                node = node[int(step)]
            except (ValueError, IndexError):
                raise ConfigError(
                    f"--set path {'.'.join(path)!r}: no list element {step!r}")
        elif isinstance(node, dict):
            if step not in node:
                raise ConfigError(
                    f"--set path {'.'.join(path)!r}: unknown key {step!r}")
            node = node[step]
        else:
            raise ConfigError(
                f"--set path {'.'.join(path)!r}: {step!r} is not nested")
    leaf = path[-1]
    if isinstance(node, list):
        try:
            node[int(leaf)] = value
        except (ValueError, IndexError):
            raise ConfigError(
                f"--set path {'.'.join(path)!r}: no list element {leaf!r}")
    elif isinstance(node, dict):
        if leaf not in node and not _inside_phase(path):
            raise ConfigError(
                f"--set path {'.'.join(path)!r}: unknown key {leaf!r}")
        node[leaf] = value
    else:
        raise ConfigError(f"--set path {'.'.join(path)!r}: not settable")


def _inside_phase(path: list[str]) -> bool:
    # Phase dicts may omit optional fields, so --set may introduce them.
    return len(path) >= 3 and path[-3] == "phases"


def resolve_config(args) -> dict:
    config = default_config()
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})")
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        unknown = set(file_cfg) - set(config)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        config = _deep_merge(config, file_cfg)
    for expr in args.set or []:
        key_path, value = _parse_set(expr)
        if key_path[0] not in config:
            raise ConfigError(f"--set: unknown top-level key {key_path[0]!r}")
        _apply_set(config, key_path, value)
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        config["mode"] = args.mode
    if config["schedule"].get("seed") is None:
        config["schedule"]["seed"] = config["seed"]
    if config["mode"] not in EVAL_MODES:
        raise ConfigError(
            f"unknown mode {config['mode']!r}; pick one of {sorted(EVAL_MODES)}")
    return config


def _build_fusion(config: dict) -> FusionConfig:
    try:
        return FusionConfig(**config["fusion"])
    except (TypeError, ValueError) as err:
        raise ConfigError(f"fusion: {err}")


def _build_schedule(config: dict) -> TrainSchedule:
    try:
        return TrainSchedule.from_dict(config["schedule"])
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"schedule: {err}")


def _build_model_config(config: dict, vocab_size: int) -> ModelConfig:
    spec = dict(config["model"])
    if spec.get("vocab_size") is None:
        spec["vocab_size"] = vocab_size
    elif spec["vocab_size"] != vocab_size:
        raise ConfigError(
            f"model.vocab_size={spec['vocab_size']} but the corpus "
            f"vocabulary holds {vocab_size} entries")
    try:
        return ModelConfig(**spec)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"model: {err}")


def _load_corpus_for(config: dict):
    manifest = config.get("corpus")
    if not manifest:
        raise ConfigError("no corpus configured (set corpus=/path/to/manifest.json)")
    manifest = Path(manifest)
    if not manifest.exists():
        raise ConfigError(f"corpus manifest not found: {manifest}")
    return load_corpus(manifest)


def _load_checkpoint_for(config: dict) -> AlignmentModel:
    path = config.get("checkpoint")
    if not path:
        raise ConfigError("no checkpoint configured (set checkpoint=/path/to/final.krmt)")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_model(path)


# -- artifacts ----------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_dir(out: Path, command: str, config: dict) -> None:
    """Persist everything needed to reproduce the run exactly."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": config["seed"],
        "threads": _PINNED_THREADS,
        "version": __version__,
    }
    for key in ("corpus", "checkpoint"):
        value = config.get(key)
        if value and Path(value).exists():
            meta[f"{key}_sha256"] = _sha256(Path(value))
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    spec_dict = dict(config["synthetic"])
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    try:
        spec = SyntheticSpec(**spec_dict)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"synthetic: {err}")
    out = Path(args.out)
    config["synthetic"] = dataclasses.asdict(spec)
    config["seed"] = spec.seed
    _write_run_dir(out, "gen-data", config)
    manifest = generate_synthetic(spec, out / "corpus")
    print(f"corpus written: {manifest}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    corpus = _load_corpus_for(config)
    model_cfg = _build_model_config(config, len(corpus.vocab))
    config["model"]["vocab_size"] = model_cfg.vocab_size
    fusion = _build_fusion(config)
    schedule = _build_schedule(config)
    out = Path(args.out)
    _write_run_dir(out, "train", config)

    model = AlignmentModel(model_cfg, seed=config["seed"])
    dataset = to_training_set(corpus, model_cfg)
    validation = None
    if config["validate"]:
        validation = Validation(
            gallery=to_gallery(corpus, model_cfg, split=config["split"]),
            queries=to_eval_queries(corpus, model_cfg, split=config["split"]),
            fusion_cfg=fusion,
            mode=config["mode"],
        )
    final, rows = run_schedule(model, dataset, schedule, out / "checkpoints",
                               fusion_cfg=fusion, validation=validation)
    last = rows[-1] if rows else {}
    loss_bits = ", ".join(f"{k}={last[k]:.4f}" for k in ("itm_loss", "mlm_loss")
                          if last.get(k) not in (None, ""))
    print(f"trained {len(rows)} epochs ({loss_bits})")
    print(f"final checkpoint: {final}")
    return 0


def _report_table(report: dict) -> str:
    lines = [
        f"  queries             {report['n_queries']}",
        f"  R@1                 {report['r1']:.4f}",
        f"  R@5                 {report['r5']:.4f}",
        f"  R@10                {report['r10']:.4f}",
        f"  median rank         {report['mdr']}",
        f"  wikification top-1  {report['wikification_top1']:.4f}",
        f"  wikification top-k  {report['wikification_topk']:.4f}",
    ]
    return "\n".join(lines)


def cmd_eval(args) -> int:
    config = resolve_config(args)
    corpus = _load_corpus_for(config)
    model = _load_checkpoint_for(config)
    if len(corpus.vocab) != model.cfg.vocab_size:
        raise ConfigError(
            f"checkpoint was trained with vocab_size={model.cfg.vocab_size}, "
            f"corpus has {len(corpus.vocab)}")
    fusion = _build_fusion(config)
    gallery = to_gallery(corpus, model.cfg, split=config["split"])
    queries = to_eval_queries(corpus, model.cfg, split=config["split"])
    out = Path(args.out)
    _write_run_dir(out, "eval", config)
    report, outcomes = evaluate(model, gallery, queries,
                                fusion_cfg=fusion, mode=config["mode"])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_outcomes_csv(outcomes, out / "outcomes.csv")
    print(f"retrieval report (mode={config['mode']}, split={config['split']})")
    print(_report_table(report))
    print(f"artifacts: {out / 'report.json'}, {out / 'outcomes.csv'}")
    return 0


def cmd_retrieve(args) -> int:
    config = resolve_config(args)
    corpus = _load_corpus_for(config)
    model = _load_checkpoint_for(config)
    fusion = _build_fusion(config)
    gallery = to_gallery(corpus, model.cfg, split=config["split"])
    k = args.k
    if k < 1:
        raise ConfigError(f"--k must be positive, got {k}")
    if k > len(gallery):
        log.warning("k=%d exceeds gallery size %d; returning the full gallery",
                    k, len(gallery))
        k = len(gallery)
    tokens = encode_query(args.query, corpus.vocab, model.cfg.query_len)
    query = EvalQuery(query_id="adhoc", tokens=tokens, gt_image_id="")
    result = rank_gallery(query, gallery, model,
                          fusion_cfg=fusion, mode=config["mode"])
    by_image = {im.image_id: im for im in gallery.images}
    print(f"top {k} of {len(gallery)} images for: {args.query!r}")
    print(f"{'rank':<6}{'image':<12}{'score':<12}entity")
    rows = []
    score_of = dict(zip([im.image_id for im in gallery.images], result.scores))
    for rank, image_id in enumerate(result.ordering[:k], start=1):
        selection = result.selections[image_id]
        entity = selection.entity_id if selection and selection.entity_id else "-"
        print(f"{rank:<6}{image_id:<12}{score_of[image_id]:<12.5f}{entity}")
        rows.append({"rank": rank, "image_id": image_id,
                     "score": score_of[image_id], "entity_id": entity,
                     "gt_entity_id": by_image[image_id].gt_entity_id})
    if args.out:
        out = Path(args.out)
        _write_run_dir(out, "retrieve", config)
        (out / "retrieval.json").write_text(
            json.dumps({"query": args.query, "k": k, "results": rows},
                       indent=2, sort_keys=True) + "\n")
    return 0


def cmd_link_entities(args) -> int:
    config = resolve_config(args)
    corpus = _load_corpus_for(config)
    model = _load_checkpoint_for(config)
    fusion = _build_fusion(config)
    gallery = to_gallery(corpus, model.cfg, split=config["split"])
    queries = to_eval_queries(corpus, model.cfg, split=config["split"])
    out = Path(args.out)
    _write_run_dir(out, "link-entities", config)

    scorer = GalleryScorer(model, gallery, fusion)
    index_of = {im.image_id: i for i, im in enumerate(gallery.images)}
    fused_hits, baseline_hits, covered = 0, 0, 0
    judged = 0
    rows = []
    for query in queries:
        image = gallery.images[index_of[query.gt_image_id]]
        if image.gt_entity_id is None:
            continue
        judged += 1
        selections, _, _ = scorer.select_for_images(query.tokens, config["mode"])
        chosen = selections[index_of[query.gt_image_id]]
        likelihood_top = image.candidates.entity_ids()[0]
        gt = image.gt_entity_id
        fused_hits += chosen.entity_id == gt
        baseline_hits += likelihood_top == gt
        covered += gt in image.candidates.entity_ids()
        rows.append({"query_id": query.query_id, "image_id": image.image_id,
                     "gt_entity_id": gt, "fused": chosen.entity_id,
                     "likelihood_only": likelihood_top})
    if judged == 0:
        raise ConfigError("no queries with entity ground truth in this split")
    report = {
        "n_queries": judged,
        "fused_top1": fused_hits / judged,
        "likelihood_only_top1": baseline_hits / judged,
        "candidate_coverage": covered / judged,
        "mode": config["mode"],
    }
    (out / "linking.json").write_text(
        json.dumps({"report": report, "decisions": rows},
                   indent=2, sort_keys=True) + "\n")
    print(f"entity linking on {judged} queries (mode={config['mode']})")
    print(f"  fused selection top-1       {report['fused_top1']:.4f}")
    print(f"  likelihood-only top-1       {report['likelihood_only_top1']:.4f}")
    print(f"  ground truth in candidates  {report['candidate_coverage']:.4f}")
    print(f"artifacts: {out / 'linking.json'}")
    return 0


def cmd_grad_check(args) -> int:
    config = resolve_config(args)
    reports = check_primitives(seed=config["seed"])
    full = check_alignment_loss(seed=config["seed"])
    worst_primitive = max(r.max_rel_err for r in reports.values())
    worst = max(worst_primitive, full.max_rel_err)
    print(f"primitive ops checked: {len(reports)}")
    print(f"  worst primitive rel. error  {worst_primitive:.3e}")
    print(f"  full loss rel. error        {full.max_rel_err:.3e}")
    print(f"max rel. error: {worst:.3e} (tolerance {args.tol:.0e})")
    ok = worst < args.tol
    print("PASS" if ok else "FAIL")
    if args.out:
        out = Path(args.out)
        _write_run_dir(out, "grad-check", config)
        payload = {
            "tolerance": args.tol,
            "max_rel_err": worst,
            "full_loss": full.max_rel_err,
            "per_op": {name: r.max_rel_err for name, r in reports.items()},
            "passed": ok,
        }
        (out / "gradcheck.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file merged over built-in defaults")
    common.add_argument("--set", metavar="K=V", action="append",
                        help="override one config value; dotted keys reach into "
                             "nested sections (repeatable), e.g. model.d_model=32")
    common.add_argument("--seed", type=int, metavar="N",
                        help="master RNG seed (overrides config)")
    common.add_argument("--threads", type=int, metavar="N",
                        help="BLAS thread cap (default: 1 for train-like "
                             "commands, all cores for evaluation)")

    out_req = argparse.ArgumentParser(add_help=False)
    out_req.add_argument("--out", metavar="DIR", required=True,
                         help="artifact directory (created if missing)")
    out_opt = argparse.ArgumentParser(add_help=False)
    out_opt.add_argument("--out", metavar="DIR",
                         help="optional artifact directory")

    parser = argparse.ArgumentParser(
        prog="kgir",
        description="knowledge-grounded image retrieval experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common, out_req],
                       help="generate a synthetic corpus")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common, out_req],
                       help="run the training schedule on a corpus")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, out_req],
                       help="score a checkpoint on a gallery split")
    p.add_argument("--mode", choices=sorted(EVAL_MODES),
                   help="ablation mode (default: config value)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", parents=[common, out_opt],
                       help="rank the gallery for one ad-hoc query")
    p.add_argument("--query", required=True, metavar="TEXT",
                   help="free-text query")
    p.add_argument("--k", type=int, default=10, metavar="N",
                   help="table size (clamped to the gallery)")
    p.add_argument("--mode", choices=sorted(EVAL_MODES),
                   help="ablation mode (default: config value)")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("link-entities", parents=[common, out_req],
                       help="report entity-selection accuracy against the "
                            "likelihood-only baseline")
    p.add_argument("--mode", choices=sorted(EVAL_MODES),
                   help="ablation mode (default: config value)")
    p.set_defaults(func=cmd_link_entities)

    p = sub.add_parser("grad-check", parents=[common, out_opt],
                       help="verify analytic gradients against finite differences")
    p.add_argument("--tol", type=float, default=1e-4, metavar="X",
                   help="maximum acceptable relative error (default 1e-4)")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusFormatError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
