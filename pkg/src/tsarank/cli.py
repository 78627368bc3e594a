"""Command-line entry point: reproducible experiments over the whole pipeline.

    tsarank <synth|cpt|sft|mine|rank|eval|ablate|sweep> --config cfg.json \
        [--seed N] [--out DIR] [--data DIR] [--set section.key=value ...]

Flags beat the config file, which beats built-in defaults. Every command
writes its artifacts plus a JSON-Lines log into --out, embeds the config
hash and seed in reports, and is idempotent: re-running with the same
inputs and seed overwrites with byte-identical files. Errors exit nonzero
after printing a one-line machine-readable record to stderr.
`TSARANK_LOG` selects log verbosity (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import evaluation as evalmod
from . import reports as repmod
from . import scoring
from . import training
from .model import load_checkpoint, new_model, save_checkpoint
from .tokenizer import detokenize

log = logging.getLogger(__name__)

DATA_FILES = {
    "corpus": "corpus.jsonl",
    "weak_pairs": "weak_pairs.jsonl",
    "train_queries": "train_queries.jsonl",
    "train_qrels": "train_qrels.tsv",
    "eval_queries": "eval_queries.jsonl",
    "eval_qrels": "eval_qrels.tsv",
    "examples": "examples.jsonl",
}


class MissingPrerequisiteError(FileNotFoundError):
    """A command's input artifact does not exist yet."""


def _data_path(data_dir: str, name: str) -> str:
    path = os.path.join(data_dir, DATA_FILES[name])
    if not os.path.exists(path):
        raise MissingPrerequisiteError(f"required input {path} not found; run the producing command first")
    return path


def _ensure_out(out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _write_log(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _report_metadata(cfg: dict, stage: str, extra: dict | None = None) -> dict:
    meta = {"model_stage": stage, "seed": cfg["seed"], "config_hash": cfgmod.config_hash(cfg)}
    if extra:
        meta.update(extra)
    return meta


# ----------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    params = cfgmod.synth_params(cfg)
    dataset = datamod.synth_corpus(params, cfgmod.substream_seed(cfg["seed"], "synth"))

    datamod.write_corpus(dataset.corpus, os.path.join(out, DATA_FILES["corpus"]))
    datamod.write_weak_pairs(dataset.weak_pairs, os.path.join(out, DATA_FILES["weak_pairs"]))
    datamod.write_queries(dataset.train_queries, os.path.join(out, DATA_FILES["train_queries"]))
    datamod.write_qrels(dataset.train_qrels, os.path.join(out, DATA_FILES["train_qrels"]))
    datamod.write_queries(dataset.eval_queries, os.path.join(out, DATA_FILES["eval_queries"]))
    datamod.write_qrels(dataset.eval_qrels, os.path.join(out, DATA_FILES["eval_qrels"]))

    examples = _mine_examples(
        dataset.corpus,
        dataset.train_queries,
        dataset.train_qrels,
        top_k=int(cfg["mining"]["top_k"]),
        m=cfgmod.hyperparams(cfg).num_negatives,
        seed=cfgmod.substream_seed(cfg["seed"], "sampling"),
    )
    datamod.write_examples(examples, os.path.join(out, DATA_FILES["examples"]))

    files = {name: os.path.join(out, fname) for name, fname in DATA_FILES.items()}
    fingerprint = datamod.dataset_fingerprint(files)
    manifest = {
        "fingerprint": fingerprint,
        "files": {name: datamod.file_fingerprint(path) for name, path in files.items()},
        "seed": cfg["seed"],
        "config_hash": cfgmod.config_hash(cfg),
        "counts": {
            "documents": len(dataset.corpus),
            "weak_pairs": len(dataset.weak_pairs),
            "train_queries": len(dataset.train_queries),
            "eval_queries": len(dataset.eval_queries),
            "examples": len(examples),
        },
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_log(os.path.join(out, "synth_log.jsonl"), [{"command": "synth", **manifest["counts"]}])
    print(f"dataset fingerprint: {fingerprint}")
    return 0


def _mine_examples(corpus, queries, qrels, top_k: int, m: int, seed: int) -> list[datamod.RankExample]:
    index = datamod.InvertedIndex(corpus)
    positives: dict[str, list[str]] = {}
    for (query_id, doc_id), grade in qrels.items():
        if grade > 0:
            positives.setdefault(query_id, []).append(doc_id)
    candidates = {
        query_id: datamod.mine_negatives(index, text, set(positives.get(query_id, ())), top_k)
        for query_id, text in queries.items()
    }
    return datamod.sample_examples(queries, positives, candidates, corpus, m, seed)


def cmd_mine(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    corpus = datamod.load_corpus(_data_path(args.data, "corpus"))
    queries = datamod.load_queries(_data_path(args.data, "train_queries"))
    qrels = datamod.read_qrels(_data_path(args.data, "train_qrels"))
    examples = _mine_examples(
        corpus,
        queries,
        qrels,
        top_k=int(cfg["mining"]["top_k"]),
        m=cfgmod.hyperparams(cfg).num_negatives,
        seed=cfgmod.substream_seed(cfg["seed"], "sampling"),
    )
    path = os.path.join(out, DATA_FILES["examples"])
    datamod.write_examples(examples, path)
    _write_log(os.path.join(out, "mine_log.jsonl"), [{"command": "mine", "examples": len(examples)}])
    print(f"wrote {len(examples)} ranking examples to {path}")
    return 0


def cmd_cpt(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    rejects: list[dict] = []
    pairs = datamod.load_weak_pairs(
        _data_path(args.data, "weak_pairs"),
        on_reject=lambda lineno, reason: rejects.append({"line": lineno, "reason": reason}),
    )
    if args.init:
        base = load_checkpoint(args.init, expected_config=cfgmod.model_config(cfg))
        created_base = False
    else:
        base = new_model(cfgmod.model_config(cfg), cfgmod.substream_seed(cfg["seed"], "init"))
        created_base = True
    stage_cfg = cfgmod.stage_config(cfg, "cpt")
    model, records = run_cpt_logged(base, pairs, stage_cfg)
    if created_base:
        save_checkpoint(base, os.path.join(out, "base.ckpt"))
    save_checkpoint(model, os.path.join(out, "cpt.ckpt"))
    header = [{"command": "cpt", "pairs": len(pairs), "rejected_lines": rejects}]
    _write_log(os.path.join(out, "cpt_log.jsonl"), header + records)
    print(f"continual pre-training done: {len(pairs)} pairs, final loss {records[-1]['loss']:.4f}")
    return 0


def run_cpt_logged(base, pairs, stage_cfg):
    return training.run_cpt(base, pairs, stage_cfg, data_fingerprint=datamod.pairs_fingerprint(pairs))


def cmd_sft(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    corpus = datamod.load_corpus(_data_path(args.data, "corpus"))
    examples = datamod.load_examples(_data_path(args.data, "examples"), corpus)
    if not os.path.exists(args.checkpoint):
        raise MissingPrerequisiteError(f"checkpoint {args.checkpoint} not found; run `tsarank cpt` first")
    start = load_checkpoint(args.checkpoint, expected_config=cfgmod.model_config(cfg))
    stage_cfg = cfgmod.stage_config(cfg, "sft")
    model, records = training.run_sft(
        start, examples, stage_cfg, data_fingerprint=datamod.examples_fingerprint(examples)
    )
    save_checkpoint(model, os.path.join(out, "sft.ckpt"))
    _write_log(os.path.join(out, "sft_log.jsonl"), [{"command": "sft", "examples": len(examples)}] + records)
    print(f"fine-tuning done: {len(examples)} examples, final loss {records[-1]['loss']:.4f}")
    return 0


def cmd_rank(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    corpus = datamod.load_corpus(_data_path(args.data, "corpus"))
    queries = datamod.load_queries(_data_path(args.data, f"{args.split}_queries"))
    if not os.path.exists(args.checkpoint):
        raise MissingPrerequisiteError(f"checkpoint {args.checkpoint} not found")
    model = load_checkpoint(args.checkpoint, expected_config=cfgmod.model_config(cfg))
    index = datamod.InvertedIndex(corpus)
    num_candidates = int(cfg["eval"]["candidates"])
    run: list[scoring.RankedList] = []
    for query_id, text in queries.items():
        candidate_ids = evalmod.build_candidates(index, text, num_candidates)
        run.append(scoring.rank(model, text, [(doc_id, corpus[doc_id]) for doc_id in candidate_ids], query_id=query_id))
    run_path = os.path.join(out, "run.tsv")
    scoring.write_run_file(run, run_path)
    _write_log(
        os.path.join(out, "rank_log.jsonl"),
        [{"command": "rank", "queries": len(run), "candidates": num_candidates, "stage": model.stage}],
    )
    print(f"wrote run file for {len(run)} queries to {run_path}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    if not os.path.exists(args.run):
        raise MissingPrerequisiteError(f"run file {args.run} not found; run `tsarank rank` first")
    run = scoring.read_run_file(args.run)
    queries = datamod.load_queries(_data_path(args.data, "eval_queries"))
    qrels = evalmod.Qrels.from_file(_data_path(args.data, "eval_qrels"))
    k = int(cfg["eval"]["k"])
    _, per_query = evalmod.ndcg_for_run(run, qrels, k, known_query_ids=queries)

    extras: dict = {}
    stage = "external"
    ppl_rows = None
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, expected_config=cfgmod.model_config(cfg))
        stage = model.stage
        corpus = datamod.load_corpus(_data_path(args.data, "corpus"))
        extras.update(_model_analysis(cfg, model, corpus, queries, qrels))
        ppl_rows = [evalmod.PplRow(label=stage, stage=stage, ppl_pos=extras["ppl_pos"], ppl_neg=extras["ppl_neg"])]

    report = repmod.MetricsReport.build(
        k=k,
        per_query_ndcg=per_query,
        metadata=_report_metadata(cfg, stage, {"run_file": os.path.basename(args.run)}),
        **extras,
    )
    report.save(os.path.join(out, "metrics.json"))
    repmod.write_per_query_tsv(report, os.path.join(out, "metrics.tsv"))
    repmod.render_ndcg_histogram(report, os.path.join(out, "ndcg_per_query.png"))
    if ppl_rows:
        repmod.render_ppl_bars(ppl_rows, os.path.join(out, "ppl_bars.png"))
    _write_log(
        os.path.join(out, "eval_log.jsonl"),
        [{"command": "eval", "queries": len(per_query), "mean_ndcg": report.mean_ndcg}],
    )
    print(report.table())
    return 0


def _model_analysis(cfg, model, corpus, queries, qrels: evalmod.Qrels) -> dict:
    """Perplexity and generated-query token statistics for one checkpoint."""
    index = datamod.InvertedIndex(corpus)
    limit_ppl = int(cfg["eval"]["ppl_pairs"])
    pos_pairs: list[tuple[str, str]] = []
    neg_pairs: list[tuple[str, str]] = []
    gen_docs: list[str] = []
    for query_id, text in queries.items():
        judged = qrels.judged(query_id)
        positive_ids = [d for d, g in judged.items() if g > 0]
        if not positive_ids:
            continue
        positive_id = positive_ids[0]
        if len(pos_pairs) < limit_ppl:
            pos_pairs.append((text, corpus[positive_id]))
            hard = [d for d in evalmod.build_candidates(index, text, 5) if d not in set(positive_ids)]
            neg_doc = hard[0] if hard else next(iter(corpus))
            neg_pairs.append((text, corpus[neg_doc]))
        if len(gen_docs) < int(cfg["eval"]["generate_queries"]):
            gen_docs.append(corpus[positive_id])
    rows = evalmod.ppl_report([(model.stage, model)], pos_pairs, neg_pairs)
    generated = [
        evalmod.greedy_generate(model, doc, int(cfg["eval"]["generate_len"])) for doc in gen_docs
    ]
    stats = evalmod.token_stats([detokenize(g, errors="replace") for g in generated], gen_docs, evalmod.load_stopwords())
    return {
        "ppl_pos": rows[0].ppl_pos,
        "ppl_neg": rows[0].ppl_neg,
        "doc_word_proportion": stats.doc_word_proportion,
        "stop_word_proportion": stats.stop_word_proportion,
        "skipped_empty_queries": stats.skipped_empty,
    }


def cmd_ablate(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    corpus = datamod.load_corpus(_data_path(args.data, "corpus"))
    pairs = datamod.load_weak_pairs(_data_path(args.data, "weak_pairs"))
    examples = datamod.load_examples(_data_path(args.data, "examples"), corpus)
    eval_queries = datamod.load_queries(_data_path(args.data, "eval_queries"))
    eval_qrels = datamod.read_qrels(_data_path(args.data, "eval_qrels"))
    base = new_model(cfgmod.model_config(cfg), cfgmod.substream_seed(cfg["seed"], "init"))
    runs = training.ablation_suite(
        base,
        pairs,
        examples,
        corpus,
        eval_queries,
        eval_qrels,
        cpt_cfg=cfgmod.stage_config(cfg, "cpt"),
        sft_cfg=cfgmod.stage_config(cfg, "sft"),
        k=int(cfg["eval"]["k"]),
        num_candidates=int(cfg["eval"]["candidates"]),
    )
    payload = {}
    meta = _report_metadata(cfg, "ablation")
    for name in training.ABLATION_CONFIGS:
        run = runs[name]
        payload[name] = {"mean_ndcg": run.mean_ndcg, "per_query_ndcg": run.per_query_ndcg}
        _write_log(os.path.join(out, f"ablation_log_{name.strip('-').replace('-', '_')}.jsonl"), run.sft_log)
    with open(os.path.join(out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump({"metadata": meta, "configs": payload}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out, "ablation.tsv"), "w", encoding="utf-8") as fh:
        fh.write("config\tmean_ndcg\n")
        for name in training.ABLATION_CONFIGS:
            fh.write(f"{name}\t{runs[name].mean_ndcg:.17g}\n")
    repmod.render_ablation_bars(
        list(training.ABLATION_CONFIGS),
        [runs[name].mean_ndcg for name in training.ABLATION_CONFIGS],
        os.path.join(out, "ablation.png"),
    )
    _write_log(
        os.path.join(out, "ablate_log.jsonl"),
        [{"command": "ablate", "configs": {name: runs[name].mean_ndcg for name in training.ABLATION_CONFIGS}}],
    )
    for name in training.ABLATION_CONFIGS:
        print(f"{name:>10}  NDCG@{cfg['eval']['k']} = {runs[name].mean_ndcg:.4f}")
    return 0


def cmd_sweep(cfg: dict, args) -> int:
    out = _ensure_out(args.out)
    param = args.param
    values = cfg["sweep"].get(param, [])
    if not values:
        raise cfgmod.ConfigError(f"sweep.{param} is empty; declare the values to sweep in the config")
    corpus = datamod.load_corpus(_data_path(args.data, "corpus"))
    pairs = datamod.load_weak_pairs(_data_path(args.data, "weak_pairs"))
    eval_queries = datamod.load_queries(_data_path(args.data, "eval_queries"))
    eval_qrels = datamod.read_qrels(_data_path(args.data, "eval_qrels"))
    train_queries = datamod.load_queries(_data_path(args.data, "train_queries"))
    train_qrels = datamod.read_qrels(_data_path(args.data, "train_qrels"))
    index = datamod.InvertedIndex(corpus)
    k = int(cfg["eval"]["k"])
    num_candidates = int(cfg["eval"]["candidates"])

    base = new_model(cfgmod.model_config(cfg), cfgmod.substream_seed(cfg["seed"], "init"))
    cpt_cfg = cfgmod.stage_config(cfg, "cpt")
    sft_cfg_base = cfg["sft"]
    # Branches differ only in the swept parameter, so the pre-training stage
    # is shared whenever the weak-pair set is unchanged.
    shared_cpt = None
    if param != "cpt_fraction":
        shared_cpt, _ = training.run_cpt(base, pairs, cpt_cfg)

    default_examples = None
    if param in ("alpha", "cpt_fraction"):
        default_examples = datamod.load_examples(_data_path(args.data, "examples"), corpus)

    summary: list[tuple[object, float]] = []
    for value in values:
        branch_dir = _ensure_out(os.path.join(out, f"{param}_{value}"))
        branch_sft = json.loads(json.dumps(sft_cfg_base))
        branch_examples = default_examples
        cpt_model = shared_cpt
        if param == "alpha":
            branch_sft["hyperparams"]["alpha"] = value
        elif param == "m":
            branch_sft["hyperparams"]["m"] = value
            branch_examples = _mine_examples(
                corpus,
                train_queries,
                train_qrels,
                top_k=int(cfg["mining"]["top_k"]),
                m=int(value),
                seed=cfgmod.substream_seed(cfg["seed"], "sampling"),
            )
        elif param == "cpt_fraction":
            count = max(1, int(round(float(value) * len(pairs))))
            cpt_model, _ = training.run_cpt(base, pairs[:count], cpt_cfg)
        sft_model, _ = training.run_sft(cpt_model, branch_examples, cfgmod.stage_config(dict(cfg, sft=branch_sft), "sft"))
        _, per_query, _ = evalmod.evaluate_ranking(
            sft_model, index, corpus, eval_queries, eval_qrels, k, num_candidates
        )
        report = repmod.MetricsReport.build(
            k=k,
            per_query_ndcg=per_query,
            metadata=_report_metadata(cfg, "sft", {"sweep_param": param, "sweep_value": value}),
        )
        report.save(os.path.join(branch_dir, "metrics.json"))
        repmod.write_per_query_tsv(report, os.path.join(branch_dir, "metrics.tsv"))
        summary.append((value, report.mean_ndcg))
        print(f"{param} = {value}: NDCG@{k} = {report.mean_ndcg:.4f}")

    with open(os.path.join(out, "summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"{param}\tmean_ndcg\n")
        for value, mean in summary:
            fh.write(f"{value}\t{mean:.17g}\n")
    repmod.render_sweep_curve(param, [v for v, _ in summary], [m for _, m in summary], os.path.join(out, f"sweep_{param}.png"))
    _write_log(
        os.path.join(out, "sweep_log.jsonl"),
        [{"command": "sweep", "param": param, "values": list(values)}],
    )
    return 0


# ----------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsarank", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set sft.hyperparams.alpha=0.8")
        if data:
            p.add_argument("--data", required=True, help="dataset directory (from `tsarank synth`)")

    p = sub.add_parser("synth", help="generate the synthetic dataset files")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cpt", help="continual pre-training on weak pairs")
    common(p)
    p.add_argument("--init", default=None, help="existing base checkpoint (default: fresh init from seed)")
    p.set_defaults(func=cmd_cpt)

    p = sub.add_parser("sft", help="fine-tune on ranking examples")
    common(p)
    p.add_argument("--checkpoint", required=True, help="cpt (or base) checkpoint to start from")
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("mine", help="mine lexical negatives into ranking examples")
    common(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("rank", help="write a run file for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="score a run file against judgments")
    common(p)
    p.add_argument("--run", required=True, help="run file from `tsarank rank`")
    p.add_argument("--checkpoint", default=None, help="also compute perplexity/token statistics for this model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the full pipeline and its six ablations")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep a hyperparameter declared in the config")
    common(p)
    p.add_argument("--param", choices=("alpha", "m", "cpt_fraction"), required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    level_name = os.environ.get("TSARANK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config, overrides=args.overrides, seed=args.seed)
        return args.func(cfg, args)
    except (ValueError, KeyError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
