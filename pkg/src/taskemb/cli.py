"""Command-line surface: data preparation, staged training, encoding, evaluation.

Runs are driven by a JSON config (see README for the schema).  Exit codes:
0 success, 1 usage error, 2 data/config error, 3 numeric failure.  With
``--json`` the result is machine-readable JSON on stdout; otherwise plain
tables.  Output files are written to a temp name and renamed atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import data as dio
from . import evaluation as ev
from . import synth
from .bm25 import Bm25Index, mine_hard_negatives
from .data import DataError
from .encoder import EncoderModel, ModelConfig, TaskKind
from .tensor import NumericError
from .tokenizer import build_vocab
from .train import StagePlan, TrainingError, run_stage1, run_stage2, run_stage3

logger = logging.getLogger("taskemb")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


# -- config ----------------------------------------------------------------


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    model: ModelConfig
    stages: list[StagePlan] = field(default_factory=list)
    data: dict = field(default_factory=dict)
    vocab_extra: tuple[str, ...] = ()
    eval_settings: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc
        if "seed" not in raw:
            raise DataError(f"{path}: 'seed' is mandatory (no wall-clock default)")
        if "model" not in raw:
            raise DataError(f"{path}: 'model' section is required")
        try:
            model_cfg = dict(raw["model"])
            model_cfg.setdefault("seed", raw["seed"])
            model = ModelConfig.from_json(model_cfg)
            stages = [StagePlan.from_json(s) for s in raw.get("stages", [])]
        except (TypeError, ValueError, KeyError) as exc:
            raise DataError(f"{path}: bad config: {exc}") from exc
        cfg = cls(
            seed=int(raw["seed"]),
            output_dir=str(raw.get("output_dir", "runs")),
            model=model,
            stages=stages,
            data=raw.get("data", {}),
            vocab_extra=tuple(raw.get("vocab", {}).get("extra_tokens", ())),
            eval_settings=raw.get("eval", {}),
        )
        cfg._check_paths(path)
        return cfg

    def _check_paths(self, cfg_path: str) -> None:
        for p in _iter_paths(self.data):
            if not os.path.exists(p):
                raise DataError(f"{cfg_path}: referenced path does not exist: {p}")

    def stage_plan(self, stage: int, task: str | None = None) -> StagePlan:
        for plan in self.stages:
            if plan.stage == stage and (task is None or plan.task == task):
                return plan
        what = f"stage {stage}" + (f" task {task!r}" if task else "")
        raise DataError(f"config has no plan for {what}")


def _iter_paths(obj):
    if isinstance(obj, str):
        yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _iter_paths(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _iter_paths(v)


def _read_corpus_lines(path: str) -> list[str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc


def _load_pair_datasets(spec: dict) -> dict[str, list]:
    return {name: dio.load_pairs(path) for name, path in sorted(spec.items())}


def _emit(payload: dict, as_json: bool, table: str | None = None) -> None:
    if as_json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(table if table is not None else json.dumps(payload, sort_keys=True, indent=1))


def _out_path(cfg: RunConfig, flag_value: str | None, default_name: str) -> str:
    if flag_value:
        return flag_value
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, default_name)


# -- prepare-data -----------------------------------------------------------


def cmd_prepare(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.action == "filter-pairs":
        pairs = dio.load_pairs(args.input)
        kept = [p for p in pairs if dio.overlap_filter(p)]
        dio.write_jsonl(kept, args.output)
        _emit({"input": len(pairs), "kept": len(kept), "dropped": len(pairs) - len(kept)},
              args.json, f"kept {len(kept)} of {len(pairs)} pairs -> {args.output}")
    elif args.action == "mine-negatives":
        corpus = [str(obj["text"]) for _, obj in dio._iter_jsonl(args.corpus) if "text" in obj]
        if not corpus:
            raise DataError(f"{args.corpus}: no usable 'text' records")
        pairs = dio.load_pairs(args.input)
        index = Bm25Index(corpus)
        tuples = [mine_hard_negatives(p.q, p.p, corpus, args.m, rng, index) for p in pairs]
        dio.write_jsonl(tuples, args.output)
        _emit({"tuples": len(tuples), "m": args.m}, args.json,
              f"mined {len(tuples)} tuples (m={args.m}) -> {args.output}")
    elif args.action == "class-tuples":
        labeled = dio.load_labeled(args.input)
        tuples = dio.build_class_tuples(labeled, rng)
        dio.write_jsonl(tuples, args.output)
        _emit({"tuples": len(tuples)}, args.json,
              f"built {len(tuples)} class tuples -> {args.output}")
    elif args.action == "quality-convert":
        threads = dio.load_threads(args.input)
        tuples, skipped = dio.convert_quality_threads(threads, rng)
        dio.write_jsonl(tuples, args.output)
        _emit({"tuples": len(tuples), "skipped_threads": skipped}, args.json,
              f"converted {len(tuples)} tuples ({skipped} threads skipped) -> {args.output}")
    elif args.action == "gen-failures":
        records = synth.gen_failure_case(args.kind, args.n, rng)
        dio.write_jsonl(records, args.output)
        _emit({"kind": args.kind, "records": len(records)}, args.json,
              f"generated {len(records)} {args.kind} records -> {args.output}")
    else:
        raise UsageError(f"unknown prepare-data action {args.action!r}")
    return EXIT_OK


# -- training ---------------------------------------------------------------


def _fresh_model(cfg: RunConfig, texts_for_vocab: list[str]) -> EncoderModel:
    vocab = build_vocab(texts_for_vocab, max_size=cfg.model.vocab_size, extra=cfg.vocab_extra)
    return EncoderModel(cfg.model, vocab=vocab)


def cmd_pretrain(args) -> int:
    cfg = RunConfig.load(args.config)
    corpus_path = cfg.data.get("pretrain_corpus")
    if not corpus_path:
        raise DataError("config data.pretrain_corpus is required for pretrain")
    corpus = _read_corpus_lines(corpus_path)
    model = _fresh_model(cfg, corpus)
    plan = cfg.stage_plan(1)
    run_stage1(model, corpus, plan)
    out = _out_path(cfg, args.out, "stage1.ckpt")
    ckpt.save_checkpoint(model, out)
    _emit({"checkpoint": out, "steps": plan.total_steps}, args.json,
          f"stage I complete -> {out}")
    return EXIT_OK


def cmd_train_pairs(args) -> int:
    cfg = RunConfig.load(args.config)
    spec = cfg.data.get("pairs")
    if not spec:
        raise DataError("config data.pairs is required for train-pairs")
    datasets = _load_pair_datasets(spec)
    if args.init:
        model = ckpt.load_checkpoint(args.init)
    else:
        texts = [r.q for rs in datasets.values() for r in rs]
        texts += [r.p for rs in datasets.values() for r in rs]
        model = _fresh_model(cfg, texts)
    plan = cfg.stage_plan(2)
    run_stage2(model, datasets, plan)
    out = _out_path(cfg, args.out, "stage2.ckpt")
    ckpt.save_checkpoint(model, out)
    _emit({"checkpoint": out, "steps": plan.total_steps}, args.json,
          f"stage II complete -> {out}")
    return EXIT_OK


def _adapter_datasets(cfg: RunConfig, task: str):
    spec = cfg.data.get("adapters", {}).get(task)
    if not spec:
        raise DataError(f"config data.adapters.{task} is required")
    loaders = {"tuples": dio.load_tuples, "scored": dio.load_scored_pairs,
               "labeled": dio.load_labeled, "pairs": dio.load_pairs}
    out = {}
    for kind, mapping in spec.items():
        if kind not in loaders:
            raise DataError(f"unknown adapter data kind {kind!r}")
        out[kind] = {name: loaders[kind](path) for name, path in sorted(mapping.items())}
    return out


def cmd_train_adapter(args) -> int:
    cfg = RunConfig.load(args.config)
    model = ckpt.load_checkpoint(args.init)
    plan = cfg.stage_plan(3, task=args.task)
    loaded = _adapter_datasets(cfg, args.task)
    main_kind = {"retrieval": "tuples", "classification": "tuples",
                 "text-matching": "scored", "separation": "labeled"}[args.task]
    if main_kind not in loaded:
        raise DataError(f"task {args.task!r} needs data.adapters.{args.task}.{main_kind}")
    run_stage3(model, args.task, loaded[main_kind], plan,
               pair_datasets=loaded.get("pairs"))
    out = _out_path(cfg, args.out, f"stage3-{args.task}.ckpt")
    ckpt.save_checkpoint(model, out)
    _emit({"checkpoint": out, "task": args.task}, args.json,
          f"stage III ({args.task}) complete -> {out}")
    return EXIT_OK


# -- encode -----------------------------------------------------------------


def cmd_encode(args) -> int:
    model = ckpt.load_checkpoint(args.checkpoint)
    task = TaskKind.parse(args.task)
    if task not in (TaskKind.NONE,) and task not in model.adapters:
        raise DataError(f"checkpoint has no adapter for task {args.task!r}")
    rows = []
    for lineno, obj in dio._iter_jsonl(args.input):
        text = obj.get("text")
        if text is None:
            raise DataError(f"{args.input}:{lineno}: missing required key 'text'")
        rows.append((str(obj.get("id", lineno)), str(text)))
    vectors = model.embed(
        [t for _, t in rows], task=task, target_dim=args.dim,
        rope_base=args.rope_base, instructions=args.instructions,
    )
    if args.binary:
        if not args.output:
            raise UsageError("--binary requires --output")
        ckpt.save_tensors(args.output, {"embeddings": vectors})
        _emit({"output": args.output, "rows": len(rows), "dim": int(vectors.shape[1])},
              args.json, f"wrote {len(rows)} embeddings -> {args.output}")
        return EXIT_OK
    lines = [json.dumps({"id": rid, "vec": vec.tolist()}, sort_keys=True)
             for (rid, _), vec in zip(rows, vectors)]
    if args.output:
        dio.atomic_write_text(args.output, "\n".join(lines) + ("\n" if lines else ""))
        _emit({"output": args.output, "rows": len(rows)}, args.json,
              f"wrote {len(rows)} embeddings -> {args.output}")
    else:
        for line in lines:
            print(line)
    return EXIT_OK


# -- eval -------------------------------------------------------------------


def _load_texts_jsonl(path: str, id_key: str) -> dict[str, str]:
    out = {}
    for lineno, obj in dio._iter_jsonl(path):
        out[str(dio._need(obj, id_key, path, lineno))] = str(dio._need(obj, "text", path, lineno))
    if not out:
        raise DataError(f"{path}: no records")
    return out


def _report_out(args, report: ev.EvalReport, table: str | None = None) -> None:
    if args.output:
        report.write(args.output)
    _emit(json.loads(report.to_json()), args.json, table)


def cmd_eval(args) -> int:
    model = ckpt.load_checkpoint(args.checkpoint) if args.checkpoint else None

    if args.target == "retrieval":
        queries = _load_texts_jsonl(args.queries, "qid")
        corpus = _load_texts_jsonl(args.corpus, "did")
        qrels = ev.load_qrels(args.qrels)
        metrics = ev.retrieval_eval(
            model, queries, corpus, qrels,
            query_task=TaskKind.parse(args.task_query),
            passage_task=TaskKind.parse(args.task_passage),
            dim=args.dim, instructions=args.instructions, k=args.k,
        )
        report = ev.EvalReport(
            run_id=f"retrieval-seed{model.config.seed}", task="retrieval",
            adapter_config={"query": args.task_query, "passage": args.task_passage,
                            "instructions": args.instructions},
            metrics=metrics, seed=model.config.seed, mrl_dim=args.dim)
        _report_out(args, report, f"nDCG@{args.k}: {metrics[f'ndcg@{args.k}']:.4f}   "
                                  f"mAP: {metrics['map']:.4f}")
    elif args.target == "sts":
        records = dio.load_scored_pairs(args.input)
        task = TaskKind.parse(args.task)
        sims = (model.embed([r.q for r in records], task=task, target_dim=args.dim)
                * model.embed([r.p for r in records], task=task, target_dim=args.dim)).sum(axis=1)
        rho = ev.spearman(sims, [r.score for r in records])
        report = ev.EvalReport(
            run_id=f"sts-seed{model.config.seed}", task="sts",
            adapter_config={"task": args.task}, metrics={"spearman": rho},
            seed=model.config.seed, mrl_dim=args.dim)
        _report_out(args, report, f"Spearman: {rho:.4f}")
    elif args.target == "classification":
        train = dio.load_labeled(args.train)
        test = dio.load_labeled(args.test)
        task = TaskKind.parse(args.task)
        acc = ev.logistic_probe(
            model.embed([r.text for r in train], task=task, target_dim=args.dim),
            [r.label for r in train],
            model.embed([r.text for r in test], task=task, target_dim=args.dim),
            [r.label for r in test])
        report = ev.EvalReport(
            run_id=f"classification-seed{model.config.seed}", task="classification",
            adapter_config={"task": args.task}, metrics={"accuracy": acc},
            seed=model.config.seed, mrl_dim=args.dim)
        _report_out(args, report, f"probe accuracy: {acc:.4f}")
    elif args.target == "clustering":
        records = dio.load_labeled(args.input)
        task = TaskKind.parse(args.task)
        emb = model.embed([r.text for r in records], task=task, target_dim=args.dim)
        gold = [r.label for r in records]
        k = args.k if args.k else len(set(gold))
        pred = ev.kmeans(emb, k, seed=model.config.seed)
        vm = ev.v_measure(pred.tolist(), gold)
        report = ev.EvalReport(
            run_id=f"clustering-seed{model.config.seed}", task="clustering",
            adapter_config={"task": args.task, "k": k}, metrics={"v_measure": vm},
            seed=model.config.seed, mrl_dim=args.dim)
        _report_out(args, report, f"v-measure: {vm:.4f}")
    elif args.target == "mrl-sweep":
        queries = _load_texts_jsonl(args.queries, "qid")
        corpus = _load_texts_jsonl(args.corpus, "did")
        qrels = ev.load_qrels(args.qrels)
        dims = [int(d) for d in args.dims.split(",") if d]
        q_task, p_task = TaskKind.parse(args.task_query), TaskKind.parse(args.task_passage)

        def evaluate(m, dim):
            return ev.retrieval_eval(m, queries, corpus, qrels, query_task=q_task,
                                     passage_task=p_task, dim=dim,
                                     instructions=args.instructions, k=args.k)

        reports = ev.mrl_sweep(model, evaluate, dims, seed=model.config.seed)
        payload = {r.mrl_dim: r.metrics for r in reports}
        if args.output:
            dio.atomic_write_text(args.output, json.dumps(
                {str(k): v for k, v in payload.items()}, sort_keys=True, indent=1) + "\n")
        table = "\n".join(f"dim {d:>5}: nDCG@{args.k} {payload[d][f'ndcg@{args.k}']:.4f}"
                          for d in dims)
        _emit({str(k): v for k, v in payload.items()}, args.json, table)
    elif args.target == "ablation":
        return _eval_ablation(args)
    elif args.target == "failures":
        records = dio.load_tuples(args.input)
        kind = args.case
        results = ev.failure_eval(
            model, {kind: records},
            query_task=TaskKind.parse(args.task_query),
            passage_task=TaskKind.parse(args.task_passage),
            dim=args.dim, instructions=args.instructions)
        metrics = results[kind]
        report = ev.EvalReport(
            run_id=f"failures-{kind}-seed{model.config.seed}", task=f"failures-{kind}",
            adapter_config={"query": args.task_query, "passage": args.task_passage},
            metrics={"map": metrics["map"], "ndcg@10": metrics["ndcg@10"]},
            seed=model.config.seed, mrl_dim=args.dim)
        _report_out(args, report, ev.render_failure_table(results))
    else:
        raise UsageError(f"unknown eval target {args.target!r}")
    return EXIT_OK


def _eval_ablation(args) -> int:
    cfg = RunConfig.load(args.config)
    base_plan = cfg.stage_plan(3, task="retrieval")
    loaded = _adapter_datasets(cfg, "retrieval")
    tuples = loaded["tuples"]
    queries = _load_texts_jsonl(args.queries, "qid")
    corpus = _load_texts_jsonl(args.corpus, "did")
    qrels = ev.load_qrels(args.qrels)

    variants = {}
    for n_adapters in (1, 2):
        for instr in (True, False):
            model = ckpt.load_checkpoint(args.init)
            plan = StagePlan(
                stage=3, phases=base_plan.phases, max_lr=base_plan.max_lr,
                warmup_steps=base_plan.warmup_steps, tau=base_plan.tau,
                task="retrieval", mrl_dims=base_plan.mrl_dims,
                mrl_weights=base_plan.mrl_weights, instructions=instr,
                single_adapter=(n_adapters == 1))
            run_stage3(model, "retrieval", tuples, plan)
            passage_task = (TaskKind.RETRIEVAL_QUERY if n_adapters == 1
                            else TaskKind.RETRIEVAL_PASSAGE)
            variants[(n_adapters, instr)] = ev.AblationVariant(
                model=model, query_task=TaskKind.RETRIEVAL_QUERY,
                passage_task=passage_task, instructions=instr)

    report = ev.adapter_ablation(variants, queries, corpus, qrels, dim=args.dim, k=args.k)
    if args.output:
        dio.atomic_write_text(args.output, json.dumps(report, sort_keys=True, indent=1) + "\n")
    _emit(report, args.json, ev.render_ablation_table(report))
    return EXIT_OK


# -- argument wiring ----------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="taskemb", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("prepare-data", help="build and filter training data")
    p.add_argument("action", choices=["filter-pairs", "mine-negatives", "class-tuples",
                                      "quality-convert", "gen-failures"])
    p.add_argument("--input")
    p.add_argument("--corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--kind", choices=list(synth.FAILURE_KINDS), default="f1")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("pretrain", help="stage I: masked-LM pre-training")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train-pairs", help="stage II: pair fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--init")
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train_pairs)

    p = sub.add_parser("train-adapter", help="stage III: task adapter training")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, choices=["retrieval", "classification",
                                                     "text-matching", "separation"])
    p.add_argument("--init", required=True)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train_adapter)

    p = sub.add_parser("encode", help="embed texts from a JSONL file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="none")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--binary", action="store_true")
    p.add_argument("--instructions", action="store_true")
    p.add_argument("--rope-base", type=float, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("eval", help="run an evaluation")
    p.add_argument("target", choices=["retrieval", "sts", "classification", "clustering",
                                      "mrl-sweep", "ablation", "failures"])
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--init")
    p.add_argument("--queries")
    p.add_argument("--corpus")
    p.add_argument("--qrels")
    p.add_argument("--input")
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--case", choices=["f1", "f2", "f3", "f4"], default="f1")
    p.add_argument("--task", default="none")
    p.add_argument("--task-query", default="retrieval.query")
    p.add_argument("--task-passage", default="retrieval.passage")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--dims", default="")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--instructions", action="store_true")
    p.add_argument("--output")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    return parser


_EVAL_REQUIRED = {
    "retrieval": ("checkpoint", "queries", "corpus", "qrels"),
    "sts": ("checkpoint", "input"),
    "classification": ("checkpoint", "train", "test"),
    "clustering": ("checkpoint", "input"),
    "mrl-sweep": ("checkpoint", "queries", "corpus", "qrels", "dims"),
    "ablation": ("config", "init", "queries", "corpus", "qrels"),
    "failures": ("checkpoint", "input"),
}

_PREPARE_REQUIRED = {
    "filter-pairs": ("input",),
    "mine-negatives": ("input", "corpus"),
    "class-tuples": ("input",),
    "quality-convert": ("input",),
    "gen-failures": (),
}


def _validate_flags(args) -> None:
    if args.command == "eval":
        for flag in _EVAL_REQUIRED[args.target]:
            if not getattr(args, flag.replace("-", "_")):
                raise UsageError(f"eval {args.target} requires --{flag}")
    if args.command == "prepare-data":
        for flag in _PREPARE_REQUIRED[args.action]:
            if not getattr(args, flag):
                raise UsageError(f"prepare-data {args.action} requires --{flag}")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TASKEMB_VERBOSITY", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        _validate_flags(args)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, TrainingError, ckpt.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
