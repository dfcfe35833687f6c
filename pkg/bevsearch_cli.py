"""
bevsearch command line
Knowledge graph training, caption building, alignment training, evaluation and querying
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from bevsearch.ablation import parse_sweep, run_module_grid, run_sweep
from bevsearch.caption_toolkit import (CaptionLevel, build_corpus_captions, caption_stats,
                                       load_annotations, write_captions_jsonl)
from bevsearch.checkpoint import checkpoint_hash, load_model, save_model
from bevsearch.config import (AlignTrainConfig, KgeTrainConfig, RunConfig, SynthSpec, default_seed,
                              load_config_file, resolve, setup_logging)
from bevsearch.errors import BevSearchError, DataError, UsageError
from bevsearch.kg_embed import (KnowledgeBase, driving_graph, evaluate_link_prediction, load_graph_file,
                                read_triple_file, save_kge, train_kge)
from bevsearch.retrieval_engine import build_index, evaluate_bidirectional, load_index, query_topk, save_index
from bevsearch.run_audit import auditor
from bevsearch.scene_ingest import CAPTIONS_FILE, SCENES_FILE, load_corpus, save_corpus, synth_corpus
from bevsearch.sce_align import AlignmentTrainer
from bevsearch.tensor_core import grad_check

logger = logging.getLogger("bevsearch.cli")

KGE_FILE = "kge.tsr"
LINK_REPORT_FILE = "link_prediction.json"
SYNONYMS_FILE = "synonyms.tsv"
MODEL_FILE = "model.tsr"
TRAIN_LOG_FILE = "train_log.jsonl"


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def write_json(path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def emit(payload: Any, out: Optional[str]) -> None:
    """JSON to a file when --out is given, else to stdout"""
    if out:
        write_json(out, payload)
    else:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def validated(model_cls, values: Dict[str, Any], what: str):
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        raise UsageError(f"invalid {what} settings: {e}") from e


def settings(args: argparse.Namespace, names: Sequence[str]) -> Dict[str, Any]:
    """Flags over --config over defaults; unset flags are None"""
    flags = {name: getattr(args, name, None) for name in names}
    flags["seed"] = args.seed
    resolved = resolve({}, load_config_file(args.config), flags)
    resolved.setdefault("seed", default_seed())
    return resolved


def record_run(args: argparse.Namespace, params: Dict[str, Any], inputs: List, outputs: List,
               directory) -> None:
    paths = {key: str(value) for key, value in vars(args).items()
             if key in ("triples", "test_triples", "synonyms", "annotations", "corpus", "kge",
                        "checkpoint", "index", "out") and value}
    run = RunConfig(subcommand=args.command, seed=int(params.get("seed", default_seed())),
                    paths=paths, params=params)
    payload = auditor.create_audit_payload(args.command, run.model_dump(mode="json"),
                                           [p for p in inputs if p], outputs)
    auditor.write_manifest(args.manifest_dir or directory, payload)


def report_directory(args: argparse.Namespace) -> Path:
    """Beside --out, else under the checkpoint's directory in runs/<command>"""
    if args.out:
        return Path(args.out).parent
    return Path(args.checkpoint).parent / "runs" / args.command


def load_knowledge(args: argparse.Namespace) -> Optional[KnowledgeBase]:
    if not getattr(args, "kge", None):
        return None
    return KnowledgeBase.load(args.kge, args.synonyms)


# Subcommands

def cmd_train_kge(args: argparse.Namespace) -> int:
    params = settings(args, ["scorer", "dim", "learning_rate", "iterations", "margin",
                             "negatives_per_positive", "batch_size", "regularization"])
    config = validated(KgeTrainConfig, params, "KGE")
    if args.triples:
        graph = load_graph_file(args.triples)
        synonyms = None
    else:
        graph, synonyms = driving_graph()
        logger.info(f"📊 using the built-in driving graph ({len(graph.triples)} triples)")
    model = train_kge(graph, config)

    if args.test_triples:
        test = [graph.encode(*triple) for _, triple in read_triple_file(args.test_triples)]
    else:
        test = list(graph.triples)
    report = evaluate_link_prediction(model, graph, test)

    out = Path(args.out)
    outputs = [save_kge(out / KGE_FILE, model, graph),
               write_json(out / LINK_REPORT_FILE, report.model_dump())]
    if synonyms is not None:
        with open(out / SYNONYMS_FILE, "w", encoding="utf-8") as f:
            f.writelines(f"{surface}\t{name}\n" for surface, name in sorted(synonyms.mapping.items()))
        outputs.append(out / SYNONYMS_FILE)
    logger.info(f"✅ link prediction: MRR={report.mrr:.3f} Hits@1={report.hits_at_1:.3f}")
    record_run(args, config.model_dump(), [args.triples, args.test_triples], outputs, out)
    return 0


def cmd_build_captions(args: argparse.Namespace) -> int:
    annotations = load_annotations(args.annotations)
    levels = [CaptionLevel.EASY, CaptionLevel.HARD] if args.level == "both" else [CaptionLevel(args.level)]
    out = Path(args.out)
    corpora = {}
    outputs = []
    for level in levels:
        corpus = build_corpus_captions(annotations, level)
        corpora[level.value] = corpus
        outputs.append(write_captions_jsonl(out / f"captions_{level.value}.jsonl", corpus))
    outputs.append(write_json(out / "caption_stats.json", caption_stats(corpora)))
    record_run(args, {"level": args.level}, [args.annotations], outputs, out)
    return 0


def cmd_synth_corpus(args: argparse.Namespace) -> int:
    params = settings(args, ["num_classes", "samples_per_class", "n", "d_b", "noise_sigma",
                             "validation_per_class"])
    spec = validated(SynthSpec, params, "corpus")
    out = save_corpus(args.out, synth_corpus(spec))
    record_run(args, spec.model_dump(), [], [out / SCENES_FILE, out / CAPTIONS_FILE], out)
    return 0


ALIGN_FLAGS = ["epochs", "batch_size", "learning_rate", "min_learning_rate", "optimizer",
               "weight_decay", "temperature", "lambda_cg", "k", "d_c", "use_sce", "use_kgp", "use_cg"]


def align_config(args: argparse.Namespace) -> AlignTrainConfig:
    return validated(AlignTrainConfig, settings(args, ALIGN_FLAGS), "alignment")


def cmd_train_align(args: argparse.Namespace) -> int:
    config = align_config(args)
    corpus = load_corpus(args.corpus)
    knowledge = load_knowledge(args)
    if config.use_kgp and knowledge is None:
        logger.warning("⚠️ no --kge checkpoint given; training without graph prompting")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = AlignmentTrainer(corpus, config, knowledge)
    with open(out / TRAIN_LOG_FILE, "w", encoding="utf-8") as log:
        for record in trainer.stream_epochs():
            log.write(json.dumps(record.log_line()) + "\n")
    outputs = [save_model(out / MODEL_FILE, trainer.model, knowledge), out / TRAIN_LOG_FILE]
    record_run(args, config.model_dump(mode="json"),
               [Path(args.corpus) / SCENES_FILE, Path(args.corpus) / CAPTIONS_FILE, args.kge, args.synonyms],
               outputs, out)
    return 0


def _split(value: str):
    return None if value == "all" else value


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    report = evaluate_bidirectional(corpus, model, split=_split(args.split),
                                    checkpoint_hash=checkpoint_hash(args.checkpoint))
    emit(report.model_dump(), args.out)
    record_run(args, {"split": args.split}, [args.checkpoint, Path(args.corpus) / SCENES_FILE],
               [args.out] if args.out else [], report_directory(args))
    return 0


def cmd_build_index(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    ids = corpus.ids(_split(args.split))
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    scenes = corpus.scene_map()
    vectors = model.scene_vectors(np.stack([scenes[i].bev_sequence for i in ids]))
    path = save_index(args.out, build_index(zip(ids, vectors)),
                      {"checkpoint_hash": checkpoint_hash(args.checkpoint), "split": args.split})
    logger.info(f"✅ indexed {len(ids)} scenes into {path}")
    record_run(args, {"split": args.split}, [args.checkpoint, Path(args.corpus) / SCENES_FILE],
               [path], path.parent)
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    index = load_index(args.index)
    ranked = query_topk(index, model.text_vectors([args.text])[0], args.k, query_id=args.text)
    emit({"query": args.text, "results": [{"sample_id": i, "score": s}
                                          for i, s in zip(ranked.ids, ranked.scores)]}, args.out)
    record_run(args, {"k": args.k, "text": args.text}, [args.checkpoint, args.index],
               [args.out] if args.out else [], report_directory(args))
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    ids = corpus.ids("train")[:args.samples]
    if len(ids) < 2:
        raise DataError("gradient check needs at least two training samples")
    scenes, captions = corpus.scene_map(), corpus.caption_of()
    bev = np.stack([scenes[i].bev_sequence for i in ids])
    texts = [captions[i] for i in ids]

    def loss():
        return model.batch_losses(bev, texts).total

    errors = {name: grad_check(loss, [param], epsilon=args.epsilon, max_components=args.max_components,
                               seed=args.seed or 0)
              for name, param in model.named_parameters().items()}
    worst = max(errors.values())
    emit({"max_relative_error": worst, "per_parameter": errors, "samples": ids}, args.out)
    logger.info(f"📊 worst relative gradient error {worst:.3e}")
    record_run(args, {"samples": args.samples, "epsilon": args.epsilon,
                      "max_components": args.max_components}, [args.checkpoint],
               [args.out] if args.out else [], report_directory(args))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = align_config(args)
    corpus = load_corpus(args.corpus)
    knowledge = load_knowledge(args)
    if args.sweep:
        name, values = parse_sweep(args.sweep)
        rows = run_sweep(corpus, knowledge, config, name, values)
    else:
        rows = run_module_grid(corpus, knowledge, config)
    path = write_json(args.out, {"rows": rows, "sweep": args.sweep, "seed": config.seed})
    record_run(args, {**config.model_dump(mode="json"), "sweep": args.sweep},
               [Path(args.corpus) / SCENES_FILE, args.kge], [path], path.parent)
    return 0


# Parser

def _add_align_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--min-learning-rate", dest="min_learning_rate", type=float)
    parser.add_argument("--optimizer", choices=["sgd", "adamw"])
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--lambda-cg", dest="lambda_cg", type=float)
    parser.add_argument("--k", type=int, help="codebook size")
    parser.add_argument("--d-c", dest="d_c", type=int, help="shared embedding width")
    parser.add_argument("--no-sce", dest="use_sce", action="store_const", const=False)
    parser.add_argument("--no-kgp", dest="use_kgp", action="store_const", const=False)
    parser.add_argument("--no-cg", dest="use_cg", action="store_const", const=False)
    parser.add_argument("--kge", help="KGE checkpoint from train-kge")
    parser.add_argument("--synonyms", help="surface<TAB>entity synonym file")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default: $BEVSEARCH_SEED or 0)")
    common.add_argument("--config", help="JSON file of settings; flags take precedence")
    common.add_argument("--manifest-dir", dest="manifest_dir",
                        help="where run_manifest.json goes (default: beside the outputs, "
                             "or <checkpoint dir>/runs/<command> for stdout reports)")
    common.add_argument("--log-level", dest="log_level")

    parser = CliParser(prog="bevsearch", description="Text-to-scene retrieval over BEV features")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("train-kge", parents=[common], help="train knowledge graph embeddings")
    p.add_argument("--triples", help="head<TAB>relation<TAB>tail file (default: built-in driving graph)")
    p.add_argument("--test-triples", dest="test_triples")
    p.add_argument("--scorer", choices=["transe-l1", "transe-l2", "distmult"])
    p.add_argument("--dim", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--negatives", dest="negatives_per_positive", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--regularization", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_kge)

    p = sub.add_parser("build-captions", parents=[common], help="annotations -> caption JSONL")
    p.add_argument("--annotations", required=True)
    p.add_argument("--level", choices=["easy", "hard", "both"], default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_captions)

    p = sub.add_parser("synth-corpus", parents=[common], help="write a synthetic paired corpus")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--n", type=int, help="BEV sequence length")
    p.add_argument("--d-b", dest="d_b", type=int, help="BEV feature width")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--validation-per-class", dest="validation_per_class", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth_corpus)

    p = sub.add_parser("train-align", parents=[common], help="train the alignment model")
    p.add_argument("--corpus", required=True)
    _add_align_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_align)

    p = sub.add_parser("eval", parents=[common], help="bidirectional R@K on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "validation", "all"], default="validation")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("build-index", parents=[common], help="embed corpus scenes into an index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "validation", "all"], default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_index)

    p = sub.add_parser("query", parents=[common], help="top-k scenes for a text query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_query)

    p = sub.add_parser("grad-check", parents=[common], help="compare tape gradients to finite differences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--max-components", dest="max_components", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser("ablate", parents=[common], help="module grid or parameter sweep")
    p.add_argument("--corpus", required=True)
    _add_align_flags(p)
    p.add_argument("--sweep", help="NAME=v1,v2,... e.g. k=4,8,16 or d_c=16,32,64")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except BevSearchError as e:
        logger.error(f"❌ {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
