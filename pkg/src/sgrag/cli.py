"""Command line: ingest, chunk, index, ask, eval, ablate, report.

Exit codes: 0 success, 2 usage, 3 data, 4 transport, 5 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import answer as ans
from .chunks import build_chunks, dump_chunks, read_chunks
from .errors import ConfigurationError, SGRAGError, UsageError
from .evaluation import (
    AttributeScores,
    EvalItem,
    PipelineConfig,
    default_items,
    evaluate_answers,
    item_from_dict,
    render_report,
    run_ablation,
)
from .prompt import DEFAULT_K, PromptTemplate
from .relation_model import build_prototypes, infer_relations, init_weights, load_glove, load_weights
from .scene_graph import SceneGraph, filter_by_score, load_dataset, write_dataset
from .vector_store import (
    LocalHashEmbedder,
    RemoteEmbedder,
    VectorIndex,
    build_index,
    chunk_entries,
    load_index,
    save_index,
)

log = logging.getLogger("sgrag")

EXIT_USAGE, EXIT_DATA, EXIT_TRANSPORT, EXIT_INTERNAL = 2, 3, 4, 5
COMMANDS = ("ingest", "chunk", "index", "ask", "eval", "ablate", "report")


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None
    format: str = "dir"
    adapter: str = "canonical"
    min_score: float = 0.0
    relation_model: str = "annotated"
    relation_threshold: float = 0.5
    relation_weights: str | None = None
    relation_prototypes: str | None = None
    relation_predicates: str | None = None
    index: str | None = None
    corpus: bool = False
    k: int = DEFAULT_K
    embed_backend: str = "local"
    embed_dim: int = 256
    embed_url: str | None = None
    embed_model: str | None = None
    llm_backend: str = "stub"
    llm_url: str | None = None
    llm_model: str = ans.DEFAULT_LLM_MODEL
    llm_temperature: float = 0.0
    llm_max_tokens: int = 512
    llm_timeout_ms: int = 60000
    stub_mode: str = "template"
    stub_script: str | None = None
    prompt_head: str | None = None
    questions: str | None = None
    transcript: str | None = None
    dump_prompts: str | None = None
    output: str | None = None
    out: str = "md"
    k_values: str = "1,2,4,8,16"
    seed: int = 42
    jobs: int = min(os.cpu_count() or 1, 8)
    dry_run: bool = False

    def dump(self) -> dict[str, Any]:
        return {_key(f): v for f, v in asdict(self).items()}


CHOICES = {
    "format": ("dir", "lines"),
    "adapter": ("canonical", "aug", "vg150"),
    "relation_model": ("annotated", "penet-toy"),
    "embed_backend": ("local", "remote"),
    "llm_backend": ("stub", "remote"),
    "stub_mode": ("echo", "scripted", "template"),
    "out": ("md", "csv", "json"),
}
_PREFIXES = ("relation", "embed", "llm", "stub")


def _key(field_name: str) -> str:
    """Dotted config key for a field: ``llm_max_tokens`` -> ``llm.max_tokens``."""
    head, _, rest = field_name.partition("_")
    return f"{head}.{rest}" if head in _PREFIXES and rest else field_name


def _field(key: str) -> str:
    return key.replace(".", "_").replace("-", "_")


def _flatten(doc: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in doc.items():
        name = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def _coerce(name: str, value: Any, kind: str) -> Any:
    if value is None:
        return None
    try:
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {_key(name)!r}: cannot parse {value!r} as {kind}") from None


_KINDS = {
    f.name: ("bool" if f.type in ("bool", bool) else "int" if f.type in ("int", int) else "float" if f.type in ("float", float) else "str")
    for f in fields(RunConfig)
}


def resolve_config(
    flags: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
    file: str | Path | Mapping[str, Any] | None = None,
) -> RunConfig:
    """Merge defaults < config file < environment (``SGRAG_<KEY>``) < flags, then validate."""
    layers: list[tuple[str, dict[str, Any]]] = []
    if file is not None:
        if not isinstance(file, Mapping):
            try:
                file = json.loads(Path(file).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"config file {file}: {exc}") from None
            if not isinstance(file, Mapping):
                raise UsageError("config file must hold a key-value object")
        layers.append(("file", {_field(k): v for k, v in _flatten(file).items()}))
    if env is not None:
        layers.append(
            ("env", {f.name: env[f"SGRAG_{f.name.upper()}"] for f in fields(RunConfig) if f"SGRAG_{f.name.upper()}" in env})
        )
    if flags:
        layers.append(("flags", {_field(k): v for k, v in flags.items() if v is not None}))

    merged: dict[str, Any] = {}
    for source, layer in layers:
        for name, value in layer.items():
            if name not in _KINDS:
                raise UsageError(f"unknown config key {_key(name)!r} from {source}")
            merged[name] = _coerce(name, value, _KINDS[name])

    cfg = RunConfig(**merged)
    if cfg.k < 1:
        raise UsageError(f"config key 'k' must be >= 1, got {cfg.k}")
    if cfg.jobs < 1:
        raise UsageError(f"config key 'jobs' must be >= 1, got {cfg.jobs}")
    if cfg.embed_dim < 1:
        raise UsageError(f"config key 'embed.dim' must be >= 1, got {cfg.embed_dim}")
    for name, allowed in CHOICES.items():
        if getattr(cfg, name) not in allowed:
            raise UsageError(f"config key {_key(name)!r} must be one of {allowed}, got {getattr(cfg, name)!r}")
    parse_k_values(cfg.k_values)
    if cfg.embed_backend == "remote" and not (cfg.embed_url and cfg.embed_model):
        raise UsageError("remote embedder needs 'embed.url' and 'embed.model'")
    if cfg.llm_backend == "remote" and not cfg.llm_url:
        raise UsageError("remote LLM backend needs 'llm.url'")
    if cfg.stub_mode == "scripted" and cfg.llm_backend == "stub" and not cfg.stub_script:
        raise UsageError("scripted stub needs 'stub.script'")
    log.debug("resolved config: %s", json.dumps(cfg.dump(), sort_keys=True))
    return cfg


def parse_k_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"config key 'k_values': expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise UsageError(f"config key 'k_values' needs integers >= 1, got {text!r}")
    return sorted(set(values))


# -- argument parsing -----------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON key-value config file")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--jobs", type=int, default=S)
    common.add_argument("--dry-run", action="store_true", default=S, help="validate inputs and config, write nothing")
    common.add_argument("--log-level", default="WARNING")
    common.add_argument("--output", default=S, help="write results here instead of stdout")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", default=S)
    data.add_argument("--format", choices=CHOICES["format"], default=S)
    data.add_argument("--adapter", choices=CHOICES["adapter"], default=S)
    data.add_argument("--min-score", type=float, default=S)
    data.add_argument("--relation-model", choices=CHOICES["relation_model"], default=S)
    data.add_argument("--relation-threshold", type=float, default=S)
    data.add_argument("--relation-weights", default=S)
    data.add_argument("--relation-prototypes", default=S, help="GloVe-style text vectors")
    data.add_argument("--relation-predicates", default=S, help="comma-separated predicate vocabulary")

    embed = argparse.ArgumentParser(add_help=False)
    embed.add_argument("--embedder", dest="embed_backend", choices=CHOICES["embed_backend"], default=S)
    embed.add_argument("--embed-dim", type=int, default=S)
    embed.add_argument("--embed-url", default=S)
    embed.add_argument("--embed-model", default=S)
    embed.add_argument("--corpus", action="store_true", default=S, help="pool all images into one index")
    embed.add_argument("--index", default=S)

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--k", type=int, default=S)
    gen.add_argument("--prompt-head", default=S)
    gen.add_argument("--dump-prompts", default=S)
    gen.add_argument("--backend", dest="llm_backend", choices=CHOICES["llm_backend"], default=S)
    gen.add_argument("--stub-mode", choices=CHOICES["stub_mode"], default=S)
    gen.add_argument("--stub-script", default=S, help="JSON object mapping question to answer")
    gen.add_argument("--llm-url", default=S)
    gen.add_argument("--llm-model", default=S)
    gen.add_argument("--temperature", dest="llm_temperature", type=float, default=S)
    gen.add_argument("--max-tokens", dest="llm_max_tokens", type=int, default=S)
    gen.add_argument("--timeout-ms", dest="llm_timeout_ms", type=int, default=S)
    gen.add_argument("--questions", default=S, help="JSON lines: image_id, question, optional truth/answers")

    out = argparse.ArgumentParser(add_help=False)
    out.add_argument("--out", choices=CHOICES["out"], default=S)

    parser = argparse.ArgumentParser(prog="sgrag", description="Scene-graph retrieval-augmented VQA")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.add_parser("ingest", parents=[common, data], help="validate annotations, write canonical lines")
    sub.add_parser("chunk", parents=[common, data], help="write knowledge-chunk dump")
    p = sub.add_parser("index", parents=[common, data, embed], help="embed chunks and save index")
    p.add_argument("--chunks", default=None, help="chunk dump to index instead of --dataset")
    p = sub.add_parser("ask", parents=[common, data, embed, gen], help="answer one question or a question file")
    p.add_argument("--image", default=None)
    p.add_argument("--question", default=None)
    p.add_argument("--transcript", default=S)
    p = sub.add_parser("eval", parents=[common, data, out], help="score a transcript")
    p.add_argument("--transcript", default=S)
    p.add_argument("--questions", default=S)
    p.add_argument("--method", default="sgrag")
    p = sub.add_parser("ablate", parents=[common, data, embed, gen, out], help="top-k sweep")
    p.add_argument("--k-values", default=S)
    p = sub.add_parser("report", parents=[common, out], help="render eval/ablate JSON as a table")
    p.add_argument("--scores", nargs="+", required=True)
    return parser


_LOCAL_ARGS = {"command", "config", "log_level", "chunks", "image", "question", "method", "scores"}


# -- helpers --------------------------------------------------------------------


def _emit(cfg: RunConfig, text: str) -> None:
    if cfg.output:
        if cfg.dry_run:
            log.info("dry run: would write %d bytes to %s", len(text), cfg.output)
            return
        Path(cfg.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def load_graphs(cfg: RunConfig) -> list[SceneGraph]:
    if not cfg.dataset:
        raise UsageError("--dataset is required")
    graphs = [filter_by_score(g, cfg.min_score) for g in load_dataset(cfg.dataset, cfg.format, cfg.adapter)]
    if cfg.relation_model == "penet-toy":
        weights = load_weights(cfg.relation_weights) if cfg.relation_weights else init_weights(seed=cfg.seed)
        labels = sorted({lbl for g in graphs for lbl in g.labels})
        if cfg.relation_predicates:
            predicates = sorted({p.strip() for p in cfg.relation_predicates.split(",") if p.strip()})
        else:
            predicates = sorted({p for g in graphs for p in g.predicates})
        if not predicates:
            raise ConfigurationError("penet-toy needs a predicate vocabulary (relation.predicates or annotated predicates)")
        vectors = load_glove(cfg.relation_prototypes) if cfg.relation_prototypes else None
        prototypes = build_prototypes(labels, predicates, weights.d_t, cfg.seed, vectors)
        graphs = [
            infer_relations(
                SceneGraph(g.image_id, g.image_width, g.image_height, g.objects, (), tuple(predicates)),
                weights,
                prototypes,
                cfg.relation_threshold,
                cfg.seed,
            )
            for g in graphs
        ]
    return graphs


def make_embedder(cfg: RunConfig):
    if cfg.embed_backend == "remote":
        return RemoteEmbedder(cfg.embed_url, cfg.embed_model, api_key=os.environ.get("SGRAG_EMBED_API_KEY"), max_in_flight=min(cfg.jobs, 4))
    return LocalHashEmbedder(cfg.embed_dim)


def make_backend(cfg: RunConfig):
    if cfg.llm_backend == "remote":
        return ans.ChatBackend(
            cfg.llm_url,
            cfg.llm_model,
            api_key=os.environ.get("SGRAG_LLM_API_KEY"),
            temperature=cfg.llm_temperature,
            max_tokens=cfg.llm_max_tokens,
            timeout_ms=cfg.llm_timeout_ms,
        )
    script = None
    if cfg.stub_script:
        script = json.loads(Path(cfg.stub_script).read_text(encoding="utf-8"))
    return ans.StubBackend(cfg.stub_mode, script)


def make_template(cfg: RunConfig) -> PromptTemplate:
    return PromptTemplate.from_file(cfg.prompt_head) if cfg.prompt_head else PromptTemplate()


def load_items(path: str | None, graphs: Sequence[SceneGraph]) -> list[EvalItem]:
    if not path:
        return default_items(graphs)
    with open(path, encoding="utf-8") as fh:
        return [item_from_dict(json.loads(line)) for line in fh if line.strip()]


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def _index_for(cfg: RunConfig, graphs: Sequence[SceneGraph], image_id: str, embedder, cache: dict) -> VectorIndex:
    key = "__corpus__" if cfg.corpus else image_id
    if key in cache:
        return cache[key]
    if cfg.index:
        path = Path(cfg.index)
        index = load_index(path / f"{_safe(image_id)}.idx" if path.is_dir() else path)
    elif cfg.corpus:
        index = build_index(chunk_entries([c for g in graphs for c in build_chunks(g)], corpus=True), embedder)
    else:
        by_id = {g.image_id: g for g in graphs}
        if image_id not in by_id:
            raise UsageError(f"image {image_id!r} not in dataset")
        index = ans.index_graph(by_id[image_id], embedder)
    cache[key] = index
    return index


# -- commands -------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args) -> int:
    graphs = load_graphs(cfg)
    log.info("ingested %d images, %d objects, %d relations", len(graphs), sum(len(g.objects) for g in graphs), sum(len(g.relations) for g in graphs))
    if cfg.output and not cfg.dry_run:
        write_dataset(graphs, cfg.output, "lines")
    elif not cfg.output:
        from .scene_graph import serialize_scene_graph

        sys.stdout.write("".join(serialize_scene_graph(g) + "\n" for g in graphs))
    return 0


def cmd_chunk(cfg: RunConfig, args) -> int:
    graphs = load_graphs(cfg)
    _emit(cfg, dump_chunks(c for g in graphs for c in build_chunks(g)))
    return 0


def cmd_index(cfg: RunConfig, args) -> int:
    if args.chunks:
        chunks = read_chunks(args.chunks)
    else:
        chunks = [c for g in load_graphs(cfg) for c in build_chunks(g)]
    if not cfg.index:
        raise UsageError("--index is required")
    embedder = make_embedder(cfg)
    if cfg.corpus:
        indexes = {None: build_index(chunk_entries(chunks, corpus=True), embedder)}
    else:
        by_image: dict[str, list] = {}
        for c in chunks:
            by_image.setdefault(c.image_id, []).append(c)
        indexes = {img: build_index(chunk_entries(cs), embedder) for img, cs in sorted(by_image.items())}
    if cfg.dry_run:
        log.info("dry run: would write %d index file(s) under %s", len(indexes), cfg.index)
        return 0
    if cfg.corpus:
        save_index(indexes[None], cfg.index)
    else:
        root = Path(cfg.index)
        root.mkdir(parents=True, exist_ok=True)
        for img, index in indexes.items():
            save_index(index, root / f"{_safe(img)}.idx")
    log.info("indexed %d chunks", len(chunks))
    return 0


def _dump_prompt(cfg: RunConfig, record: ans.AnswerRecord) -> None:
    if cfg.dump_prompts and not cfg.dry_run:
        root = Path(cfg.dump_prompts)
        root.mkdir(parents=True, exist_ok=True)
        (root / f"{_safe(record.image_id or 'corpus')}-{record.prompt_hash[:16]}.txt").write_text(record.prompt.text, encoding="utf-8")


def cmd_ask(cfg: RunConfig, args) -> int:
    graphs = load_graphs(cfg)
    if args.question:
        if not args.image and not cfg.corpus:
            raise UsageError("--image is required unless --corpus is set")
        items = [EvalItem(args.image or "", args.question)]
    elif cfg.questions:
        items = load_items(cfg.questions, graphs)
    else:
        raise UsageError("give --question (with --image) or --questions")
    embedder, backend, template = make_embedder(cfg), make_backend(cfg), make_template(cfg)
    cache: dict = {}
    records = []
    for item in items:
        index = _index_for(cfg, graphs, item.image_id, embedder, cache)
        records.append(ans.ask(index, item.question, cfg.k, template, embedder, backend, item.image_id or None))
        _dump_prompt(cfg, records[-1])
    if cfg.transcript:
        if cfg.dry_run:
            log.info("dry run: would append %d record(s) to %s", len(records), cfg.transcript)
        else:
            ans.append_transcript(cfg.transcript, records)
    if args.question:
        _emit(cfg, records[0].answer_text + "\n")
    else:
        _emit(cfg, "".join(r.transcript_line() + "\n" for r in records))
    return 0


def _scores_json(rows: list[dict]) -> str:
    return json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n"


def _render(cfg: RunConfig, rows: list[dict]) -> str:
    if cfg.out == "json":
        return _scores_json(rows)
    return render_report([(r["method"], AttributeScores.from_dict(r["scores"])) for r in rows], cfg.out)


def cmd_eval(cfg: RunConfig, args) -> int:
    if not cfg.transcript:
        raise UsageError("--transcript is required")
    graphs = load_graphs(cfg)
    records = ans.read_transcript(cfg.transcript)
    scoped = {(i.image_id, i.question): i for i in load_items(cfg.questions, graphs)} if cfg.questions else {}
    items = [scoped.get((r["image_id"], r["question"]), EvalItem(r["image_id"], r["question"])) for r in records]
    result = evaluate_answers(graphs, items, [r["answer"] for r in records])
    row = {
        "method": args.method,
        "scores": result.scores.to_dict(),
        "answered": result.answered,
        "failures": result.failures,
        "vqa_accuracy": result.vqa_accuracy,
    }
    _emit(cfg, _render(cfg, [row]))
    return 0 if result.failures == 0 else EXIT_DATA


def cmd_ablate(cfg: RunConfig, args) -> int:
    graphs = load_graphs(cfg)
    items = load_items(cfg.questions, graphs)
    pipeline = PipelineConfig(make_embedder(cfg), make_backend(cfg), make_template(cfg), cfg.jobs)
    rows = run_ablation(graphs, items, parse_k_values(cfg.k_values), pipeline)
    failures = sum(r.failures for r in rows)
    if failures:
        log.warning("ablation finished with %d failed answers", failures)
    out = [
        {"method": f"k={r.k}", "k": r.k, "scores": r.scores.to_dict(), "answered": r.answered, "failures": r.failures}
        for r in rows
    ]
    _emit(cfg, _render(cfg, out))
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    rows: list[dict] = []
    for path in args.scores:
        try:
            rows += json.loads(Path(path).read_text(encoding="utf-8"))["rows"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read scores file {path}: {exc}") from None
    _emit(cfg, _render(cfg, rows))
    return 0


HANDLERS = {
    "ingest": cmd_ingest,
    "chunk": cmd_chunk,
    "index": cmd_index,
    "ask": cmd_ask,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


class _KeyValueFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage().replace('"', "'")
        return f'level={record.levelname.lower()} logger={record.name} msg="{msg}"'


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper() if isinstance(level, str) else level)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        sys.stderr.write("sgrag: error: a subcommand is required\n")
        return EXIT_USAGE
    try:
        _setup_logging(args.log_level)
    except ValueError:
        sys.stderr.write(f"sgrag: error: unknown log level {args.log_level!r}\n")
        return EXIT_USAGE
    flags = {k: v for k, v in vars(args).items() if k not in _LOCAL_ARGS}
    try:
        cfg = resolve_config(flags, os.environ, args.config)
        return HANDLERS[args.command](cfg, args)
    except SGRAGError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
