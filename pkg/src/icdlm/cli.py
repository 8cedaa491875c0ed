"""Command-line pipeline: worldgen -> dataset -> train -> generate -> evaluate.

Every command reads one JSON config (defaults apply when omitted) plus
``--set section.key=value`` scalar overrides, validates it, and stamps its
outputs with the resolved config digest and the world digest.  Downstream
commands refuse artifacts whose world digest disagrees with the config or
with each other.  Exit codes: 0 success, 1 validation problem, 2 runtime
failure.  Outputs carry no timestamps, so a rerun with the same config and
seeds reproduces every file byte for byte, whatever ``--threads`` says.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .baselines import BaselineKind
from .construction import build_dataset, split_anchor_set
from .decoding import (
    DecodeConfig,
    GoldenMethod,
    generate,
    read_generation,
    write_generation,
)
from .errors import ConfigError, NumericError, ParseError, SchemaError, ToolkitError
from .evaluation import (
    COMPOSER_METHOD,
    EvalReport,
    MethodSpec,
    baseline_method,
    composer_method,
    emit_report,
    evaluate_method,
    fixed_method,
    golden_method,
    load_report,
    render_markdown,
)
from .model import ModelConfig, SupportFeatures, Vocabulary, init_params, load_model, save_model
from .records import (
    RunConfig,
    config_digest,
    deserialize_examples,
    read_construction_records,
    serialize_examples,
    world_digest_of,
    write_construction_records,
)
from .training import gradient_check, train, write_loss_history
from .world import sample_examples, world_from_config, world_load, world_save

COMMANDS = ("worldgen", "dataset", "train", "generate", "evaluate", "gradcheck", "report")

WORLD_FILE = "world.json"
TRAIN_POOL_FILE = "train_pool.jsonl"
TEST_POOL_FILE = "test_pool.jsonl"
ANCHORS_FILE = "anchors.jsonl"
SUPPORT_FILE = "support.jsonl"
DM_FILE = "dm.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
LOSS_FILE = "loss_history.jsonl"
GENERATION_FILE = "generated.jsonl"
REPORT_JSON_FILE = "report.json"
REPORT_MD_FILE = "report.md"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icdlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="PATH=VALUE",
            help="override one scalar config value, e.g. training.lr=0.001",
        )
        p.add_argument(
            "--seed",
            type=int,
            default=None,
            help="replace every stage seed in the config with this value",
        )
        p.add_argument("--run-dir", type=Path, default=Path("run"))
        p.add_argument(
            "--threads",
            type=int,
            default=int(os.environ.get("ICDLM_THREADS", "1")),
            help="worker fan-out cap (default: ICDLM_THREADS env var or 1)",
        )
    return parser


def _parse_scalar(text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        return text
    if isinstance(value, (dict, list)):
        raise ConfigError(f"--set accepts scalars only, got {text!r}")
    return value


def apply_overrides(raw: dict, assignments) -> dict:
    for item in assignments:
        path, sep, text = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        keys = path.split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object value")
        node[keys[-1]] = _parse_scalar(text)
    return raw


def load_config(config_path: Path | None, overrides) -> RunConfig:
    if config_path is None:
        raw: dict = {}
    else:
        if not config_path.exists():
            raise ConfigError(f"missing config file: {config_path}")
        try:
            raw = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"{config_path}: malformed JSON: {e.msg}") from e
    raw = apply_overrides(raw, overrides)
    return RunConfig.from_dict(raw)


def validate_config(config: RunConfig) -> list[str]:
    """All violated invariants, as printable strings (empty means valid)."""
    return config.validate()


def _require(path: Path) -> Path:
    if not path.exists():
        raise ConfigError(f"missing input artifact: {path}")
    return path


def _check_world_digest(expected: str, found, source) -> None:
    if found != expected:
        raise ConfigError(
            f"world digest mismatch: config says {expected}, {source} says {found}"
        )


def _stage_meta(config: RunConfig) -> dict:
    return {
        "config_digest": config_digest(config),
        "world_digest": world_digest_of(config.world),
    }


# ---------------------------------------------------------------------------
# commands


def _cmd_worldgen(config: RunConfig, run_dir: Path, threads: int) -> int:
    run_dir.mkdir(parents=True, exist_ok=True)
    world = world_from_config(config.world)
    world_save(world, run_dir / WORLD_FILE)
    meta = _stage_meta(config)
    d_r = sample_examples(world, config.data.train_count, [config.data.seed, 1])
    d_e = sample_examples(world, config.data.test_count, [config.data.seed, 2])
    serialize_examples(d_r, run_dir / TRAIN_POOL_FILE, meta)
    serialize_examples(d_e, run_dir / TEST_POOL_FILE, meta)
    print(f"world {world.digest}: wrote {len(d_r)} train and {len(d_e)} test examples")
    return 0


def _load_world_checked(config: RunConfig, run_dir: Path):
    world = world_load(_require(run_dir / WORLD_FILE))
    _check_world_digest(world_digest_of(config.world), world.digest, WORLD_FILE)
    return world


def _cmd_dataset(config: RunConfig, run_dir: Path, threads: int) -> int:
    world = _load_world_checked(config, run_dir)
    meta = _stage_meta(config)
    d_r, header = deserialize_examples(_require(run_dir / TRAIN_POOL_FILE))
    _check_world_digest(meta["world_digest"], header.get("world_digest"), TRAIN_POOL_FILE)
    anchors, support = split_anchor_set(
        d_r, config.construction.n_anchors, [config.construction.seed, 0]
    )
    serialize_examples(anchors, run_dir / ANCHORS_FILE, meta)
    serialize_examples(support, run_dir / SUPPORT_FILE, meta)
    records = build_dataset(world, anchors, support, config.construction, threads)
    rec_meta = dict(meta, k=config.construction.k, b=config.construction.b)
    write_construction_records(records, run_dir / DM_FILE, rec_meta)
    print(
        f"built {len(records)} records ({config.construction.b} sequences each) "
        f"over a {len(support)}-example supporting set"
    )
    return 0


def _cmd_train(config: RunConfig, run_dir: Path, threads: int) -> int:
    meta = _stage_meta(config)
    support, s_header = deserialize_examples(_require(run_dir / SUPPORT_FILE))
    anchors, a_header = deserialize_examples(_require(run_dir / ANCHORS_FILE))
    records, r_header = read_construction_records(_require(run_dir / DM_FILE))
    for name, header in ((SUPPORT_FILE, s_header), (ANCHORS_FILE, a_header), (DM_FILE, r_header)):
        _check_world_digest(meta["world_digest"], header.get("world_digest"), name)
    params, history, state = train(config.model, records, anchors, support, config.training)
    save_model(params, run_dir / CHECKPOINT_FILE, meta)
    write_loss_history(history, run_dir / LOSS_FILE, meta)
    print(
        f"trained {config.model.arch} for {len(history)} steps; "
        f"final loss {history[-1][2]:.4f}, best {state.best_loss:.4f}"
    )
    return 0


def _decode_config(config: RunConfig) -> DecodeConfig:
    ev = config.evaluation
    return DecodeConfig(mode=ev.decode, width=ev.beam_width, no_repeat=ev.no_repeat)


def _cmd_generate(config: RunConfig, run_dir: Path, threads: int) -> int:
    meta = _stage_meta(config)
    params, c_meta = load_model(_require(run_dir / CHECKPOINT_FILE))
    _check_world_digest(meta["world_digest"], c_meta.get("world_digest"), CHECKPOINT_FILE)
    support, s_header = deserialize_examples(_require(run_dir / SUPPORT_FILE))
    _check_world_digest(meta["world_digest"], s_header.get("world_digest"), SUPPORT_FILE)
    queries, q_header = deserialize_examples(_require(run_dir / TEST_POOL_FILE))
    _check_world_digest(meta["world_digest"], q_header.get("world_digest"), TEST_POOL_FILE)
    feats = SupportFeatures.from_examples(support)
    decode = _decode_config(config)
    rows = []
    for q in queries:
        for s in config.evaluation.shots:
            rows.append((q.id, s, generate(params, feats, q, s, decode)))
    write_generation(rows, run_dir / GENERATION_FILE, dict(meta, shots=list(config.evaluation.shots)))
    print(f"decoded {len(rows)} sequences ({len(queries)} queries x {list(config.evaluation.shots)} shots)")
    return 0


def _cmd_evaluate(config: RunConfig, run_dir: Path, threads: int) -> int:
    meta = _stage_meta(config)
    world = _load_world_checked(config, run_dir)
    support, s_header = deserialize_examples(_require(run_dir / SUPPORT_FILE))
    queries, q_header = deserialize_examples(_require(run_dir / TEST_POOL_FILE))
    params, c_meta = load_model(_require(run_dir / CHECKPOINT_FILE))
    for name, found in (
        (SUPPORT_FILE, s_header.get("world_digest")),
        (TEST_POOL_FILE, q_header.get("world_digest")),
        (CHECKPOINT_FILE, c_meta.get("world_digest")),
    ):
        _check_world_digest(meta["world_digest"], found, name)
    feats = SupportFeatures.from_examples(support)
    decode = _decode_config(config)

    gen_path = run_dir / GENERATION_FILE
    if gen_path.exists():
        rows, g_header = read_generation(gen_path)
        _check_world_digest(meta["world_digest"], g_header.get("world_digest"), GENERATION_FILE)
        table = {(qid, s): seq for qid, s, seq in rows}
        composer = fixed_method(COMPOSER_METHOD, table)
    else:
        composer = composer_method(params, feats, decode)

    methods: list[MethodSpec] = [composer]
    for kind in (BaselineKind.RS, BaselineKind.SIIR, BaselineKind.SITR, BaselineKind.STTR):
        methods.append(baseline_method(kind, support, config.evaluation.seed))
    methods.append(golden_method(params, feats, GoldenMethod.NULL_QUERY, decode=decode))

    shots = config.evaluation.shots

    def run_one(m: MethodSpec):
        return evaluate_method(world, m, support, queries, shots)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            method_reports = list(pool.map(run_one, methods))
    else:
        method_reports = [run_one(m) for m in methods]

    report = EvalReport(
        shots=tuple(shots),
        methods=tuple(method_reports),
        seeds=(
            config.world.seed,
            config.data.seed,
            config.construction.seed,
            config.training.seed,
            config.evaluation.seed,
        ),
        config_digest=meta["config_digest"],
        world_digest=meta["world_digest"],
    )
    emit_report(report, run_dir / REPORT_JSON_FILE, "structured")
    emit_report(report, run_dir / REPORT_MD_FILE, "markdown")
    for m in method_reports:
        cells = ", ".join(f"{s}:{m.accuracy[s]:.3f}" for s in shots)
        print(f"{m.name:>10}  {cells}")
    return 0


def _cmd_gradcheck(config: RunConfig, run_dir: Path, threads: int) -> int:
    """Finite-difference suite on small models: both architectures, both
    freeze settings, 200 coordinates each."""
    rng = np.random.default_rng(7)
    fdim = 6
    n_support = 10
    support = SupportFeatures(
        img=rng.standard_normal((n_support, fdim)),
        txt=rng.standard_normal((n_support, fdim)),
        txt_mask=np.ones(n_support),
        feature_dim=fdim,
    )
    vocab = Vocabulary(n_support)
    k = 2
    b = 4
    tokens = np.empty((b, k + 3), dtype=np.int64)
    for i in range(b):
        picks = rng.choice(n_support, size=k, replace=False)
        tokens[i] = [vocab.bos, vocab.query, *picks, vocab.eos]
    q_img = rng.standard_normal((b, fdim))
    q_txt = rng.standard_normal((b, fdim))
    worst = 0.0
    for arch in ("transformer", "lstm"):
        for trainable in (True, False):
            cfg = ModelConfig(
                arch=arch,
                d_model=16,
                heads=2,
                layers=config.model.layers,
                adapter=True,
                encoder_trainable=trainable,
                k_max=config.model.k_max,
                task_mode=config.model.task_mode,
            )
            params = init_params(cfg, vocab, fdim, seed=11)
            err = gradient_check(params, support, tokens, q_img, q_txt, n_coords=200)
            worst = max(worst, err)
            print(f"gradcheck {arch:<11} encoder_trainable={trainable!s:<5} max rel err {err:.3e}")
    print(f"gradcheck worst-case max rel err {worst:.3e}")
    return 0 if worst < 1e-4 else 2


def _cmd_report(config: RunConfig, run_dir: Path, threads: int) -> int:
    report = load_report(_require(run_dir / REPORT_JSON_FILE))
    text = render_markdown(report)
    (run_dir / REPORT_MD_FILE).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


_HANDLERS = {
    "worldgen": _cmd_worldgen,
    "dataset": _cmd_dataset,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def run(command: str, config: RunConfig, run_dir: Path, threads: int = 1) -> int:
    """Run one pipeline stage with an already-validated config."""
    if command not in _HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    return _HANDLERS[command](config, run_dir, threads)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        config = load_config(args.config, args.overrides)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        violations = validate_config(config)
        if violations:
            for v in violations:
                print(f"invalid config: {v}", file=sys.stderr)
            return 1
        return run(args.command, config, args.run_dir, args.threads)
    except (ConfigError, SchemaError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ToolkitError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())
