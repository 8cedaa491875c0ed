"""Shot-by-shot evaluation of sequence-selection methods under the oracle.

A method is anything with a ``name`` that maps (query, shots) to an
ICDSequence.  The harness resolves ids against the supporting set, asks
the oracle for accuracy and log-confidence per shot count, and reports
three aggregates over the shot grid: the mean of the first two shots, the
mean of the rest, and the mean of all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .baselines import BaselineKind, retrieve
from .decoding import DecodeConfig, GoldenMethod, generate, golden_extract
from .errors import CapabilityError, ConfigError, SchemaError
from .model import ModelParams, SupportFeatures
from .records import (
    FORMAT_VERSION,
    REPORT_FORMAT,
    Example,
    ICDSequence,
    QuerySample,
    _read_doc,
    _write_doc,
)
from .scoring import confidence
from .world import SynthWorld, oracle_accuracy

COMPOSER_METHOD = "composer"
GOLDEN_METHOD = "golden"


@dataclass(frozen=True)
class MethodSpec:
    """A named sequence chooser: fn(query, shots) -> ICDSequence."""

    name: str
    fn: Callable[[QuerySample, int], ICDSequence]

    def __call__(self, query: QuerySample, shots: int) -> ICDSequence:
        return self.fn(query, shots)


def baseline_method(kind: BaselineKind, d_s: Sequence[Example], seed: int = 0) -> MethodSpec:
    """RS draws are seeded per (seed, query id, shots); similarity kinds
    are deterministic anyway."""

    def fn(query: QuerySample, shots: int) -> ICDSequence:
        return retrieve(kind, query, d_s, shots, seed=[seed, query.id, shots])

    return MethodSpec(name=kind.value, fn=fn)


def composer_method(
    params: ModelParams,
    support: SupportFeatures,
    decode: DecodeConfig = DecodeConfig(),
    mode: str | None = None,
    name: str = COMPOSER_METHOD,
) -> MethodSpec:
    def fn(query: QuerySample, shots: int) -> ICDSequence:
        return generate(params, support, query, shots, decode, mode)

    return MethodSpec(name=name, fn=fn)


def golden_method(
    params: ModelParams,
    support: SupportFeatures,
    method: GoldenMethod = GoldenMethod.NULL_QUERY,
    anchors: Sequence[QuerySample] | None = None,
    decode: DecodeConfig = DecodeConfig(),
    mode: str | None = None,
) -> MethodSpec:
    """One fixed sequence per shot count, shared by every query."""
    cache: dict[int, ICDSequence] = {}

    def fn(_query: QuerySample, shots: int) -> ICDSequence:
        if shots not in cache:
            cache[shots] = golden_extract(params, support, shots, method, anchors, decode, mode)
        return cache[shots]

    return MethodSpec(name=GOLDEN_METHOD, fn=fn)


def fixed_method(name: str, table: Mapping[tuple[int, int], ICDSequence]) -> MethodSpec:
    """Evaluate sequences already on disk, keyed by (query id, shots)."""

    def fn(query: QuerySample, shots: int) -> ICDSequence:
        key = (query.id, shots)
        if key not in table:
            raise SchemaError(f"no stored sequence for query {query.id} at {shots} shots")
        return table[key]

    return MethodSpec(name=name, fn=fn)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MethodReport:
    name: str
    shots: tuple[int, ...]
    accuracy: dict[int, float]
    log_confidence: dict[int, float]
    accuracy_aggregates: tuple[float, float, float] | None
    log_confidence_aggregates: tuple[float, float, float] | None


@dataclass(frozen=True)
class EvalReport:
    shots: tuple[int, ...]
    methods: tuple[MethodReport, ...]
    seeds: tuple[int, ...] = ()
    config_digest: str = ""
    world_digest: str = ""


def aggregate(per_shot: Mapping[int, float], shots: Sequence[int]) -> tuple[float, float, float]:
    """(mean of first two shots, mean of the rest, mean of all).

    Needs at least three shots so every bucket is non-empty, and a value
    for every shot in the grid.
    """
    shots = list(shots)
    if len(shots) < 3:
        raise ConfigError(f"aggregates need >= 3 shots, got {shots}")
    missing = [s for s in shots if s not in per_shot]
    if missing:
        raise SchemaError(f"per-shot values missing for shot(s) {missing}")
    vals = [per_shot[s] for s in shots]
    head = float(np.mean(vals[:2]))
    tail = float(np.mean(vals[2:]))
    return head, tail, float(np.mean(vals))


def _resolve(seq: ICDSequence, by_id: Mapping[int, Example]) -> list[Example]:
    try:
        return [by_id[i] for i in seq.icds]
    except KeyError as e:
        raise SchemaError(f"sequence id {e.args[0]} missing from the supporting set") from e


def evaluate_method(
    world: SynthWorld,
    method: MethodSpec,
    d_s: Sequence[Example],
    queries: Sequence[QuerySample],
    shots: Sequence[int],
) -> MethodReport:
    """Mean oracle accuracy and log-confidence per shot count.

    Capability errors from the method are re-raised with the query id
    attached.  Aggregates appear whenever the shot grid has >= 3 entries.
    """
    if not queries:
        raise ConfigError("evaluation needs at least one query")
    shots = tuple(int(s) for s in shots)
    by_id = {ex.id: ex for ex in d_s}
    acc: dict[int, float] = {}
    conf: dict[int, float] = {}
    for s in shots:
        hits = 0
        logps = []
        for q in queries:
            try:
                seq = method(q, s)
            except CapabilityError as e:
                raise CapabilityError(f"method {method.name!r}, query {q.id}: {e}") from e
            icds = _resolve(seq, by_id)
            if len(icds) != s:
                raise SchemaError(
                    f"method {method.name!r} returned {len(icds)} ICDs for {s} shots"
                )
            hits += oracle_accuracy(world, icds, q)
            logps.append(confidence(world, icds, q))
        acc[s] = hits / len(queries)
        conf[s] = float(np.mean(logps))
    agg_a = aggregate(acc, shots) if len(shots) >= 3 else None
    agg_c = aggregate(conf, shots) if len(shots) >= 3 else None
    return MethodReport(
        name=method.name,
        shots=shots,
        accuracy=acc,
        log_confidence=conf,
        accuracy_aggregates=agg_a,
        log_confidence_aggregates=agg_c,
    )


# ---------------------------------------------------------------------------
# random-order ablation


@dataclass(frozen=True)
class OrderAblation:
    original_accuracy: float
    permuted_accuracy: float
    delta: float  # original minus permuted
    evaluated: int
    skipped: int  # length < 2 sequences, unpermutable


def random_order_ablation(
    world: SynthWorld,
    d_s: Sequence[Example],
    queries: Sequence[QuerySample],
    generated: Mapping[int, ICDSequence],
    seed: int = 0,
) -> OrderAblation:
    """Accuracy of generated orderings vs one uniform shuffle per query.

    Permutations are seeded by (seed, query id).  Sequences shorter than
    two are counted as skipped and excluded from both means.
    """
    by_id = {ex.id: ex for ex in d_s}
    orig_hits = 0
    perm_hits = 0
    evaluated = 0
    skipped = 0
    for q in queries:
        if q.id not in generated:
            raise SchemaError(f"no generated sequence for query {q.id}")
        seq = generated[q.id]
        if len(seq.icds) < 2:
            skipped += 1
            continue
        rng = np.random.default_rng([seed, q.id])
        perm = rng.permutation(len(seq.icds))
        shuffled = tuple(seq.icds[int(i)] for i in perm)
        orig_hits += oracle_accuracy(world, _resolve(seq, by_id), q)
        perm_hits += oracle_accuracy(
            world, _resolve(ICDSequence(shuffled, seq.score), by_id), q
        )
        evaluated += 1
    if evaluated == 0:
        raise ConfigError("random-order ablation had nothing to evaluate")
    orig = orig_hits / evaluated
    perm = perm_hits / evaluated
    return OrderAblation(
        original_accuracy=orig,
        permuted_accuracy=perm,
        delta=orig - perm,
        evaluated=evaluated,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# report files


def report_to_dict(report: EvalReport) -> dict:
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "shots": list(report.shots),
        "seeds": list(report.seeds),
        "config_digest": report.config_digest,
        "world_digest": report.world_digest,
        "methods": [
            {
                "name": m.name,
                "per_shot": [
                    {
                        "shot": s,
                        "accuracy": m.accuracy[s],
                        "log_confidence": m.log_confidence[s],
                    }
                    for s in m.shots
                ],
                "accuracy_aggregates": (
                    None if m.accuracy_aggregates is None else list(m.accuracy_aggregates)
                ),
                "log_confidence_aggregates": (
                    None
                    if m.log_confidence_aggregates is None
                    else list(m.log_confidence_aggregates)
                ),
            }
            for m in report.methods
        ],
    }


def report_from_dict(doc: Mapping) -> EvalReport:
    methods = []
    for m in doc["methods"]:
        shots = tuple(int(row["shot"]) for row in m["per_shot"])
        acc = {int(r["shot"]): float(r["accuracy"]) for r in m["per_shot"]}
        conf = {int(r["shot"]): float(r["log_confidence"]) for r in m["per_shot"]}
        agg_a = m.get("accuracy_aggregates")
        agg_c = m.get("log_confidence_aggregates")
        methods.append(
            MethodReport(
                name=m["name"],
                shots=shots,
                accuracy=acc,
                log_confidence=conf,
                accuracy_aggregates=None if agg_a is None else tuple(agg_a),
                log_confidence_aggregates=None if agg_c is None else tuple(agg_c),
            )
        )
    return EvalReport(
        shots=tuple(int(s) for s in doc["shots"]),
        methods=tuple(methods),
        seeds=tuple(int(s) for s in doc.get("seeds", [])),
        config_digest=doc.get("config_digest", ""),
        world_digest=doc.get("world_digest", ""),
    )


def save_report(report: EvalReport, path) -> None:
    _write_doc(path, report_to_dict(report))


def load_report(path) -> EvalReport:
    return report_from_dict(_read_doc(path, REPORT_FORMAT))


def render_markdown(report: EvalReport) -> str:
    """A fixed-layout grid: one row per method, columns per shot count plus
    the three aggregates, accuracy first, log-confidence below."""
    shot_cols = [str(s) for s in report.shots]
    agg_cols = ["Avg: first two", "Avg: rest", "Avg: all"]
    lines = []

    def table(title: str, values, aggs) -> None:
        lines.append(f"## {title}")
        lines.append("")
        lines.append("| Method | " + " | ".join(shot_cols + agg_cols) + " |")
        lines.append("|" + " --- |" * (1 + len(shot_cols) + len(agg_cols)))
        for m in report.methods:
            cells = [f"{values(m)[s]:.4f}" for s in report.shots]
            a = aggs(m)
            cells += ["-", "-", "-"] if a is None else [f"{x:.4f}" for x in a]
            lines.append(f"| {m.name} | " + " | ".join(cells) + " |")
        lines.append("")

    lines.append("# Evaluation report")
    lines.append("")
    lines.append(f"- shots: {list(report.shots)}")
    lines.append(f"- seeds: {list(report.seeds)}")
    lines.append(f"- config digest: `{report.config_digest}`")
    lines.append(f"- world digest: `{report.world_digest}`")
    lines.append("")
    table("Accuracy", lambda m: m.accuracy, lambda m: m.accuracy_aggregates)
    table(
        "Log-confidence",
        lambda m: m.log_confidence,
        lambda m: m.log_confidence_aggregates,
    )
    return "\n".join(lines)


def emit_report(report: EvalReport, path, fmt: str = "structured") -> None:
    """Write the report as JSON (``structured``) or a markdown grid."""
    if fmt == "structured":
        save_report(report, path)
    elif fmt == "markdown":
        from pathlib import Path

        Path(path).write_text(render_markdown(report) + "\n", encoding="utf-8")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
