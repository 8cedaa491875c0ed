"""Core data records, run configuration, and file formats.

Every artifact the toolkit writes is plain text: line-delimited JSON for
datasets and histories, a single JSON document for configs, worlds,
checkpoints, and reports.  Floats survive a round trip bit-exactly because
``json`` renders them with shortest round-trip decimals.  Every file starts
with (or contains) a ``format`` name and integer ``version``; readers fail
loudly on anything they do not recognize.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

FORMAT_VERSION = 1

EXAMPLES_FORMAT = "icdlm/examples"
CONSTRUCTION_FORMAT = "icdlm/construction"
CHECKPOINT_FORMAT = "icdlm/checkpoint"
WORLD_FORMAT = "icdlm/world"
GENERATION_FORMAT = "icdlm/generation"
LOSS_HISTORY_FORMAT = "icdlm/loss_history"
REPORT_FORMAT = "icdlm/report"


# ---------------------------------------------------------------------------
# data records


@dataclass(frozen=True, eq=False)
class Example:
    """One supporting-set entry: image features, optional text features, label.

    ``label`` is a tuple of class-token integers (generated worlds emit a
    single token).  ``task`` is the hidden mixture component the example was
    drawn from; it exists for analysis and never feeds the model or scorer.
    """

    id: int
    img_feat: np.ndarray
    txt_feat: np.ndarray | None
    label: tuple[int, ...]
    task: int


# A query is shaped exactly like an example; the alias keeps signatures honest.
QuerySample = Example


@dataclass(frozen=True)
class ICDSequence:
    """An ordered tuple of supporting-set ids plus a log-domain score."""

    icds: tuple[int, ...]
    score: float


@dataclass(frozen=True)
class ConstructionRecord:
    """An anchor id and the top sequences the builder kept for it."""

    anchor_id: int
    sequences: tuple[ICDSequence, ...]


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def make_example(
    id: int,
    img_feat,
    txt_feat=None,
    label: Sequence[int] = (0,),
    task: int = -1,
) -> Example:
    """Build an Example with read-only float64 feature arrays."""
    txt = None if txt_feat is None else _readonly(txt_feat)
    return Example(
        id=int(id),
        img_feat=_readonly(img_feat),
        txt_feat=txt,
        label=tuple(int(t) for t in label),
        task=int(task),
    )


# ---------------------------------------------------------------------------
# run configuration

VALID_STRATEGIES = ("random", "sim_image", "sim_text")
VALID_SCORERS = ("confidence", "accuracy")
VALID_ARCHS = ("transformer", "lstm")
VALID_DECODES = ("greedy", "beam")
VALID_TASK_MODES = ("ic", "vqa")


@dataclass(frozen=True)
class WorldConfig:
    t: int = 8
    c: int = 4
    f: int = 16
    sigma: float = 0.9
    gamma: float = 0.85
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    train_count: int = 512
    test_count: int = 256
    seed: int = 0


@dataclass(frozen=True)
class ConstructionConfig:
    n_anchors: int = 256
    m: int = 32
    strategy: str = "random"
    k: int = 2
    b: int = 5
    scorer: str = "confidence"
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "transformer"
    d_model: int = 128
    heads: int = 4
    layers: int = 2
    ffn_mult: int = 4
    adapter: bool = False
    encoder_trainable: bool = True
    k_max: int = 8
    task_mode: str = "vqa"


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    warmup_fraction: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    shots: tuple[int, ...] = (1, 2, 3, 4, 6, 8)
    decode: str = "beam"
    beam_width: int = 3
    no_repeat: bool = True
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    construction: ConstructionConfig = field(default_factory=ConstructionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(raw: Mapping) -> "RunConfig":
        return _config_from_dict(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        """Return a copy with every stage seed replaced by ``seed``."""
        return RunConfig(
            world=dataclasses.replace(self.world, seed=seed),
            data=dataclasses.replace(self.data, seed=seed),
            construction=dataclasses.replace(self.construction, seed=seed),
            model=self.model,
            training=dataclasses.replace(self.training, seed=seed),
            evaluation=dataclasses.replace(self.evaluation, seed=seed),
        )

    def validate(self) -> list[str]:
        """Return a list of human-readable invariant violations (empty = ok)."""
        v: list[str] = []
        w, d, co, mo, tr, ev = (
            self.world,
            self.data,
            self.construction,
            self.model,
            self.training,
            self.evaluation,
        )
        for name, val in (
            ("world.t", w.t),
            ("world.c", w.c),
            ("world.f", w.f),
            ("data.train_count", d.train_count),
            ("data.test_count", d.test_count),
            ("construction.n_anchors", co.n_anchors),
            ("construction.m", co.m),
            ("construction.k", co.k),
            ("construction.b", co.b),
            ("model.d_model", mo.d_model),
            ("model.heads", mo.heads),
            ("model.layers", mo.layers),
            ("model.ffn_mult", mo.ffn_mult),
            ("model.k_max", mo.k_max),
            ("training.epochs", tr.epochs),
            ("training.batch_size", tr.batch_size),
            ("evaluation.beam_width", ev.beam_width),
        ):
            if val < 1:
                v.append(f"{name} must be >= 1, got {val}")
        if not w.sigma > 0:
            v.append(f"world.sigma must be > 0, got {w.sigma}")
        if not 0 < w.gamma <= 1:
            v.append(f"world.gamma must lie in (0, 1], got {w.gamma}")
        for name, val in (
            ("world.seed", w.seed),
            ("data.seed", d.seed),
            ("construction.seed", co.seed),
            ("training.seed", tr.seed),
            ("evaluation.seed", ev.seed),
        ):
            if val < 0:
                v.append(f"{name} must be >= 0, got {val}")
        if co.strategy not in VALID_STRATEGIES:
            v.append(f"construction.strategy must be one of {VALID_STRATEGIES}, got {co.strategy!r}")
        if co.scorer not in VALID_SCORERS:
            v.append(f"construction.scorer must be one of {VALID_SCORERS}, got {co.scorer!r}")
        if mo.arch not in VALID_ARCHS:
            v.append(f"model.arch must be one of {VALID_ARCHS}, got {mo.arch!r}")
        if mo.task_mode not in VALID_TASK_MODES:
            v.append(f"model.task_mode must be one of {VALID_TASK_MODES}, got {mo.task_mode!r}")
        if ev.decode not in VALID_DECODES:
            v.append(f"evaluation.decode must be one of {VALID_DECODES}, got {ev.decode!r}")
        if mo.d_model % mo.heads != 0:
            v.append(f"model.d_model ({mo.d_model}) must be divisible by model.heads ({mo.heads})")
        if co.n_anchors >= d.train_count:
            v.append(
                f"construction.n_anchors ({co.n_anchors}) must be < data.train_count ({d.train_count})"
            )
        else:
            support = d.train_count - co.n_anchors
            if co.m > support:
                v.append(
                    f"construction.m ({co.m}) exceeds the supporting-set size ({support})"
                )
        if co.k > co.m:
            v.append(f"construction.k ({co.k}) must be <= construction.m ({co.m})")
        if co.k > mo.k_max:
            v.append(f"construction.k ({co.k}) must be <= model.k_max ({mo.k_max})")
        if max(ev.shots, default=0) > mo.k_max:
            v.append(f"evaluation.shots exceed model.k_max ({mo.k_max})")
        if list(ev.shots) != sorted(set(ev.shots)) or any(s < 1 for s in ev.shots):
            v.append(f"evaluation.shots must be strictly increasing positive ints, got {ev.shots}")
        if not tr.lr > 0:
            v.append(f"training.lr must be > 0, got {tr.lr}")
        if tr.weight_decay < 0:
            v.append(f"training.weight_decay must be >= 0, got {tr.weight_decay}")
        if not 0 <= tr.warmup_fraction <= 1:
            v.append(f"training.warmup_fraction must lie in [0, 1], got {tr.warmup_fraction}")
        return v


_SECTION_TYPES = {
    "world": WorldConfig,
    "data": DataConfig,
    "construction": ConstructionConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "evaluation": EvalConfig,
}


def _config_from_dict(raw: Mapping) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sub = raw.get(name, {})
        if not isinstance(sub, Mapping):
            raise ConfigError(f"config section {name!r} must be an object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        bad = set(sub) - set(fields)
        if bad:
            raise ConfigError(f"unknown key(s) in config section {name!r}: {sorted(bad)}")
        kwargs = {}
        for key, val in sub.items():
            if key == "shots":
                val = tuple(int(s) for s in val)
            kwargs[key] = val
        sections[name] = cls(**kwargs)
    return RunConfig(**sections)


# ---------------------------------------------------------------------------
# canonical JSON and digests


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_of(obj) -> str:
    """First 16 hex chars of the sha256 of the canonical JSON rendering."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def config_digest(config: RunConfig) -> str:
    return digest_of(config.to_dict())


def world_digest_of(world_cfg: WorldConfig) -> str:
    return digest_of(dataclasses.asdict(world_cfg))


# ---------------------------------------------------------------------------
# line-delimited files


def _write_lines(path, lines: Iterable[str]) -> None:
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _parse_line(line: str, lineno: int, path) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {lineno}: malformed JSON: {e.msg}") from e
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: line {lineno}: expected a JSON object")
    return obj


def _read_header(path, expected_format: str) -> tuple[dict, list[tuple[int, dict]]]:
    raw = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in raw.split("\n") if ln.strip() != ""]
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = _parse_line(lines[0], 1, path)
    if header.get("format") != expected_format:
        raise SchemaError(
            f"{path}: expected format {expected_format!r}, found {header.get('format')!r}"
        )
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError(
            f"{path}: unsupported {expected_format} version {header.get('version')!r}"
        )
    rows = [(i + 2, _parse_line(ln, i + 2, path)) for i, ln in enumerate(lines[1:])]
    return header, rows


def _float_list(arr: np.ndarray | None):
    return None if arr is None else [float(x) for x in np.asarray(arr).ravel()]


def serialize_examples(examples: Sequence[Example], path, meta: Mapping | None = None) -> None:
    """Write examples as line-delimited JSON with a header row."""
    fdim = int(len(examples[0].img_feat)) if examples else None
    header: dict = {
        "format": EXAMPLES_FORMAT,
        "version": FORMAT_VERSION,
        "count": len(examples),
        "feature_dim": fdim,
    }
    if meta:
        header.update(meta)
    lines = [canonical_json(header)]
    for ex in examples:
        lines.append(
            canonical_json(
                {
                    "id": ex.id,
                    "img_feat": _float_list(ex.img_feat),
                    "txt_feat": _float_list(ex.txt_feat),
                    "label": list(ex.label),
                    "task": ex.task,
                }
            )
        )
    _write_lines(path, lines)


def deserialize_examples(path) -> tuple[list[Example], dict]:
    """Read an examples file; returns (examples, header)."""
    header, rows = _read_header(path, EXAMPLES_FORMAT)
    fdim = header.get("feature_dim")
    out: list[Example] = []
    seen_ids: set[int] = set()
    for lineno, obj in rows:
        missing = {"id", "img_feat", "txt_feat", "label", "task"} - set(obj)
        if missing:
            raise SchemaError(f"{path}: line {lineno}: missing field(s) {sorted(missing)}")
        img = obj["img_feat"]
        if fdim is not None and len(img) != fdim:
            raise SchemaError(
                f"{path}: line {lineno}: img_feat has length {len(img)}, header says {fdim}"
            )
        txt = obj["txt_feat"]
        if txt is not None and fdim is not None and len(txt) != fdim:
            raise SchemaError(
                f"{path}: line {lineno}: txt_feat has length {len(txt)}, header says {fdim}"
            )
        label = obj["label"]
        if not label:
            raise SchemaError(f"{path}: line {lineno}: empty label")
        if obj["id"] in seen_ids:
            raise SchemaError(f"{path}: line {lineno}: duplicate id {obj['id']}")
        seen_ids.add(obj["id"])
        out.append(make_example(obj["id"], img, txt, label, obj["task"]))
    if header.get("count") != len(out):
        raise SchemaError(
            f"{path}: header count {header.get('count')} != {len(out)} record lines"
        )
    return out, header


def write_construction_records(
    records: Sequence[ConstructionRecord], path, meta: Mapping | None = None
) -> None:
    header: dict = {
        "format": CONSTRUCTION_FORMAT,
        "version": FORMAT_VERSION,
        "count": len(records),
    }
    if meta:
        header.update(meta)
    lines = [canonical_json(header)]
    for rec in records:
        lines.append(
            canonical_json(
                {
                    "anchor_id": rec.anchor_id,
                    "sequences": [
                        {"icds": list(s.icds), "score": float(s.score)} for s in rec.sequences
                    ],
                }
            )
        )
    _write_lines(path, lines)


def read_construction_records(path) -> tuple[list[ConstructionRecord], dict]:
    header, rows = _read_header(path, CONSTRUCTION_FORMAT)
    out = []
    for lineno, obj in rows:
        if "anchor_id" not in obj or "sequences" not in obj:
            raise SchemaError(f"{path}: line {lineno}: missing anchor_id or sequences")
        seqs = tuple(
            ICDSequence(icds=tuple(int(i) for i in s["icds"]), score=float(s["score"]))
            for s in obj["sequences"]
        )
        out.append(ConstructionRecord(anchor_id=int(obj["anchor_id"]), sequences=seqs))
    if header.get("count") != len(out):
        raise SchemaError(f"{path}: header count {header.get('count')} != {len(out)} records")
    return out, header


# ---------------------------------------------------------------------------
# JSON documents (checkpoint and friends)


def _write_doc(path, doc: Mapping) -> None:
    Path(path).write_text(canonical_json(doc) + "\n", encoding="utf-8")


def _read_doc(path, expected_format: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object")
    if doc.get("format") != expected_format:
        raise SchemaError(
            f"{path}: expected format {expected_format!r}, found {doc.get('format')!r}"
        )
    if doc.get("version") != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported {expected_format} version {doc.get('version')!r}")
    return doc


def checkpoint_save(tensors: Mapping[str, np.ndarray], meta: Mapping, path) -> None:
    """Write named tensors as shape + flat row-major decimal arrays."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "meta": dict(meta),
        "tensors": {
            name: {
                "shape": list(arr.shape),
                "data": [float(x) for x in np.asarray(arr, dtype=np.float64).ravel()],
            }
            for name, arr in sorted(tensors.items())
        },
    }
    _write_doc(path, doc)


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = _read_doc(path, CHECKPOINT_FORMAT)
    tensors = {}
    for name, payload in doc.get("tensors", {}).items():
        shape = tuple(int(s) for s in payload["shape"])
        data = np.asarray(payload["data"], dtype=np.float64)
        want = int(np.prod(shape)) if shape else 1
        if data.size != want:
            raise SchemaError(
                f"{path}: tensor {name!r} has {data.size} values, shape {shape} wants {want}"
            )
        tensors[name] = data.reshape(shape)
    return tensors, doc.get("meta", {})
