"""Multi-scenario schemas, synthetic data with a planted label model,
user-level aggregation and the line-delimited dataset format.

Dataset file layout (UTF-8, one JSON object per line)::

    {"format": "mtfm-dataset", "version": 1, "scenarios": [...],
     "hist_schemas": [...], "rt_schemas": [...]}
    {"user_id": 0, "hist": [...], "rt": [...], "exposures": [...]}
    ...

A sequence entry is ``{"seq": id, "events": [[timestamp, [ids...]], ...]}``.
An exposure is ``{"scenario": s, "ts": t, "user": [...], "cross": [...],
"item": [...], "labels": {"ctr": 0, ...}}``.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

import numpy as np

from mtfm.config import GeneratorConfig
from mtfm.errors import ConfigurationError, DatasetParseError, IntegrityError

FORMAT_NAME = "mtfm-dataset"
FORMAT_VERSION = 1

FUNNEL = ("ctr", "ctcvr")


@dataclass(frozen=True)
class ScenarioSchema:
    scenario_id: int
    user_feature_vocabs: tuple[int, ...]
    cross_feature_vocabs: tuple[int, ...]
    item_feature_vocabs: tuple[int, ...]
    tasks: tuple[str, ...]
    name: str = ""

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigurationError(f"scenario {self.scenario_id} declares no tasks")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigurationError(f"scenario {self.scenario_id} has duplicate tasks")
        for vocab in self.user_feature_vocabs + self.cross_feature_vocabs + self.item_feature_vocabs:
            if vocab < 2:
                raise ConfigurationError(f"scenario {self.scenario_id}: vocab sizes must be >= 2")

    @property
    def n_slots(self) -> int:
        return len(self.user_feature_vocabs) + len(self.cross_feature_vocabs) + len(self.item_feature_vocabs)


@dataclass(frozen=True)
class SequenceSchema:
    seq_id: int
    feature_vocabs: tuple[int, ...]
    name: str = ""

    def validate(self) -> None:
        if not self.feature_vocabs or min(self.feature_vocabs) < 2:
            raise ConfigurationError(f"sequence {self.seq_id}: needs >= 1 slot with vocab >= 2")


@dataclass(frozen=True)
class FeatureSpace:
    """Every schema a dataset (and a model trained on it) knows about."""

    scenarios: tuple[ScenarioSchema, ...]
    hist_schemas: tuple[SequenceSchema, ...]
    rt_schemas: tuple[SequenceSchema, ...]

    def __post_init__(self):
        ids = [s.scenario_id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("scenario ids must be unique")
        for kind, schemas in (("hist", self.hist_schemas), ("rt", self.rt_schemas)):
            if [s.seq_id for s in schemas] != list(range(len(schemas))):
                raise ConfigurationError(f"{kind} sequence ids must be 0..n-1 in order")
        for s in (*self.scenarios, *self.hist_schemas, *self.rt_schemas):
            s.validate()

    def scenario(self, scenario_id: int) -> ScenarioSchema:
        for s in self.scenarios:
            if s.scenario_id == scenario_id:
                return s
        raise IntegrityError(f"unknown scenario {scenario_id}")

    @property
    def scenario_ids(self) -> tuple[int, ...]:
        return tuple(s.scenario_id for s in self.scenarios)

    def restricted(self, scenario_id: int) -> FeatureSpace:
        return FeatureSpace((self.scenario(scenario_id),), self.hist_schemas, self.rt_schemas)


@dataclass(frozen=True)
class BehaviorEvent:
    item_features: tuple[int, ...]
    timestamp: int


@dataclass(frozen=True)
class Exposure:
    scenario_id: int
    user_features: tuple[int, ...]
    cross_features: tuple[int, ...]
    item_features: tuple[int, ...]
    timestamp: int
    labels: Mapping[str, int] = field(default_factory=dict)

    def fingerprint(self) -> str:
        return json.dumps(_exposure_to_json(self), sort_keys=True, separators=(",", ":"))


Sequences = tuple[tuple[int, tuple[BehaviorEvent, ...]], ...]


@dataclass(frozen=True)
class UserSample:
    user_id: int
    historical_sequences: Sequences
    realtime_sequences: Sequences
    exposures: tuple[Exposure, ...]


@dataclass(frozen=True)
class InferenceRequest:
    user_id: int
    scenario_id: int
    historical_sequences: Sequences
    realtime_sequences: Sequences
    candidates: tuple[Exposure, ...]

    def as_sample(self) -> UserSample:
        """View the request as a label-free sample whose exposures are the candidates."""
        return UserSample(self.user_id, self.historical_sequences, self.realtime_sequences, self.candidates)


@dataclass
class Dataset:
    space: FeatureSpace
    samples: list[UserSample]

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.space == other.space and self.samples == other.samples

    def __len__(self):
        return len(self.samples)


# --------------------------------------------------------------------------
# validation


def _check_ids(ids: Sequence[int], vocabs: Sequence[int], what: str) -> None:
    if len(ids) != len(vocabs):
        raise IntegrityError(f"{what}: expected {len(vocabs)} features, got {len(ids)}")
    for i, (v, n) in enumerate(zip(ids, vocabs)):
        if not 0 <= v < n:
            raise IntegrityError(f"{what}: slot {i} id {v} outside vocab [0, {n})")


def validate_exposure(exp: Exposure, space: FeatureSpace, *, labelled: bool = True) -> None:
    schema = space.scenario(exp.scenario_id)
    where = f"exposure(scenario={exp.scenario_id}, ts={exp.timestamp})"
    _check_ids(exp.user_features, schema.user_feature_vocabs, where + " user")
    _check_ids(exp.cross_features, schema.cross_feature_vocabs, where + " cross")
    _check_ids(exp.item_features, schema.item_feature_vocabs, where + " item")
    if exp.timestamp < 0:
        raise IntegrityError(f"{where}: negative timestamp")
    if labelled:
        missing = set(schema.tasks) - set(exp.labels)
        if missing:
            raise IntegrityError(f"{where}: missing labels {sorted(missing)}")
    extra = set(exp.labels) - set(schema.tasks)
    if extra:
        raise IntegrityError(f"{where}: labels for undeclared tasks {sorted(extra)}")
    for task, y in exp.labels.items():
        if y not in (0, 1):
            raise IntegrityError(f"{where}: label {task}={y} is not binary")
    if all(t in exp.labels for t in FUNNEL) and exp.labels["ctcvr"] > exp.labels["ctr"]:
        raise IntegrityError(f"{where}: ctcvr=1 without ctr=1")


def _validate_sequences(seqs: Sequences, schemas: Sequence[SequenceSchema], what: str) -> None:
    seen = set()
    for seq_id, events in seqs:
        if not 0 <= seq_id < len(schemas):
            raise IntegrityError(f"{what}: unknown sequence schema {seq_id}")
        if seq_id in seen:
            raise IntegrityError(f"{what}: sequence {seq_id} listed twice")
        seen.add(seq_id)
        prev = -1
        for ev in events:
            _check_ids(ev.item_features, schemas[seq_id].feature_vocabs, f"{what}[{seq_id}]")
            if ev.timestamp < 0:
                raise IntegrityError(f"{what}[{seq_id}]: negative timestamp")
            if ev.timestamp < prev:
                raise IntegrityError(f"{what}[{seq_id}]: events not sorted by timestamp")
            prev = ev.timestamp


def validate_sample(sample: UserSample, space: FeatureSpace, *, labelled: bool = True) -> None:
    """Raise IntegrityError unless every UserSample invariant holds."""
    if not sample.exposures:
        raise IntegrityError(f"user {sample.user_id}: sample without exposures")
    _validate_sequences(sample.historical_sequences, space.hist_schemas, "hist")
    _validate_sequences(sample.realtime_sequences, space.rt_schemas, "rt")
    for exp in sample.exposures:
        validate_exposure(exp, space, labelled=labelled)
    first = min(e.timestamp for e in sample.exposures)
    for seq_id, events in sample.historical_sequences:
        if events and events[-1].timestamp >= first:
            raise IntegrityError(
                f"user {sample.user_id}: historical sequence {seq_id} reaches into the exposure window"
            )


def validate_request(request: InferenceRequest, space: FeatureSpace) -> None:
    if not request.candidates:
        raise IntegrityError("request without candidates")
    scenarios = {c.scenario_id for c in request.candidates}
    if scenarios != {request.scenario_id}:
        raise IntegrityError(f"request mixes scenarios {sorted(scenarios | {request.scenario_id})}")
    if len({c.timestamp for c in request.candidates}) != 1:
        raise IntegrityError("request candidates must share one timestamp")
    validate_sample(request.as_sample(), space, labelled=False)


# --------------------------------------------------------------------------
# synthetic generation

_TEMPLATES = (
    ("HP", (6, 4, 4, 4), (8, 6, 4), (16, 5, 6, 3), ("ctr", "ctcvr")),
    ("SQS", (6, 4, 4), (8, 5), (16, 4, 6), ("ctr", "ctcvr", "imd", "write")),
    ("PHF", (6, 4), (8,), (16, 7), ("ctr", "ctcvr")),
)
N_CATEGORIES = 16
AFFINITY_BINS = 8


def default_space(n_scenarios: int, n_items: int) -> FeatureSpace:
    """HP / SQS / PHF style schemas (cycled when more than three are asked for).

    Item slot 0 is always the item id; slot 1 the item category.
    Cross slot 0 is a bucketed user-item affinity.
    """
    scenarios = []
    for s in range(n_scenarios):
        name, user, cross, item_tail, tasks = _TEMPLATES[s % len(_TEMPLATES)]
        if s >= len(_TEMPLATES):
            name = f"S{s}"
        scenarios.append(ScenarioSchema(s, user, cross, (n_items,) + item_tail, tasks, name))
    hist = (
        SequenceSchema(0, (n_items, N_CATEGORIES), "orders"),
        SequenceSchema(1, (n_items, N_CATEGORIES, n_scenarios + 1), "clicks"),
    )
    rt = (SequenceSchema(0, (n_items, N_CATEGORIES, 3), "recent"),)
    return FeatureSpace(tuple(scenarios), hist, rt)


def _bucket(x: np.ndarray | float, n: int, scale: float) -> np.ndarray:
    edges = np.array([NormalDist(0.0, scale).inv_cdf(q / n) for q in range(1, n)])
    return np.searchsorted(edges, x)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class _World:
    """Global latent state shared by all users of one generated dataset."""

    space: FeatureSpace
    item_latent: np.ndarray  # (n_items, d)
    item_category: np.ndarray  # (n_items,)
    item_attrs: dict[int, np.ndarray]  # scenario -> (n_items, n_tail_slots)
    user_proj: dict[int, np.ndarray]  # scenario -> (n_user_slots - 1, d)
    pref: dict[int, np.ndarray]  # scenario -> (d,) scenario-specific weights
    bias: dict[int, float]
    cfg: GeneratorConfig

    def affinity(self, s: int, u: np.ndarray, items: np.ndarray) -> np.ndarray:
        d = self.item_latent.shape[1]
        return (self.item_latent[items] @ (u * self.pref[s])) / math.sqrt(d)


def _build_world(cfg: GeneratorConfig) -> _World:
    rng = np.random.default_rng([cfg.seed, 0])
    d = cfg.latent_dim
    space = default_space(cfg.n_scenarios, cfg.n_items)
    centers = rng.normal(size=(N_CATEGORIES, d))
    category = rng.integers(0, N_CATEGORIES, size=cfg.n_items)
    item_latent = centers[category] + 0.5 * rng.normal(size=(cfg.n_items, d))
    attrs, proj, pref = {}, {}, {}
    for sch in space.scenarios:
        tail = sch.item_feature_vocabs[2:]
        attrs[sch.scenario_id] = np.stack(
            [rng.integers(0, v, size=cfg.n_items) for v in tail], axis=1
        ) if tail else np.zeros((cfg.n_items, 0), dtype=np.int64)
        p = rng.normal(size=(max(len(sch.user_feature_vocabs) - 1, 0), d))
        proj[sch.scenario_id] = p / np.linalg.norm(p, axis=1, keepdims=True).clip(1e-12)
        pref[sch.scenario_id] = 1.0 + 0.3 * rng.normal(size=d)
    world = _World(space, item_latent, category, attrs, proj, pref, {}, cfg)
    # Calibrate per-scenario biases so the CTR marginal hits positive_rate.
    cal = np.random.default_rng([cfg.seed, 2])
    u = cal.normal(size=(4096, d))
    items = cal.integers(0, cfg.n_items, size=4096)
    eps = cal.normal(size=4096)
    for sch in space.scenarios:
        s = sch.scenario_id
        base = cfg.signal * np.einsum("nd,nd->n", item_latent[items], u * pref[s]) / math.sqrt(d)
        base = base + cfg.noise * eps
        lo, hi = -30.0, 30.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if _sigmoid(base + mid).mean() < cfg.positive_rate:
                lo = mid
            else:
                hi = mid
        world.bias[s] = 0.5 * (lo + hi)
    return world


def _gen_sequence(rng, world: _World, u, length: int, t_lo: int, t_hi: int, extra) -> tuple[BehaviorEvent, ...]:
    if length == 0:
        return ()
    d = world.item_latent.shape[1]
    logits = 1.5 * (world.item_latent @ u) / math.sqrt(d)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    items = rng.choice(len(p), size=length, p=p)
    ts = np.sort(rng.integers(t_lo, t_hi, size=length))
    events = []
    for item, t in zip(items, ts):
        feats = (int(item), int(world.item_category[item])) + tuple(int(rng.integers(0, v)) for v in extra)
        events.append(BehaviorEvent(feats, int(t)))
    return tuple(events)


def _gen_user(cfg: GeneratorConfig, world: _World, user_id: int):
    """Return (shared hist/rt sequences, list of exposures) for one user."""
    rng = np.random.default_rng([cfg.seed, 1, user_id])
    d = cfg.latent_dim
    space = world.space
    u = rng.normal(size=d)
    w0, w1 = cfg.window_start, cfg.window_start + cfg.window_len
    hist = []
    for sch in space.hist_schemas:
        n = int(rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
        hist.append((sch.seq_id, _gen_sequence(rng, world, u, n, 0, w0, sch.feature_vocabs[2:])))
    rt = []
    for sch in space.rt_schemas:
        n = int(rng.integers(cfg.rt_len_min, cfg.rt_len_max + 1))
        rt.append((sch.seq_id, _gen_sequence(rng, world, u, n, w0 - cfg.window_len // 2, w1, sch.feature_vocabs[2:])))

    n_exp = int(rng.integers(cfg.exposures_min, cfg.exposures_max + 1))
    scen = rng.choice(space.scenario_ids, size=n_exp)
    exposures = []
    for s in scen:
        s = int(s)
        sch = space.scenario(s)
        item = int(rng.integers(0, cfg.n_items))
        aff = float(world.affinity(s, u, np.array([item]))[0])
        user_feats = (int(rng.integers(0, sch.user_feature_vocabs[0])),) + tuple(
            int(_bucket(float(world.user_proj[s][j] @ u), v, 1.0))
            for j, v in enumerate(sch.user_feature_vocabs[1:])
        )
        cross_feats = (int(_bucket(aff + 0.5 * rng.normal(), sch.cross_feature_vocabs[0], 1.3)),) + tuple(
            int(rng.integers(0, v)) for v in sch.cross_feature_vocabs[1:]
        )
        item_feats = (item, int(world.item_category[item])) + tuple(int(a) for a in world.item_attrs[s][item])
        ctr_logit = cfg.signal * aff + world.bias[s] + cfg.noise * rng.normal()
        click = int(rng.random() < _sigmoid(ctr_logit))
        conv = int(rng.random() < _sigmoid(0.5 * cfg.signal * aff - 0.5 + cfg.noise * rng.normal()))
        labels = {"ctr": click, "ctcvr": click * conv}
        if "write" in sch.tasks:
            labels["write"] = labels["ctcvr"] * int(rng.random() < 0.7)
        if "imd" in sch.tasks:
            labels["imd"] = labels.get("write", labels["ctcvr"]) * int(rng.random() < 0.5)
        labels = {t: labels.get(t, int(rng.random() < cfg.positive_rate)) for t in sch.tasks}
        ts = int(rng.integers(w0, w1))
        exposures.append(Exposure(s, user_feats, cross_feats, item_feats, ts, labels))
    return (tuple(hist), tuple(rt)), exposures


def generate_dataset(config: GeneratorConfig, seed: int | None = None) -> Dataset:
    """Generate a reproducible synthetic dataset.

    Users are generated independently from per-user derived seeds, emitted as a
    raw exposure stream interleaved by time, and packed by :func:`aggregate_users`.
    """
    if seed is not None:
        config = GeneratorConfig(**{**config.__dict__, "seed": seed})
    config.validate()
    world = _build_world(config)
    store: dict[int, tuple[Sequences, Sequences]] = {}
    stream: list[tuple[int, Exposure]] = []
    for user_id in range(config.n_users):
        store[user_id], exposures = _gen_user(config, world, user_id)
        stream.extend((user_id, e) for e in exposures)
    stream.sort(key=lambda ue: (ue[1].timestamp, ue[0]))
    samples = aggregate_users(stream, store, world.space)
    return Dataset(world.space, samples)


# --------------------------------------------------------------------------
# aggregation


def aggregate_users(
    raw_exposure_stream: Iterable[tuple[int, Exposure]],
    shared_store: Mapping[int, tuple[Sequences, Sequences]],
    space: FeatureSpace,
) -> list[UserSample]:
    """Pack a raw exposure stream into one UserSample per user.

    Scenario-specific records are first grouped per (scenario, user), then
    merged across scenarios per user, then joined with the user's shared
    historical/realtime sequences.
    """
    known = set(space.scenario_ids)
    per_scenario: dict[int, dict[int, list[Exposure]]] = defaultdict(lambda: defaultdict(list))
    for user_id, exp in raw_exposure_stream:
        if exp.scenario_id not in known:
            raise IntegrityError(f"exposure for user {user_id} references unknown scenario {exp.scenario_id}")
        if user_id not in shared_store:
            raise IntegrityError(f"exposure references unknown user {user_id}")
        per_scenario[exp.scenario_id][user_id].append(exp)

    merged: dict[int, list[Exposure]] = defaultdict(list)
    for s in sorted(per_scenario):
        for user_id, exps in per_scenario[s].items():
            merged[user_id].extend(exps)

    samples = []
    for user_id in sorted(merged):
        hist, rt = shared_store[user_id]
        sample = UserSample(user_id, hist, rt, tuple(merged[user_id]))
        validate_sample(sample, space)
        samples.append(sample)
    return samples


def disaggregate(samples: Iterable[UserSample]):
    """Inverse of :func:`aggregate_users`: (raw exposure stream, shared store)."""
    stream, store = [], {}
    for s in samples:
        store[s.user_id] = (s.historical_sequences, s.realtime_sequences)
        stream.extend((s.user_id, e) for e in s.exposures)
    return stream, store


def exposure_multiset_digest(samples: Iterable[UserSample]) -> str:
    """Hash of the sorted (user, exposure) fingerprints; equal iff the multisets match."""
    prints = sorted(f"{s.user_id}|{e.fingerprint()}" for s in samples for e in s.exposures)
    return hashlib.sha256("\n".join(prints).encode()).hexdigest()


@dataclass(frozen=True)
class CompressionReport:
    raw_records: int
    samples: int

    @property
    def ratio(self) -> float:
        return self.raw_records / self.samples if self.samples else float("nan")

    def __str__(self) -> str:
        return f"{self.ratio:.1f}× fewer records than unaggregated ({self.raw_records} -> {self.samples})"


def compression_report(n_raw: int, samples: Sequence[UserSample]) -> CompressionReport:
    return CompressionReport(n_raw, len(samples))


# --------------------------------------------------------------------------
# serialization


def _seqs_to_json(seqs: Sequences):
    return [{"seq": sid, "events": [[e.timestamp, list(e.item_features)] for e in evs]} for sid, evs in seqs]


def _seqs_from_json(raw) -> Sequences:
    return tuple(
        (int(entry["seq"]), tuple(BehaviorEvent(tuple(int(x) for x in f), int(t)) for t, f in entry["events"]))
        for entry in raw
    )


def _exposure_to_json(e: Exposure):
    return {
        "scenario": e.scenario_id,
        "ts": e.timestamp,
        "user": list(e.user_features),
        "cross": list(e.cross_features),
        "item": list(e.item_features),
        "labels": dict(e.labels),
    }


def _exposure_from_json(raw) -> Exposure:
    return Exposure(
        int(raw["scenario"]),
        tuple(int(x) for x in raw["user"]),
        tuple(int(x) for x in raw["cross"]),
        tuple(int(x) for x in raw["item"]),
        int(raw["ts"]),
        {str(k): int(v) for k, v in raw.get("labels", {}).items()},
    )


def sample_to_json(s: UserSample) -> dict:
    return {
        "user_id": s.user_id,
        "hist": _seqs_to_json(s.historical_sequences),
        "rt": _seqs_to_json(s.realtime_sequences),
        "exposures": [_exposure_to_json(e) for e in s.exposures],
    }


def sample_from_json(raw) -> UserSample:
    return UserSample(
        int(raw["user_id"]),
        _seqs_from_json(raw["hist"]),
        _seqs_from_json(raw["rt"]),
        tuple(_exposure_from_json(e) for e in raw["exposures"]),
    )


def request_to_json(r: InferenceRequest) -> dict:
    return {
        "user_id": r.user_id,
        "scenario": r.scenario_id,
        "hist": _seqs_to_json(r.historical_sequences),
        "rt": _seqs_to_json(r.realtime_sequences),
        "candidates": [_exposure_to_json(c) for c in r.candidates],
    }


def request_from_json(raw) -> InferenceRequest:
    return InferenceRequest(
        int(raw["user_id"]),
        int(raw["scenario"]),
        _seqs_from_json(raw["hist"]),
        _seqs_from_json(raw["rt"]),
        tuple(_exposure_from_json(c) for c in raw["candidates"]),
    )


def space_to_json(space: FeatureSpace) -> dict:
    return {
        "scenarios": [
            {
                "scenario_id": s.scenario_id,
                "name": s.name,
                "user_feature_vocabs": list(s.user_feature_vocabs),
                "cross_feature_vocabs": list(s.cross_feature_vocabs),
                "item_feature_vocabs": list(s.item_feature_vocabs),
                "tasks": list(s.tasks),
            }
            for s in space.scenarios
        ],
        "hist_schemas": [{"seq_id": s.seq_id, "name": s.name, "feature_vocabs": list(s.feature_vocabs)} for s in space.hist_schemas],
        "rt_schemas": [{"seq_id": s.seq_id, "name": s.name, "feature_vocabs": list(s.feature_vocabs)} for s in space.rt_schemas],
    }


def space_from_json(raw) -> FeatureSpace:
    def seq(r):
        return SequenceSchema(int(r["seq_id"]), tuple(r["feature_vocabs"]), r.get("name", ""))

    return FeatureSpace(
        tuple(
            ScenarioSchema(
                int(r["scenario_id"]),
                tuple(r["user_feature_vocabs"]),
                tuple(r["cross_feature_vocabs"]),
                tuple(r["item_feature_vocabs"]),
                tuple(r["tasks"]),
                r.get("name", ""),
            )
            for r in raw["scenarios"]
        ),
        tuple(seq(r) for r in raw["hist_schemas"]),
        tuple(seq(r) for r in raw["rt_schemas"]),
    )


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def serialize_dataset(dataset: Dataset) -> bytes:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, **space_to_json(dataset.space)}
    lines = [_dumps(header)] + [_dumps(sample_to_json(s)) for s in dataset.samples]
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize_dataset(data: bytes) -> Dataset:
    text = data.decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(1, "missing header")
    try:
        header = json.loads(lines[0])
        if header.get("format") != FORMAT_NAME:
            raise DatasetParseError(1, f"not an {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetParseError(1, f"unsupported version {header.get('version')}")
        space = space_from_json(header)
    except DatasetParseError:
        raise
    except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
        raise DatasetParseError(1, f"bad header: {exc}") from exc
    samples = []
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            sample = sample_from_json(json.loads(line))
            validate_sample(sample, space)
        except (ValueError, KeyError, TypeError, IntegrityError) as exc:
            raise DatasetParseError(line_no, str(exc) or type(exc).__name__) from exc
        samples.append(sample)
    return Dataset(space, samples)
