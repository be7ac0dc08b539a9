"""
Scenario runner for the glimmer protocol stack.
Loads a YAML scenario, wires clients, glimmers, the blinding service and the
aggregation service over the message bus, runs the rounds and writes a
deterministic JSON-lines report checked against an independent plaintext oracle.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import yaml
from tqdm import tqdm

from aggregation_service import (
    SERVICE_INBOUND,
    AggregationService,
    BlindingServiceUnavailable,
    EnrollRequest,
    GlobalModel,
    predict_next,
)
from blinding_service import BlindingClient, BlindingService, PadIssue
from client_agent import (
    AdversaryKind,
    AdversaryMode,
    ClientAgent,
    RoundContext,
    expand_corpus,
    fabricated_vector,
)
from confidential_validation import (
    ConfidentialGlimmer,
    MalformedPolicy,
    RuntimeAuditor,
    SignalRecord,
    ValidationService,
    deliver_validator,
    establish_bound_channel,
    parse_policy,
    run_confidential,
)
from crypto_suite import SCALE, BindingFailure, CryptoError, EmptyRound, public_bytes, seed_bytes, signing_key_from_seed
from glimmer_core import GlimmerError, LocalGlimmer, PolicyKind, ValidationPolicy, build_glimmer_code
from remote_glimmer import RemoteEndpoint, RemoteGlimmer, RemoteGlimmerHost
from tee_emulation import TeeError, TeePlatform, flip_byte, measure
from utils.bus import TranscriptRecord, make_bus
from utils.wire import MessageType

logger = logging.getLogger(__name__)

MODULUS = 2 ** 64
AGGREGATOR = "aggregator"
BLINDING = "blinding"
VALIDATION = "validation"
SERVICE_ACTORS = frozenset({AGGREGATOR, BLINDING, VALIDATION})


def load_config(path: str = "config.yaml") -> dict:
    """Load harness defaults from config.yaml."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}
    except Exception as e:
        print(f"Warning: Could not load {path}: {e}")
        return {}


# ---------------------------------------------------------------------------
# Scenario config
# ---------------------------------------------------------------------------


class ConfigError(Exception):
    """Scenario file problem, reported as <file>:<line>: <field>: <problem>."""

    def __init__(self, source: str, line: int, field_path: str, problem: str):
        super().__init__(f"{source}:{line}: {field_path}: {problem}")
        self.source = source
        self.line = line
        self.field_path = field_path
        self.problem = problem


@dataclass
class ClientSpec:
    client_id: int
    phrases: List[Tuple[List[str], int]]
    mode: AdversaryMode = AdversaryMode()
    glimmer: str = "local"


@dataclass
class RemoteHostSpec:
    name: str
    label: str
    trust: str = ""
    tampered: bool = False


@dataclass
class ConfidentialSpec:
    policy_source: bytes
    version: int
    signals: Dict[int, SignalRecord]


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    vocabulary: List[str]
    clients: List[ClientSpec]
    policy: ValidationPolicy
    rounds: int = 1
    dropouts: Dict[int, Set[int]] = field(default_factory=dict)
    confidence_threshold: int = 128
    deadline_ticks: int = 10
    attest_enrollment: bool = True
    blinding_in_enclave: bool = False
    public: bool = False
    conditional: bool = False
    probes: List[Tuple[str, int]] = field(default_factory=list)
    remote_hosts: List[RemoteHostSpec] = field(default_factory=list)
    skip_blinding: bool = False
    confidential: Optional[ConfidentialSpec] = None
    description: str = ""
    source: str = "<scenario>"

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def word_id(self, word: str) -> int:
        return self.vocabulary.index(word)


def _line_map(node: yaml.Node, path: str = "", out: Optional[Dict[str, int]] = None) -> Dict[str, int]:
    """Map each field path (clients[0].mode) to its 1-based source line."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = str(key_node.value)
            child = f"{path}.{key}" if path else key
            out[child] = key_node.start_mark.line + 1
            _line_map(value_node, child, out)
            out[child] = key_node.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_map(item, f"{path}[{i}]", out)
    return out


_MODES = {kind.value: kind for kind in AdversaryKind}


class _ScenarioParser:
    def __init__(self, data: dict, lines: Dict[str, int], source: str, defaults: dict):
        self.data = data
        self.lines = lines
        self.source = source
        self.defaults = defaults

    def fail(self, path: str, problem: str):
        probe = path
        while probe and probe not in self.lines:
            probe = probe.rsplit(".", 1)[0] if "." in probe else probe.split("[", 1)[0] if "[" in probe else ""
        raise ConfigError(self.source, self.lines.get(probe, 1), path or "<root>", problem)

    def typed(self, value, kind, path: str):
        if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
            self.fail(path, f"expected an integer, got {value!r}")
        if kind is bool and not isinstance(value, bool):
            self.fail(path, f"expected true/false, got {value!r}")
        if kind is str and not isinstance(value, str):
            self.fail(path, f"expected a string, got {value!r}")
        if kind is list and not isinstance(value, list):
            self.fail(path, "expected a list")
        if kind is dict and not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        return value

    def get(self, mapping: dict, key: str, kind, path: str, default=None, required: bool = False):
        full = f"{path}.{key}" if path else key
        if key not in mapping or mapping[key] is None:
            if required:
                self.fail(full, "missing required field")
            return default
        return self.typed(mapping[key], kind, full)

    def parse(self) -> ScenarioConfig:
        d = self.typed(self.data, dict, "")
        service_defaults = self.defaults.get("service", {}) or {}
        name = self.get(d, "name", str, "", required=True)
        seed = self.get(d, "seed", int, "", required=True)
        if not 0 <= seed < MODULUS:
            self.fail("seed", "must be a 64-bit unsigned integer")
        rounds = self.get(d, "rounds", int, "", default=1)
        if rounds < 1:
            self.fail("rounds", "must be at least 1")

        vocabulary = self.get(d, "vocabulary", list, "", required=True)
        if not vocabulary:
            self.fail("vocabulary", "must not be empty")
        for i, word in enumerate(vocabulary):
            self.typed(word, str, f"vocabulary[{i}]")
        if len(set(vocabulary)) != len(vocabulary):
            self.fail("vocabulary", "words must be unique")

        model = self.get(d, "model", dict, "", default={})
        normalization = self.get(model, "normalization", str, "model", default="joint")
        if normalization not in ("joint", "conditional"):
            self.fail("model.normalization", "must be joint or conditional")
        conditional = normalization == "conditional"

        remote_hosts = self.parse_remote_hosts(self.get(d, "remote_hosts", list, "", default=[]))
        clients = self.parse_clients(self.get(d, "clients", list, "", required=True), vocabulary, remote_hosts)
        policy = self.parse_policy(self.get(d, "policy", dict, "", default={"kind": "range"}), "policy", conditional)

        service = self.get(d, "service", dict, "", default={})
        threshold = self.get(service, "confidence_threshold", int, "service",
                             default=service_defaults.get("confidence_threshold", 128))
        if not 0 <= threshold <= 255:
            self.fail("service.confidence_threshold", "must be between 0 and 255")
        deadline = self.get(service, "deadline_ticks", int, "service",
                            default=service_defaults.get("deadline_ticks", 10))
        if deadline < 1:
            self.fail("service.deadline_ticks", "must be at least 1")
        attest = self.get(service, "attest_enrollment", bool, "service", default=True)

        blinding = self.get(d, "blinding", dict, "", default={})
        host = self.get(blinding, "host", str, "blinding", default="actor")
        if host not in ("actor", "enclave"):
            self.fail("blinding.host", "must be actor or enclave")

        ids = {c.client_id for c in clients}
        dropouts: Dict[int, Set[int]] = {}
        for i, entry in enumerate(self.get(d, "dropouts", list, "", default=[])):
            path = f"dropouts[{i}]"
            self.typed(entry, dict, path)
            r = self.get(entry, "round", int, path, required=True)
            if not 1 <= r <= rounds:
                self.fail(f"{path}.round", f"round {r} outside 1..{rounds}")
            dropped = self.get(entry, "clients", list, path, required=True)
            for j, cid in enumerate(dropped):
                self.typed(cid, int, f"{path}.clients[{j}]")
                if cid not in ids:
                    self.fail(f"{path}.clients[{j}]", f"unknown client id {cid}")
            dropouts.setdefault(r, set()).update(dropped)

        probes = []
        for i, entry in enumerate(self.get(d, "probes", list, "", default=[])):
            path = f"probes[{i}]"
            self.typed(entry, dict, path)
            word = self.get(entry, "word", str, path, required=True)
            if word not in vocabulary:
                self.fail(f"{path}.word", f"'{word}' is not in the vocabulary")
            k = self.get(entry, "k", int, path, default=3)
            if k < 1:
                self.fail(f"{path}.k", "must be at least 1")
            probes.append((word, k))

        debug = self.get(d, "debug", dict, "", default={})
        return ScenarioConfig(
            name=name,
            seed=seed,
            vocabulary=list(vocabulary),
            clients=clients,
            policy=policy,
            rounds=rounds,
            dropouts=dropouts,
            confidence_threshold=threshold,
            deadline_ticks=deadline,
            attest_enrollment=attest,
            blinding_in_enclave=host == "enclave",
            public=self.get(d, "public_contributions", bool, "", default=False),
            conditional=conditional,
            probes=probes,
            remote_hosts=remote_hosts,
            skip_blinding=self.get(debug, "skip_blinding", bool, "debug", default=False),
            confidential=self.parse_confidential(self.get(d, "confidential", dict, "", default=None), ids),
            description=self.get(d, "description", str, "", default=""),
            source=self.source,
        )

    def parse_remote_hosts(self, entries: list) -> List[RemoteHostSpec]:
        hosts = []
        for i, entry in enumerate(entries):
            path = f"remote_hosts[{i}]"
            self.typed(entry, dict, path)
            name = self.get(entry, "name", str, path, required=True)
            if any(h.name == name for h in hosts):
                self.fail(f"{path}.name", f"duplicate remote host '{name}'")
            hosts.append(RemoteHostSpec(
                name=name,
                label=self.get(entry, "label", str, path, default=name),
                trust=self.get(entry, "trust", str, path, default=""),
                tampered=self.get(entry, "tampered", bool, path, default=False),
            ))
        return hosts

    def parse_clients(self, entries: list, vocabulary: List[str], hosts: List[RemoteHostSpec]) -> List[ClientSpec]:
        if not entries:
            self.fail("clients", "at least one client is required")
        host_names = {h.name for h in hosts}
        clients = []
        seen = set()
        for i, entry in enumerate(entries):
            path = f"clients[{i}]"
            self.typed(entry, dict, path)
            cid = self.get(entry, "id", int, path, required=True)
            if not 0 <= cid < MODULUS:
                self.fail(f"{path}.id", "must be a 64-bit unsigned integer")
            if cid in seen:
                self.fail(f"{path}.id", f"duplicate client id {cid}")
            seen.add(cid)

            phrases = []
            for j, item in enumerate(self.get(entry, "corpus", list, path, default=[])):
                ppath = f"{path}.corpus[{j}]"
                self.typed(item, dict, ppath)
                words = self.get(item, "phrase", str, ppath, required=True).split()
                for word in words:
                    if word not in vocabulary:
                        self.fail(f"{ppath}.phrase", f"'{word}' is not in the vocabulary")
                repeat = self.get(item, "repeat", int, ppath, default=1)
                if repeat < 0:
                    self.fail(f"{ppath}.repeat", "must not be negative")
                phrases.append((words, repeat))

            mode_name = self.get(entry, "mode", str, path, default="honest")
            if mode_name not in _MODES:
                self.fail(f"{path}.mode", f"unknown mode '{mode_name}' (expected one of {sorted(_MODES)})")
            mode = AdversaryMode(
                kind=_MODES[mode_name],
                value=self.get(entry, "value", int, path, default=538),
                bypass=self.get(entry, "bypass", bool, path, default=False),
            )

            glimmer = self.get(entry, "glimmer", str, path, default="local")
            if glimmer != "local":
                if not glimmer.startswith("remote:") or glimmer[len("remote:"):] not in host_names:
                    self.fail(f"{path}.glimmer", f"expected local or remote:<host name>, got '{glimmer}'")
                if mode.kind is AdversaryKind.TAMPERED_CODE:
                    self.fail(f"{path}.mode", "tampered_code needs a local glimmer; mark the remote host tampered instead")
            clients.append(ClientSpec(cid, phrases, mode, glimmer))
        return clients

    def parse_policy(self, spec: dict, path: str, conditional: bool) -> ValidationPolicy:
        kind = self.get(spec, "kind", str, path, default="range")
        validation_defaults = self.defaults.get("validation", {}) or {}
        try:
            if kind == PolicyKind.RANGE_CHECK.value:
                lo = self.get(spec, "lo", int, path, default=0)
                hi = self.get(spec, "hi", int, path, default=SCALE)
                return ValidationPolicy.range_check(lo, hi)
            if kind == PolicyKind.CORROBORATION.value:
                tolerance = self.get(spec, "tolerance", int, path, default=validation_defaults.get("tolerance", 0))
                return ValidationPolicy.corroboration(tolerance, conditional)
            if kind == PolicyKind.COMPOSITE.value:
                children = self.get(spec, "children", list, path, required=True)
                parsed = []
                for i, child in enumerate(children):
                    self.typed(child, dict, f"{path}.children[{i}]")
                    parsed.append(self.parse_policy(child, f"{path}.children[{i}]", conditional))
                return ValidationPolicy.composite(*parsed)
        except ValueError as e:
            self.fail(path, str(e))
        self.fail(f"{path}.kind", f"unknown policy kind '{kind}'")

    def parse_confidential(self, spec: Optional[dict], ids: Set[int]) -> Optional[ConfidentialSpec]:
        if spec is None:
            return None
        policy = spec.get("policy")
        if policy is None:
            self.fail("confidential.policy", "missing required field")
        source = policy.encode() if isinstance(policy, str) else json.dumps(policy, separators=(",", ":")).encode()
        try:
            parse_policy(source)
        except MalformedPolicy as e:
            self.fail("confidential.policy", str(e))
        signals = {}
        for key, record in (self.get(spec, "signals", dict, "confidential", default={}) or {}).items():
            path = f"confidential.signals.{key}"
            if isinstance(key, bool) or not isinstance(key, int) or key not in ids:
                self.fail(path, f"unknown client id {key!r}")
            self.typed(record, dict, path)
            try:
                signals[key] = SignalRecord.from_dict(record)
            except (TypeError, ValueError, AttributeError) as e:
                self.fail(path, f"bad signal record: {e}")
        return ConfidentialSpec(source, self.get(spec, "version", int, "confidential", default=1), signals)


def parse_scenario(text: str, source: str = "<scenario>", defaults: Optional[dict] = None) -> ScenarioConfig:
    """Parse scenario YAML text; raises ConfigError with line diagnostics."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(source, mark.line + 1 if mark else 1, "<yaml>", str(e).splitlines()[0]) from None
    if node is None:
        raise ConfigError(source, 1, "<root>", "scenario file is empty")
    return _ScenarioParser(data, _line_map(node), source, defaults or {}).parse()


def load_scenario(path: Path, defaults: Optional[dict] = None) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(str(path), 0, "<file>", str(e)) from None
    return parse_scenario(text, str(path), defaults)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


@dataclass
class RunReport:
    """One run record, one record per round, optional confidential record, one summary."""

    records: List[dict] = field(default_factory=list)

    @property
    def run(self) -> dict:
        return next(r for r in self.records if r["type"] == "run")

    @property
    def rounds(self) -> List[dict]:
        return [r for r in self.records if r["type"] == "round"]

    @property
    def summary(self) -> dict:
        return next(r for r in self.records if r["type"] == "summary")

    @property
    def invariant_violations(self) -> int:
        return self.summary["invariant_violations"]

    def to_jsonl(self) -> str:
        return "".join(_dumps(r) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunReport":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


@dataclass
class RunResult:
    report: RunReport
    transcript: List[TranscriptRecord]


# ---------------------------------------------------------------------------
# Independent oracle
# ---------------------------------------------------------------------------


def oracle_bigram_vector(words: Sequence[int], vocab_size: int, conditional: bool = False) -> List[int]:
    """Fixed-point bigram weights computed with Counter and exact fractions."""
    pairs = Counter(zip(words, words[1:]))
    out_counts = Counter()
    for (a, _), c in pairs.items():
        out_counts[a] += c
    total = sum(pairs.values())
    vec = [0] * (vocab_size * vocab_size)
    for (a, b), c in pairs.items():
        denominator = out_counts[a] if conditional else total
        vec[a * vocab_size + b] = math.floor(Fraction(SCALE * c, denominator) + Fraction(1, 2))
    return vec


def _oracle_includes(spec: ClientSpec, config: ScenarioConfig, enrolled: bool, hosts: Dict[str, RemoteHostSpec]) -> bool:
    if not enrolled or config.skip_blinding:
        return False
    if spec.glimmer != "local" and hosts[spec.glimmer[len("remote:"):]].tampered:
        return False
    kind = spec.mode.kind
    if kind in (AdversaryKind.HONEST, AdversaryKind.REPLAY):
        return True
    if kind is AdversaryKind.FABRICATED_IN_RANGE:
        return not config.policy.uses_corroboration()
    return False


def _top_k(sums: Sequence[int], vocab_size: int, word: int, k: int) -> List[int]:
    row = sums[word * vocab_size:(word + 1) * vocab_size]
    return [b for _, b in sorted((-s, b) for b, s in enumerate(row) if s)][:k]


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


class _ClientActor:
    """Bus endpoint for one client: receives pads, results and challenges."""

    def __init__(self, agent: ClientAgent):
        self.agent = agent
        self.results: List[GlobalModel] = []
        self.challenges: List[bytes] = []

    def handle(self, src: str, tag: MessageType, payload: bytes):
        if tag is MessageType.PAD_ISSUE:
            self.agent.receive_pad(PadIssue.from_bytes(payload))
        elif tag is MessageType.ROUND_RESULT:
            self.results.append(GlobalModel.from_bytes(payload))
        elif tag is MessageType.CHALLENGE:
            self.challenges.append(payload)
        return None


def run_scenario(config: ScenarioConfig, transport: str = "bus", capture: bool = False,
                 progress: bool = False) -> RunResult:
    """
    Execute every round of a scenario.

    Args:
        config: Parsed scenario
        transport: "bus" (in-process) or "socket" (loopback socket pair)
        capture: Keep a transcript of every message for verify_transcripts
        progress: Show tqdm progress bars

    Returns:
        RunResult with the deterministic report and the transcript
    """
    seed = config.seed
    vocab = config.vocab_size
    length = vocab * vocab
    violations: List[str] = []

    platform = TeePlatform(seed_bytes(seed, "platform"), debug=True)
    handshake_key = signing_key_from_seed(seed_bytes(seed, "validation-service"))
    code = build_glimmer_code(public_bytes(handshake_key))
    approved = measure(code)

    bus = make_bus(transport, capture)
    aggregator = AggregationService(
        platform, approved, seed_bytes(seed, "aggregation"),
        confidence_threshold=config.confidence_threshold,
        attest_enrollment=config.attest_enrollment,
    )
    sealed_sk, _ = aggregator.provision_signing_key()
    blinding = BlindingService(platform, aggregator.credential_public, config.blinding_in_enclave)
    bus.register(AGGREGATOR, aggregator.handle)
    bus.register(BLINDING, blinding.handle)

    hosts = {h.name: h for h in config.remote_hosts}
    for spec in config.remote_hosts:
        host = RemoteGlimmerHost(f"remote:{spec.name}", platform, code, spec.label, spec.trust, spec.tampered)
        bus.register(host.name, host.handle)

    actors: Dict[int, _ClientActor] = {}
    for spec in config.clients:
        name = f"client:{spec.client_id}"
        if spec.glimmer == "local":
            client_code = flip_byte(code) if spec.mode.kind is AdversaryKind.TAMPERED_CODE else code
            glimmer = LocalGlimmer(platform.launch(client_code))
        else:
            endpoint = RemoteEndpoint(spec.glimmer, approved, platform.attestation_public_key)
            glimmer = RemoteGlimmer(endpoint, bus, name)
        phrases = [([config.word_id(w) for w in words], reps) for words, reps in spec.phrases]
        corpus_seed = int.from_bytes(seed_bytes(seed, f"corpus:{spec.client_id}")[:8], "big")
        log = expand_corpus(phrases, vocab, corpus_seed)
        agent = ClientAgent(spec.client_id, log, glimmer, spec.mode, seed)
        actors[spec.client_id] = _ClientActor(agent)
        bus.register(name, actors[spec.client_id].handle)

    enrolled: Dict[int, bool] = {}
    for spec in config.clients:
        agent = actors[spec.client_id].agent
        try:
            q = agent.attest()
        except (GlimmerError, TeeError) as e:
            logger.info("Client %d could not obtain an enrollment quote: %s", spec.client_id, e)
            enrolled[spec.client_id] = False
            continue
        request = EnrollRequest(spec.client_id, agent.envelope_public, q)
        reply = bus.call(f"client:{spec.client_id}", AGGREGATOR, MessageType.ENROLL, request.to_bytes())
        enrolled[spec.client_id] = reply is not None and reply[1] == b"\x01"

    records: List[dict] = []
    sentinels: Dict[str, List[List[Any]]] = {}
    tick = 0
    for r in range(1, config.rounds + 1):
        state = aggregator.open_round(r, length, deadline=tick + config.deadline_ticks, public=config.public)
        if not config.public:
            issues = blinding.provision_round(state.roster, seed_bytes(seed, f"pads:{r}"))
            for issue in issues:
                bus.post(BLINDING, f"client:{issue.client_id}", MessageType.PAD_ISSUE, issue.to_bytes())
                bus.drain(f"client:{issue.client_id}")

        ctx = RoundContext(r, length, sealed_sk, config.policy, config.public, config.conditional, config.skip_blinding)
        dropped = config.dropouts.get(r, set())
        events: Dict[str, List[str]] = {}
        for spec in tqdm(config.clients, desc=f"Round {r}", disable=not progress, leave=False):
            cid = spec.client_id
            agent = actors[cid].agent
            if not enrolled[cid]:
                events[str(cid)] = ["not_enrolled"]
                continue
            if cid in dropped:
                events[str(cid)] = ["dropped"]
                continue
            submission = agent.contribute(ctx)
            events[str(cid)] = submission.events or (["submitted"] if submission.payloads else ["silent"])
            if capture:
                known = sentinels.setdefault(str(cid), [])
                for kind, value in agent.sentinels(ctx):
                    entry = [kind, value.hex()]
                    if entry not in known:
                        known.append(entry)
            for payload in submission.payloads:
                bus.post(f"client:{cid}", AGGREGATOR, MessageType.CONTRIBUTION, payload)
                tick += 1
        bus.drain(AGGREGATOR)
        tick = max(tick, state.deadline)

        status = "closed"
        model: Optional[GlobalModel] = None
        try:
            model = aggregator.finalize_round(state, BlindingClient(bus, AGGREGATOR, BLINDING), tick)
        except EmptyRound:
            status = "empty"
        except BlindingServiceUnavailable as e:
            status = "aborted"
            violations.append(f"round {r}: {e}")
        revealed = {cid for rid, cid in blinding.disclosures if rid == r}
        blinding.close_round(r)

        if model is not None:
            for cid in actors:
                bus.post(AGGREGATOR, f"client:{cid}", MessageType.ROUND_RESULT, model.to_bytes())
                bus.drain(f"client:{cid}")

        included = [
            spec for spec in config.clients
            if spec.client_id not in dropped and _oracle_includes(spec, config, enrolled[spec.client_id], hosts)
        ]
        oracle = [0] * length
        for spec in included:
            agent = actors[spec.client_id].agent
            if spec.mode.kind is AdversaryKind.FABRICATED_IN_RANGE:
                vec = [int(v) for v in fabricated_vector(seed, spec.client_id, r, length).entries]
            else:
                vec = oracle_bigram_vector(agent.log.words(), vocab, config.conditional)
            oracle = [(a + b) % MODULUS for a, b in zip(oracle, vec)]

        sums = [int(v) for v in model.sums] if model is not None else None
        if model is not None:
            exact = sums == oracle and model.submitter_count == len(included)
        else:
            exact = status == "empty" and not included
        if not exact:
            violations.append(f"round {r}: aggregate differs from plaintext oracle")
        leaked = revealed & set(state.accepted)
        if leaked:
            violations.append(f"round {r}: pads revealed for submitting clients {sorted(leaked)}")

        rejections = Counter(d.reason.value for d in state.decisions if not d.accepted)
        predictions = {}
        oracle_predictions = {}
        for word, k in config.probes:
            wid = config.word_id(word)
            oracle_predictions[word] = [config.vocabulary[b] for b in _top_k(oracle, vocab, wid, k)]
            if model is not None:
                predictions[word] = [config.vocabulary[b] for b in predict_next(model, wid, k)]
        records.append({
            "type": "round",
            "round": r,
            "status": status,
            "accepted": sorted(state.accepted),
            "rejections": dict(sorted(rejections.items())),
            "rejected_clients": sorted(
                [d.client_id if d.client_id is not None else -1, d.reason.value]
                for d in state.decisions if not d.accepted
            ),
            "dropouts_revealed": sorted(revealed),
            "submitter_count": model.submitter_count if model is not None else 0,
            "sums": sums,
            "oracle_sums": oracle,
            "exact": exact,
            "predictions": predictions,
            "oracle_predictions": oracle_predictions,
            "events": events,
        })

    stray = aggregator.received_tags - SERVICE_INBOUND
    if stray:
        violations.append(f"aggregation service received {sorted(t.name for t in stray)}")

    confidential_record = None
    if config.confidential is not None:
        confidential_record = _run_confidential(config, platform, code, handshake_key, approved, sealed_sk,
                                                aggregator.verify_key, bus, violations)

    run_record = {
        "type": "run",
        "scenario": config.name,
        "seed": seed,
        "rounds": config.rounds,
        "vocabulary": config.vocabulary,
        "policy": config.policy.to_dict(),
        "public_contributions": config.public,
        "blinding_host": "enclave" if config.blinding_in_enclave else "actor",
        "approved_measurement": approved.hex(),
        "clients": [
            {
                "id": spec.client_id,
                "mode": spec.mode.label(),
                "glimmer": spec.glimmer,
                "enrolled": enrolled[spec.client_id],
                "self_leaking": spec.mode.kind is AdversaryKind.BYPASS_GLIMMER
                or (spec.mode.kind is AdversaryKind.OUT_OF_RANGE and spec.mode.bypass),
            }
            for spec in config.clients
        ],
        "remote_hosts": [
            {"name": h.name, "label": h.label, "trust": h.trust, "tampered": h.tampered}
            for h in config.remote_hosts
        ],
    }
    if capture:
        run_record["sentinels"] = sentinels

    report = RunReport([run_record] + records)
    if confidential_record is not None:
        report.records.append(confidential_record)

    transcript = list(bus.transcript)
    bus.close()
    if capture:
        leaks = [v for v in verify_transcripts(report, transcript) if not v["expected"]]
        violations.extend(f"transcript seq {v['seq']}: {v['kind']} of client {v['client']} sent to {v['dst']}"
                          for v in leaks)

    report.records.append({
        "type": "summary",
        "scenario": config.name,
        "rounds": config.rounds,
        "exact_rounds": sum(1 for r in records if r["exact"]),
        "invariant_violations": len(violations),
        "violations": violations,
    })
    return RunResult(report, transcript)


def _run_confidential(config, platform, code, handshake_key, approved, sealed_sk, verify_key, bus, violations) -> dict:
    spec = config.confidential
    service = ValidationService(handshake_key, approved, platform.attestation_public_key,
                                spec.policy_source, spec.version)
    bus.register(VALIDATION, lambda src, tag, payload: None)
    clients = {c.client_id: c for c in config.clients}
    results = {}
    for cid in sorted(spec.signals):
        client = clients[cid]
        client_code = flip_byte(code) if client.mode.kind is AdversaryKind.TAMPERED_CODE else code
        glimmer = ConfidentialGlimmer(platform.launch(client_code), sealed_sk)
        try:
            session = establish_bound_channel(glimmer, service)
            deliver_validator(session)
        except (BindingFailure, CryptoError, MalformedPolicy) as e:
            results[str(cid)] = {"established": False, "error": type(e).__name__}
            continue

        auditor = RuntimeAuditor(verify_key)
        nonce = auditor.challenge(seed_bytes(config.seed, f"challenge:{cid}")[:16])
        bus.post(VALIDATION, f"client:{cid}", MessageType.CHALLENGE, nonce)
        bus.drain(f"client:{cid}")
        message = run_confidential(session, spec.signals[cid], nonce, round_id=config.rounds)
        audit = auditor.audit(message)
        if audit.passed:
            bus.post(f"client:{cid}", VALIDATION, MessageType.VERDICT, message)
            bus.drain(VALIDATION)
        else:
            violations.append(f"confidential: verdict of client {cid} failed audit ({audit})")
        if any(spec.policy_source in payload for _, payload in session.wire_log):
            violations.append(f"confidential: policy plaintext crossed the wire for client {cid}")
        glimmer.ctx.destroy()
        results[str(cid)] = {
            "established": True,
            "version": session.installed_version,
            "verdict": message[24],
            "audit": str(audit),
        }
    return {"type": "confidential", "results": results}


def verify_transcripts(report: RunReport, transcript: Sequence[TranscriptRecord]) -> List[dict]:
    """
    Scan service-bound and remote-host-bound messages for sentinel bytes.

    Returns:
        One entry per (message, client, sentinel kind) hit; "expected" marks
        leaks a bypassing attacker caused with its own data
    """
    run = report.run
    sentinels = run.get("sentinels") or {}
    self_leaking = {str(c["id"]): c["self_leaking"] for c in run["clients"]}
    found = []
    for record in transcript:
        if record.dst not in SERVICE_ACTORS and not record.dst.startswith("remote:"):
            continue
        for cid, entries in sentinels.items():
            for kind, value in entries:
                if bytes.fromhex(value) in record.payload:
                    found.append({
                        "seq": record.seq,
                        "client": int(cid),
                        "kind": kind,
                        "dst": record.dst,
                        "tag": record.tag.name,
                        "expected": bool(self_leaking.get(cid, False)),
                    })
    return found


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _setup_logging(config: dict, verbose: bool):
    log_cfg = config.get("logging", {}) or {}
    level = logging.DEBUG if verbose else getattr(logging, str(log_cfg.get("level", "WARNING")).upper(), logging.WARNING)
    logging.basicConfig(level=level, format=log_cfg.get("format", "%(levelname)s %(name)s: %(message)s"))


def cmd_run(args, config: dict) -> int:
    harness = config.get("harness", {}) or {}
    try:
        scenario = load_scenario(Path(args.scenario), config)
    except ConfigError as e:
        print(f"Error: {e}")
        return 1
    if args.seed is not None:
        scenario.seed = args.seed
    transport = args.transport or harness.get("transport", "bus")
    out_dir = Path(args.out or harness.get("out_dir", "runs"))

    print(f"\n{'='*60}")
    print(f"Scenario: {scenario.name} (seed {scenario.seed}, {len(scenario.clients)} clients, "
          f"{scenario.rounds} rounds, transport {transport})")
    print(f"{'='*60}")

    result = run_scenario(scenario, transport, args.capture_transcripts, progress=harness.get("progress", True))
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"{scenario.name}.report.jsonl"
    report_path.write_text(result.report.to_jsonl(), encoding="utf-8")
    if args.capture_transcripts:
        transcript_path = out_dir / f"{scenario.name}.transcript.jsonl"
        transcript_path.write_text("".join(_dumps(t.to_dict()) + "\n" for t in result.transcript), encoding="utf-8")
        print(f"Transcript: {transcript_path} ({len(result.transcript)} messages)")

    for record in result.report.rounds:
        rejected = ", ".join(f"{k}={v}" for k, v in record["rejections"].items()) or "none"
        print(f"Round {record['round']}: {record['status']}, {len(record['accepted'])} accepted, "
              f"rejected: {rejected}, exact: {record['exact']}")
        for word, successors in record["predictions"].items():
            print(f"  next after '{word}': {', '.join(successors) or '-'}")

    summary = result.report.summary
    print(f"\n{'='*60}")
    print(f"Invariant violations: {summary['invariant_violations']}")
    for violation in summary["violations"]:
        print(f"  - {violation}")
    print(f"Report: {report_path}")
    print(f"{'='*60}\n")
    return 0 if summary["invariant_violations"] == 0 else 1


def cmd_verify(args) -> int:
    try:
        report = RunReport.from_jsonl(Path(args.report).read_text(encoding="utf-8"))
        lines = Path(args.transcript).read_text(encoding="utf-8").splitlines()
        transcript = [TranscriptRecord.from_dict(json.loads(line)) for line in lines if line.strip()]
    except (OSError, ValueError, KeyError, StopIteration) as e:
        print(f"Error: cannot read inputs: {e}")
        return 1
    if "sentinels" not in report.run:
        print("Error: report was produced without --capture-transcripts")
        return 1
    found = verify_transcripts(report, transcript)
    unexpected = [v for v in found if not v["expected"]]
    print(f"Scanned {len(transcript)} messages: {len(found)} sentinel hits, {len(unexpected)} violations")
    for v in found:
        note = "attacker's own data" if v["expected"] else "VIOLATION"
        print(f"  seq {v['seq']}: client {v['client']} {v['kind']} -> {v['dst']} ({v['tag']}) [{note}]")
    return 0 if not unexpected else 1


def cmd_list(config: dict) -> int:
    scenarios_dir = Path((config.get("harness", {}) or {}).get("scenarios_dir", "scenarios"))
    files = sorted(scenarios_dir.glob("*.yaml"))
    if not files:
        print(f"No scenarios found in {scenarios_dir}")
        return 0
    for path in files:
        try:
            scenario = load_scenario(path, config)
            print(f"{scenario.name:<20} {path}  {scenario.description}")
        except ConfigError as e:
            print(f"{path.stem:<20} {path}  (invalid: {e.problem})")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Run glimmer protocol scenarios")
    parser.add_argument("--config", default="config.yaml", help="Harness defaults (default: config.yaml)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario file")
    run.add_argument("scenario", type=str, help="Scenario YAML file")
    run.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    run.add_argument("--transport", choices=["bus", "socket"], default=None,
                     help="Message transport (default: from config.yaml)")
    run.add_argument("--capture-transcripts", action="store_true",
                     help="Record every message and scan it for leaked private data")
    run.add_argument("--out", type=str, default=None, help="Output directory (default: from config.yaml)")

    verify = sub.add_parser("verify", help="Scan a transcript against a report's sentinels")
    verify.add_argument("report", type=str)
    verify.add_argument("transcript", type=str)

    sub.add_parser("list-scenarios", help="List bundled scenarios")

    args = parser.parse_args(argv)
    config = load_config(args.config)
    _setup_logging(config, args.verbose)

    if args.command == "run":
        return cmd_run(args, config)
    if args.command == "verify":
        return cmd_verify(args)
    return cmd_list(config)


if __name__ == "__main__":
    sys.exit(main())
