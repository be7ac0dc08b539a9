"""Tests for scenario parsing, the runner, transcript scanning and the CLI."""

import json
from pathlib import Path

import pytest

from client_agent import AdversaryKind
from glimmer_core import PolicyKind
from sim_harness import (
    ConfigError,
    RunReport,
    load_config,
    load_scenario,
    main,
    oracle_bigram_vector,
    parse_scenario,
    run_scenario,
    verify_transcripts,
)

SCENARIOS = Path(__file__).parent.parent / "scenarios"

SMALL = """\
name: small
seed: 5
vocabulary: [the, duck, is, nice]
clients:
  - id: 1
    corpus:
      - {phrase: "the duck is nice", repeat: 2}
  - id: 2
    corpus:
      - {phrase: "the duck", repeat: 3}
"""


def scenario_text(extra="", clients=None):
    head = "name: t\nseed: 1\nvocabulary: [the, duck, is, nice]\n"
    body = clients or "clients:\n  - id: 1\n    corpus:\n      - {phrase: \"the duck\", repeat: 1}\n"
    return head + body + extra


class TestParsing:
    def test_small_scenario(self):
        config = parse_scenario(SMALL)
        assert config.name == "small"
        assert config.vocab_size == 4
        assert [c.client_id for c in config.clients] == [1, 2]
        assert config.clients[1].phrases == [(["the", "duck"], 3)]
        assert config.policy.kind is PolicyKind.RANGE_CHECK
        assert config.confidence_threshold == 128

    def test_unknown_mode_points_at_its_line(self):
        text = scenario_text(clients="clients:\n  - id: 1\n    mode: sneaky\n")
        with pytest.raises(ConfigError) as info:
            parse_scenario(text, "bad.yaml")
        assert info.value.line == 6
        assert info.value.field_path == "clients[0].mode"
        assert str(info.value).startswith("bad.yaml:6: clients[0].mode:")

    def test_missing_seed(self):
        with pytest.raises(ConfigError) as info:
            parse_scenario("name: t\nvocabulary: [a]\nclients: [{id: 1}]\n")
        assert info.value.field_path == "seed"
        assert info.value.problem == "missing required field"

    def test_unknown_word(self):
        text = scenario_text(clients="clients:\n  - id: 1\n    corpus:\n      - {phrase: \"the goose\"}\n")
        with pytest.raises(ConfigError) as info:
            parse_scenario(text)
        assert info.value.field_path == "clients[0].corpus[0].phrase"
        assert info.value.line == 7
        assert "goose" in info.value.problem

    def test_unknown_dropout_client(self):
        text = scenario_text("dropouts:\n  - round: 1\n    clients: [1, 9]\n")
        with pytest.raises(ConfigError) as info:
            parse_scenario(text)
        assert info.value.field_path == "dropouts[0].clients[1]"
        assert info.value.line == 10

    def test_tampered_code_needs_local_glimmer(self):
        text = (
            "name: t\nseed: 1\nvocabulary: [the]\n"
            "remote_hosts:\n  - name: box\n"
            "clients:\n  - id: 1\n    glimmer: remote:box\n    mode: tampered_code\n"
        )
        with pytest.raises(ConfigError) as info:
            parse_scenario(text)
        assert info.value.field_path == "clients[0].mode"

    @pytest.mark.parametrize("extra, field", [
        ("rounds: 0\n", "rounds"),
        ("service:\n  confidence_threshold: 300\n", "service.confidence_threshold"),
        ("blinding:\n  host: cloud\n", "blinding.host"),
        ("model:\n  normalization: softmax\n", "model.normalization"),
        ("policy:\n  kind: vibes\n", "policy.kind"),
        ("probes:\n  - word: goose\n", "probes[0].word"),
        ("debug:\n  skip_blinding: maybe\n", "debug.skip_blinding"),
        ("confidential:\n  policy: [\"xor\", true]\n", "confidential.policy"),
    ])
    def test_field_errors(self, extra, field):
        with pytest.raises(ConfigError) as info:
            parse_scenario(scenario_text(extra))
        assert info.value.field_path == field

    def test_yaml_syntax_error(self):
        with pytest.raises(ConfigError) as info:
            parse_scenario("name: [unclosed\n")
        assert info.value.field_path == "<yaml>"

    def test_empty_file(self):
        with pytest.raises(ConfigError):
            parse_scenario("")

    def test_defaults_from_config(self):
        config = parse_scenario(SMALL, defaults={"service": {"confidence_threshold": 200, "deadline_ticks": 4}})
        assert config.confidence_threshold == 200
        assert config.deadline_ticks == 4
        corroborated = parse_scenario(SMALL + "policy:\n  kind: corroboration\n",
                                      defaults={"validation": {"tolerance": 25}})
        assert corroborated.policy.tolerance == 25

    def test_every_bundled_scenario_parses(self):
        files = sorted(SCENARIOS.glob("*.yaml"))
        assert len(files) >= 10
        for path in files:
            assert load_scenario(path).name == path.stem

    def test_missing_scenario_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(tmp_path / "absent.yaml")


class TestLoadConfig:
    def test_missing_file_gives_empty_config(self, tmp_path, capsys):
        assert load_config(str(tmp_path / "absent.yaml")) == {}
        assert "Warning" in capsys.readouterr().out

    def test_reads_yaml(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("service:\n  confidence_threshold: 90\n")
        assert load_config(str(path)) == {"service": {"confidence_threshold": 90}}


class TestOracle:
    def test_joint_weights(self):
        assert oracle_bigram_vector([0, 1, 0, 1], 2) == [0, 666_667, 333_333, 0]

    def test_conditional_weights(self):
        assert oracle_bigram_vector([0, 1, 0, 1], 2, conditional=True) == [0, 1_000_000, 1_000_000, 0]

    def test_short_log(self):
        assert oracle_bigram_vector([1], 2) == [0, 0, 0, 0]


class TestRunScenario:
    def test_small_run_is_exact(self):
        report = run_scenario(parse_scenario(SMALL)).report
        (record,) = report.rounds
        assert record["status"] == "closed"
        assert record["accepted"] == [1, 2]
        assert record["exact"]
        assert record["sums"] == record["oracle_sums"]
        assert report.invariant_violations == 0

    def test_honest_10(self):
        report = run_scenario(load_scenario(SCENARIOS / "honest_10.yaml")).report
        assert report.invariant_violations == 0
        assert [r["exact"] for r in report.rounds] == [True, True]
        for record in report.rounds:
            assert record["accepted"] == list(range(1, 11))
            assert record["dropouts_revealed"] == []
            assert record["predictions"] == record["oracle_predictions"]

    def test_socket_transport_gives_the_same_report(self):
        config = parse_scenario(SMALL)
        assert run_scenario(config, "socket").report.to_jsonl() == run_scenario(config, "bus").report.to_jsonl()

    def test_capture_finds_no_leaks_in_honest_run(self):
        result = run_scenario(parse_scenario(SMALL), capture=True)
        assert result.transcript
        assert set(result.report.run["sentinels"]) == {"1", "2"}
        assert verify_transcripts(result.report, result.transcript) == []

    def test_skip_blinding_is_detected(self):
        config = parse_scenario(SMALL + "debug:\n  skip_blinding: true\n")
        result = run_scenario(config, capture=True)
        (record,) = result.report.rounds
        assert record["rejections"] == {"ModeMismatch": 2}
        assert result.report.invariant_violations > 0
        leaks = verify_transcripts(result.report, result.transcript)
        assert {v["kind"] for v in leaks} >= {"plaintext_model"}
        assert not any(v["expected"] for v in leaks)

    def test_seed_changes_deployment(self):
        config = parse_scenario(SMALL)
        first = run_scenario(config).report
        config.seed = 6
        second = run_scenario(config).report
        assert first.run["approved_measurement"] != second.run["approved_measurement"]
        assert second.invariant_violations == 0

    def test_report_round_trips_through_jsonl(self):
        report = run_scenario(parse_scenario(SMALL)).report
        assert RunReport.from_jsonl(report.to_jsonl()).records == report.records

    def test_modes_in_run_record(self):
        config = load_scenario(SCENARIOS / "alice_538.yaml")
        assert config.clients[0].mode.kind is AdversaryKind.OUT_OF_RANGE
        run = run_scenario(config).report.run
        assert run["clients"][0]["mode"] == "out_of_range(538, bypass)"
        assert run["clients"][0]["self_leaking"] is True


class TestCli:
    def test_run_then_verify(self, tmp_path, capsys):
        config = str(tmp_path / "absent.yaml")
        code = main(["--config", config, "run", str(SCENARIOS / "alice_538.yaml"),
                     "--out", str(tmp_path), "--capture-transcripts"])
        assert code == 0
        report = tmp_path / "alice_538.report.jsonl"
        transcript = tmp_path / "alice_538.transcript.jsonl"
        assert report.exists() and transcript.exists()
        assert "Invariant violations: 0" in capsys.readouterr().out

        assert main(["--config", config, "verify", str(report), str(transcript)]) == 0
        out = capsys.readouterr().out
        assert "attacker's own data" in out
        assert "VIOLATION" not in out

    def test_verify_needs_sentinels(self, tmp_path, capsys):
        config = str(tmp_path / "absent.yaml")
        assert main(["--config", config, "run", str(SCENARIOS / "honest_10.yaml"), "--out", str(tmp_path)]) == 0
        (tmp_path / "empty.jsonl").write_text("")
        assert main(["--config", config, "verify", str(tmp_path / "honest_10.report.jsonl"),
                     str(tmp_path / "empty.jsonl")]) == 1
        assert "--capture-transcripts" in capsys.readouterr().out

    def test_bad_scenario_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(scenario_text(clients="clients:\n  - id: 1\n    mode: sneaky\n"))
        assert main(["--config", str(tmp_path / "absent.yaml"), "run", str(bad), "--out", str(tmp_path)]) == 1
        assert f"{bad}:6: clients[0].mode" in capsys.readouterr().out

    def test_seed_override_written_to_report(self, tmp_path):
        main(["--config", str(tmp_path / "absent.yaml"), "run", str(SCENARIOS / "honest_10.yaml"),
              "--out", str(tmp_path), "--seed", "42", "--transport", "socket"])
        first = json.loads((tmp_path / "honest_10.report.jsonl").read_text().splitlines()[0])
        assert first["seed"] == 42

    def test_list_scenarios(self, tmp_path, capsys):
        config = tmp_path / "config.yaml"
        config.write_text(f"harness:\n  scenarios_dir: \"{SCENARIOS.as_posix()}\"\n")
        assert main(["--config", str(config), "list-scenarios"]) == 0
        out = capsys.readouterr().out
        assert "honest_10" in out
        assert "trending_trump" in out
