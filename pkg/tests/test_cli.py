"""CLI behavior: config precedence, command round trips, error paths."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from search2vec.cli import build_pipeline_config, build_parser, load_config_file, main
from search2vec.embeddings import load_vectors
from conftest import make_session

DATA = Path(__file__).parent / "data"


def write_min_sessions(path: Path) -> None:
    from search2vec.sessions import write_sessions

    sessions = []
    for i in range(30):
        sessions.append(make_session(f"u{i}", [("q", "alpha"), ("q", "beta")]))
        sessions.append(make_session(f"v{i}", [("q", "beta"), ("a", "ad1", 30)]))
    write_sessions(sessions, str(path))


class TestConfig:
    def test_file_values_and_comments(self, tmp_path):
        conf = tmp_path / "s2v.conf"
        conf.write_text("dim = 25 # inline comment\n\n# full comment\ntau = 0.5\n")
        values = load_config_file(str(conf))
        assert values == {"dim": "25", "tau": "0.5"}

    def test_flag_overrides_file_overrides_default(self, tmp_path):
        conf = tmp_path / "s2v.conf"
        conf.write_text("dim = 25\nwindow = 9\n")
        parser = build_parser()
        args = parser.parse_args(
            ["train", "--sessions", "s", "--out-prefix", "p",
             "--config", str(conf), "--dim", "7"]
        )
        config = build_pipeline_config(args)
        assert config.dim == 7  # flag wins
        assert config.window == 9  # file wins over default
        assert config.negatives == 5  # published default

    def test_unknown_config_key_rejected(self, tmp_path):
        conf = tmp_path / "s2v.conf"
        conf.write_text("not_a_knob = 3\n")
        parser = build_parser()
        args = parser.parse_args(
            ["train", "--sessions", "s", "--out-prefix", "p", "--config", str(conf)]
        )
        with pytest.raises(ValueError, match="not_a_knob"):
            build_pipeline_config(args)

    def test_defaults_are_the_published_constants(self):
        args = build_parser().parse_args(["ingest", "--events", "e", "--sessions", "s"])
        config = build_pipeline_config(args)
        assert (config.dim, config.window, config.negatives) == (300, 5, 5)
        assert (config.min_count, config.subsample, config.epochs) == (10, 1e-5, 10)
        assert (config.tau_c, config.tau, config.k, config.elastic_k) == (
            0.45, 0.65, 30, 10,
        )
        assert config.seed == 42


class TestIngest:
    def test_fixture_counts(self, tmp_path, capsys):
        code = main([
            "ingest",
            "--events", str(DATA / "events.tsv"),
            "--sessions", str(tmp_path / "sessions.tsv"),
            "--report", str(tmp_path / "report.json"),
        ])
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["malformed"] == 3
        assert report["discarded_singletons"] == 2
        assert report["sessions"] > 0
        assert len(report["errors"]) == 3

    def test_empty_event_file(self, tmp_path):
        (tmp_path / "events.tsv").write_text("")
        code = main([
            "ingest",
            "--events", str(tmp_path / "events.tsv"),
            "--sessions", str(tmp_path / "sessions.tsv"),
            "--report", str(tmp_path / "report.json"),
        ])
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report == {
            "discarded_singletons": 0, "errors": [], "events": 0,
            "malformed": 0, "sessions": 0,
        }
        assert (tmp_path / "sessions.tsv").read_text() == ""


class TestTrain:
    def args(self, tmp_path, prefix="vectors", extra=()):
        return [
            "train",
            "--sessions", str(tmp_path / "sessions.tsv"),
            "--out-prefix", str(tmp_path / prefix),
            "--dim", "8", "--window", "2", "--negatives", "2",
            "--epochs", "3", "--alpha", "0.05",
            "--min-count", "1", "--subsample", "0",
            *extra,
        ]

    def test_zero_epochs_writes_init_vectors(self, tmp_path):
        write_min_sessions(tmp_path / "sessions.tsv")
        code = main(self.args(tmp_path, extra=["--epochs", "0"]))
        assert code == 0
        manifest = json.loads((tmp_path / "vectors.manifest.json").read_text())
        assert manifest["epochs"] == []
        space = load_vectors(str(tmp_path / "vectors.out.vec"))
        assert not space.matrix.any()

    def test_same_seed_byte_identical_files(self, tmp_path):
        write_min_sessions(tmp_path / "sessions.tsv")
        assert main(self.args(tmp_path, prefix="a")) == 0
        assert main(self.args(tmp_path, prefix="b")) == 0
        for suffix in (".vec", ".out.vec", ".manifest.json"):
            assert (tmp_path / ("a" + suffix)).read_bytes() == (
                tmp_path / ("b" + suffix)
            ).read_bytes()

    def test_manifest_objective_increases(self, tmp_path):
        write_min_sessions(tmp_path / "sessions.tsv")
        assert main(self.args(tmp_path, extra=["--epochs", "6"])) == 0
        manifest = json.loads((tmp_path / "vectors.manifest.json").read_text())
        objectives = [e["objective_sample"] for e in manifest["epochs"]]
        assert objectives[-1] > objectives[0]
        assert manifest["seed"] == 42
        assert manifest["config_hash"]

    def test_ps_single_shard_matches_reference_files(self, tmp_path):
        write_min_sessions(tmp_path / "sessions.tsv")
        assert main(self.args(tmp_path, prefix="ref")) == 0
        assert main(
            self.args(
                tmp_path, prefix="ps",
                extra=["--mode", "ps", "--shards", "1", "--clients", "1"],
            )
        ) == 0
        assert (tmp_path / "ref.vec").read_bytes() == (tmp_path / "ps.vec").read_bytes()
        assert (tmp_path / "ref.out.vec").read_bytes() == (
            tmp_path / "ps.out.vec"
        ).read_bytes()

    def test_unknown_mode_fails_with_diagnostic(self, tmp_path, capsys):
        write_min_sessions(tmp_path / "sessions.tsv")
        parser_level = pytest.raises(SystemExit)
        with parser_level as excinfo:
            main(self.args(tmp_path, extra=["--mode", "bogus"]))
        assert excinfo.value.code == 2  # argparse usage error

    def test_threads_flag_caps_ps_clients(self, tmp_path):
        write_min_sessions(tmp_path / "sessions.tsv")
        code = main(
            self.args(
                tmp_path, prefix="capped",
                extra=["--mode", "ps", "--shards", "2", "--clients", "4",
                       "--threads", "1"],
            )
        )
        assert code == 0
        manifest = json.loads((tmp_path / "capped.manifest.json").read_text())
        assert manifest["config"]["clients"] == 1


class TestMatchCommand:
    def test_unknown_single_query_is_an_error(self, capsys):
        code = main([
            "match",
            "--vectors", str(DATA / "golden" / "vectors.vec"),
            "--query", "never seen before",
        ])
        assert code == 1
        assert "no vector" in capsys.readouterr().err

    def test_single_query_prints_matches(self, capsys):
        code = main([
            "match",
            "--vectors", str(DATA / "golden" / "vectors.vec"),
            "--query", "Espresso  MACHINE",  # normalization applies
            "--tau", "0.5",
        ])
        assert code == 0
        out = capsys.readouterr().out
        first = out.splitlines()[0].split("\t")
        assert first[0] == "espresso machine"
        assert first[1].startswith("ad")
        assert float(first[2]) > 0.5

    def test_lsh_flag_stays_within_exact_results(self, tmp_path):
        assert main([
            "match",
            "--vectors", str(DATA / "golden" / "vectors.vec"),
            "--queries-file", str(DATA / "probes.txt"),
            "--out", str(tmp_path / "exact.tsv"),
        ]) == 0
        assert main([
            "match", "--lsh",
            "--vectors", str(DATA / "golden" / "vectors.vec"),
            "--queries-file", str(DATA / "probes.txt"),
            "--out", str(tmp_path / "lsh.tsv"),
        ]) == 0
        exact = set((tmp_path / "exact.tsv").read_text().splitlines())
        approx = set((tmp_path / "lsh.tsv").read_text().splitlines())
        assert approx <= exact


class TestElasticCommand:
    def test_match_subcommand_prints_ranked_heads(self, capsys):
        code = main([
            "elastic", "match",
            "--index", str(DATA / "golden" / "elastic.idx"),
            "--query", "trail running shoes outlet near me",
        ])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split("\t")[0] == "trail running shoes"
        scores = [float(line.split("\t")[1]) for line in lines]
        assert scores == sorted(scores, reverse=True)

    def test_no_overlap_prints_nothing(self, capsys):
        code = main([
            "elastic", "match",
            "--index", str(DATA / "golden" / "elastic.idx"),
            "--query", "quantum chromodynamics",
        ])
        assert code == 0
        assert capsys.readouterr().out == ""


class TestEvalCommand:
    def test_content_mode_requires_content_vectors(self, capsys):
        code = main([
            "eval",
            "--vectors", str(DATA / "golden" / "vectors.vec"),
            "--judgments", str(DATA / "judgments.tsv"),
            "--mode", "content",
        ])
        assert code == 1
        assert "content-vectors" in capsys.readouterr().err

    def test_export_plot_rejects_empty_input(self, tmp_path, capsys):
        empty = tmp_path / "scored.tsv"
        empty.write_text("")
        code = main(["export-plot", "--scored", str(empty), "--out", str(tmp_path / "t")])
        assert code == 1


class TestUsageErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["match", "--vectors", "v", "--query", "q", "--bogus-flag"])
        assert excinfo.value.code == 2

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == 2


class TestLogging:
    def test_s2v_log_env_controls_verbosity(self, monkeypatch):
        import logging

        from search2vec.cli import _configure_logging

        monkeypatch.setenv("S2V_LOG", "debug")
        logging.getLogger().handlers.clear()
        _configure_logging()
        assert logging.getLogger().level == logging.DEBUG
        monkeypatch.setenv("S2V_LOG", "warning")
        logging.getLogger().handlers.clear()
        logging.getLogger().setLevel(logging.NOTSET)
        _configure_logging()
        assert logging.getLogger().level == logging.WARNING
