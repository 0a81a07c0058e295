"""Run the full CLI pipeline on the bundled fixture.

Shared by the end-to-end tests (byte-compare against tests/data/golden/)
and the golden regenerator: python tests/pipeline_helpers.py --write-golden
"""

from __future__ import annotations

import shutil
import sys
from pathlib import Path

from search2vec.cli import main as cli_main

DATA_DIR = Path(__file__).parent / "data"
GOLDEN_DIR = DATA_DIR / "golden"

# Every file the fixture pipeline produces, byte-compared against golden.
PIPELINE_OUTPUTS = [
    "sessions.tsv",
    "ingest_report.json",
    "vocab.tsv",
    "vectors.vec",
    "vectors.out.vec",
    "vectors.manifest.json",
    "matches.tsv",
    "elastic.idx",
    "elastic_dump.txt",
    "content.vec",
    "provenance.jsonl",
    "eval_context.txt",
    "eval_context_curve.tsv",
    "eval_context_scored.tsv",
    "eval_content.txt",
    "plot.tsv",
]


def run_fixture_pipeline(workdir: Path, mode: str = "reference") -> Path:
    """ingest -> vocab -> train -> match -> elastic -> coldstart -> eval."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    conf = str(DATA_DIR / "fixture.conf")

    def run(argv: list[str]) -> None:
        code = cli_main(argv)
        if code != 0:
            raise RuntimeError(f"pipeline step failed ({code}): {argv}")

    run([
        "ingest",
        "--events", str(DATA_DIR / "events.tsv"),
        "--sessions", str(workdir / "sessions.tsv"),
        "--report", str(workdir / "ingest_report.json"),
    ])
    run([
        "vocab", "--config", conf,
        "--sessions", str(workdir / "sessions.tsv"),
        "--out", str(workdir / "vocab.tsv"),
    ])
    train = [
        "train", "--config", conf,
        "--sessions", str(workdir / "sessions.tsv"),
        "--vocab", str(workdir / "vocab.tsv"),
        "--out-prefix", str(workdir / "vectors"),
    ]
    if mode != "reference":
        train += ["--mode", "ps", "--shards", "4", "--clients", "1"]
    run(train)
    run([
        "match", "--config", conf,
        "--vectors", str(workdir / "vectors.vec"),
        "--queries-file", str(DATA_DIR / "probes.txt"),
        "--out", str(workdir / "matches.tsv"),
    ])
    run([
        "elastic", "build", "--config", conf,
        "--vectors", str(workdir / "vectors.vec"),
        "--heads", str(DATA_DIR / "heads.txt"),
        "--matches", str(workdir / "matches.tsv"),
        "--out", str(workdir / "elastic.idx"),
        "--dump", str(workdir / "elastic_dump.txt"),
    ])
    run([
        "coldstart-ads", "--config", conf,
        "--catalog", str(DATA_DIR / "catalog.tsv"),
        "--vectors", str(workdir / "vectors.vec"),
        "--index", str(workdir / "elastic.idx"),
        "--out", str(workdir / "content.vec"),
        "--provenance", str(workdir / "provenance.jsonl"),
    ])
    run([
        "eval", "--config", conf,
        "--vectors", str(workdir / "vectors.vec"),
        "--judgments", str(DATA_DIR / "judgments.tsv"),
        "--mode", "context",
        "--report", str(workdir / "eval_context.txt"),
        "--curve", str(workdir / "eval_context_curve.tsv"),
        "--scored-out", str(workdir / "eval_context_scored.tsv"),
    ])
    run([
        "eval", "--config", conf,
        "--vectors", str(workdir / "vectors.vec"),
        "--judgments", str(DATA_DIR / "judgments.tsv"),
        "--mode", "content",
        "--content-vectors", str(workdir / "content.vec"),
        "--report", str(workdir / "eval_content.txt"),
    ])
    run([
        "export-plot",
        "--scored", str(workdir / "eval_context_scored.tsv"),
        "--out", str(workdir / "plot.tsv"),
    ])
    return workdir


def write_golden() -> None:
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        produced = run_fixture_pipeline(Path(tmp))
        GOLDEN_DIR.mkdir(exist_ok=True)
        for name in PIPELINE_OUTPUTS:
            shutil.copy(produced / name, GOLDEN_DIR / name)
    print(f"golden outputs written to {GOLDEN_DIR}")


if __name__ == "__main__":
    if "--write-golden" in sys.argv:
        write_golden()
    else:
        print(__doc__)
