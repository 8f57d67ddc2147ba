import csv
import json
import shutil

import pytest

from conftest import FIXTURES
from mockmodel import respond
from olyharness.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, REASONING_PROMPT, main, reasoning_prompt
from olyharness.llm import FunctionProvider, Gateway, ResponseCache, RetryPolicy, TransportError
from olyharness.probe import Direction, load_corpus, probe_prompt
from olyharness.problem_model import parse_problem_set

GOLDEN = FIXTURES / "golden"
CONFIG = GOLDEN / "config.toml"
PROBLEMS = FIXTURES / "problems"


def mock_gateway(tmp_path, fn=respond):
    provider = FunctionProvider(fn)
    return Gateway({"mock": provider}, cache=ResponseCache(tmp_path / "cache"),
                   policy=RetryPolicy(sleep=lambda s: None)), provider


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_config(tmp_path, text):
    path = tmp_path / "config.toml"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestRun:
    def test_replay_matches_golden(self, tmp_path):
        out = tmp_path / "run"
        assert main(["--config", str(CONFIG), "--out", str(out), "run"]) == EXIT_OK
        for name in ("experiment.json", "summary.csv"):
            assert (out / name).read_bytes() == (GOLDEN / "expected" / name).read_bytes()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["cache"]["network_calls"] == 0 and manifest["cache"]["misses"] == 0
        assert manifest["tallies"] == {"problems": 3, "graded": 2, "ungraded": 1, "errors": 0, "no_reference": 0}
        assert sorted(p.name for p in (out / "reports").iterdir()) == ["2004-2.json", "2010-3.json"]

    def test_total_excludes_format_failure(self, tmp_path):
        main(["--config", str(CONFIG), "--out", str(tmp_path), "run"])
        row = read_csv(tmp_path / "summary.csv")[0]
        assert row["total"] == "2" and row["setting"] == "MoA, R=1, (3 rounds)"

    def test_rounds_mismatch_exit_2(self, tmp_path, capsys):
        config = write_config(tmp_path, f'[benchmark]\npath = "{PROBLEMS}"\n[pipeline]\nkind = "moa"\n'
                                        'N = 2\nM = 2\nR = 1\nrounds = 4\nsolver_models = ["mock/a"]\n')
        assert main(["--config", config, "--out", str(tmp_path / "o"), "run"]) == EXIT_CONFIG
        assert "rounds = R + 2" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.toml"), "run"]) == EXIT_CONFIG

    def test_unknown_grading_key(self, tmp_path):
        config = write_config(tmp_path, f'[benchmark]\npath = "{PROBLEMS}"\n[pipeline]\nkind = "vanilla"\n'
                                        'solver_models = ["mock/a"]\n[grading]\nweight = 1\n')
        assert main(["--config", config, "--out", str(tmp_path / "o"), "run"]) == EXIT_CONFIG

    def test_transport_failures_exit_1(self, tmp_path):
        def down(req):
            raise TransportError("gone", 503)
        gw, _ = mock_gateway(tmp_path, down)
        config = write_config(tmp_path, f'[benchmark]\npath = "{PROBLEMS}"\n[pipeline]\nkind = "vanilla"\n'
                                        'solver_models = ["mock/a"]\n')
        out = tmp_path / "o"
        assert main(["--config", config, "--out", str(out), "run"], gw) == EXIT_RUNTIME
        record = json.loads((out / "experiment.json").read_text())
        assert record["tallies"]["errors"] == 3

    def test_global_flags_after_subcommand(self, tmp_path):
        out = tmp_path / "late"
        assert main(["run", "--config", str(CONFIG), "--out", str(out), "--parallelism", "2"]) == EXIT_OK
        assert (out / "experiment.json").read_bytes() == (GOLDEN / "expected" / "experiment.json").read_bytes()


class TestJudge:
    def test_replay_matches_golden(self, tmp_path):
        record = GOLDEN / "expected" / "experiment.json"
        assert main(["--config", str(CONFIG), "--out", str(tmp_path), "judge", "--record", str(record)]) == EXIT_OK
        for name in ("scorecards.jsonl", "scorecard_aggregate.json"):
            assert (tmp_path / name).read_bytes() == (GOLDEN / "expected" / name).read_bytes()

    def test_missing_gold_reasoning_skipped(self, tmp_path):
        problems = tmp_path / "problems"
        shutil.copytree(PROBLEMS, problems)
        data = json.loads((problems / "2004-2.json").read_text())
        data["gold_reasoning"] = ""
        (problems / "2004-2.json").write_text(json.dumps(data), encoding="utf-8")
        gw, _ = mock_gateway(tmp_path)
        out = tmp_path / "out"
        code = main(["--config", str(CONFIG), "--out", str(out), "judge", "--problems", str(problems),
                     "--record", str(GOLDEN / "expected" / "experiment.json")], gw)
        assert code == EXIT_OK
        assert len((out / "scorecards.jsonl").read_text().splitlines()) == 1
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["warnings_count"] == 1 and "no gold reasoning" in manifest["warnings"][0]

    def test_empty_record(self, tmp_path):
        record = tmp_path / "empty.json"
        record.write_text(json.dumps({"results": []}), encoding="utf-8")
        out = tmp_path / "out"
        assert main(["--config", str(CONFIG), "--out", str(out), "judge", "--record", str(record)]) == EXIT_OK
        assert (out / "scorecards.jsonl").read_text() == ""

    def test_judge_uses_system_prompt(self, tmp_path):
        gw, provider = mock_gateway(tmp_path)
        main(["--config", str(CONFIG), "--out", str(tmp_path / "o"), "judge",
              "--record", str(GOLDEN / "expected" / "experiment.json")], gw)
        assert provider.calls and all(c.system_prompt.startswith("Given the evaluation rules") for c in provider.calls)
        assert all(c.temperature == 0 for c in provider.calls)


class TestGenReasoning:
    def test_files_and_skip(self, tmp_path):
        gw, provider = mock_gateway(tmp_path, lambda req: "# Draft reasoning\nstep one")
        out = tmp_path / "out"
        assert main(["--config", str(CONFIG), "--out", str(out), "gen-reasoning", "--model", "mock/writer"], gw) == 0
        assert sorted(p.name for p in out.glob("*.md")) == ["2004-2.md", "2010-3.md"]
        assert (out / "2004-2.md").read_text() == "# Draft reasoning\nstep one\n"
        manifest = json.loads((out / "manifest.json").read_text())
        assert any("2015-1" in w and "no solution" in w for w in manifest["warnings"])
        assert provider.call_count == 2

    def test_prompt_verbatim(self):
        problem = next(p for p in parse_problem_set(PROBLEMS) if p.year == 2004)
        prompt = reasoning_prompt(problem)
        head = REASONING_PROMPT.split("{problem_text}")[0]
        assert prompt.startswith(head) and prompt.endswith("## Your response:\n")
        assert problem.solution in prompt and problem.statement.strip() in prompt

    def test_cached_rerun_identical(self, tmp_path):
        gw, provider = mock_gateway(tmp_path, lambda req: f"text for {len(req.messages[0].content)}")
        for name in ("a", "b"):
            main(["--config", str(CONFIG), "--out", str(tmp_path / name), "gen-reasoning", "--model", "mock/w"], gw)
        assert provider.call_count == 2
        for f in ("2004-2.md", "2010-3.md"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestReport:
    def test_golden_distribution(self, tmp_path):
        record = GOLDEN / "expected" / "experiment.json"
        assert main(["--out", str(tmp_path), "report", str(record)]) == EXIT_OK
        for key in ("family", "subject", "type"):
            name = f"distribution_{key}.csv"
            assert (tmp_path / name).read_bytes() == (GOLDEN / "expected" / name).read_bytes()
        fam = {r["group"]: r for r in read_csv(tmp_path / "distribution_family.csv")}
        assert fam["Uralic"]["n"] == "1" and fam["Atlantic-Congo"]["n"] == "1"
        subj = {r["group"]: r["n"] for r in read_csv(tmp_path / "distribution_subject.csv")}
        assert subj == {"Morphology": "2", "Syntax": "1"}

    def test_two_records_double(self, tmp_path):
        record = str(GOLDEN / "expected" / "experiment.json")
        main(["--out", str(tmp_path), "report", record, record])
        fam = {r["group"]: r["n"] for r in read_csv(tmp_path / "distribution_family.csv")}
        assert fam == {"Atlantic-Congo": "2", "Uralic": "2"}
        assert len(read_csv(tmp_path / "summary.csv")) == 2

    def test_zero_graded_warns(self, tmp_path):
        record = tmp_path / "empty.json"
        record.write_text(json.dumps({"label": "x", "summary": {"setting": "x", "avg_score": "---", "B1": 0,
                                      "B2": 0, "B3": 0, "B4": 0, "total": 0}, "results": []}), encoding="utf-8")
        out = tmp_path / "out"
        assert main(["--out", str(out), "report", str(record)]) == EXIT_OK
        assert read_csv(out / "distribution_family.csv") == []
        assert json.loads((out / "manifest.json").read_text())["warnings"] == ["no graded problems in the given records"]


class TestProbe:
    def run(self, tmp_path, fn, *extra):
        gw, provider = mock_gateway(tmp_path, fn)
        out = tmp_path / "out"
        code = main(["--out", str(out), "probe", "--corpus", str(FIXTURES / "probe" / "corpus.csv"),
                     "--languages", str(FIXTURES / "probe" / "languages.csv"), "--model", "mock/p", *extra], gw)
        return code, out

    def echo(self):
        answers = {}
        for s in load_corpus(FIXTURES / "probe" / "corpus.csv"):
            answers[probe_prompt(s, Direction.E2T)] = s.target
            answers[probe_prompt(s, Direction.T2E)] = s.english
        return lambda req: answers[req.messages[0].content]

    def test_echo(self, tmp_path):
        code, out = self.run(tmp_path, self.echo())
        assert code == EXIT_OK
        assert {r["mean_chrf"] for r in read_csv(out / "probe.csv")} == {"100.0000"}
        assert read_csv(out / "missing.csv") == []
        assert all("constant input" in r["note"] for r in read_csv(out / "spearman.csv"))
        for name in ("outputs.jsonl", "anova.csv", "anova.txt", "manifest.json"):
            assert (out / name).exists()

    def test_single_direction(self, tmp_path):
        code, out = self.run(tmp_path, self.echo(), "--direction", "T2E")
        assert code == EXIT_OK and {r["direction"] for r in read_csv(out / "probe.csv")} == {"T2E"}

    def test_corpus_error_exit_2(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("lang_name,script\nX,Latin\n", encoding="utf-8")
        gw, _ = mock_gateway(tmp_path)
        assert main(["--out", str(tmp_path / "o"), "probe", "--corpus", str(bad), "--model", "mock/p"], gw) == EXIT_CONFIG

    def test_no_model_exit_2(self, tmp_path):
        assert main(["probe", "--corpus", str(FIXTURES / "probe" / "corpus.csv")]) == EXIT_CONFIG


class TestKb:
    def config(self, tmp_path):
        return write_config(tmp_path, '[provider.stub]\nkind = "hash"\ndim = 32\n'
                                      '[kb]\nindex = "kb"\nembedding_model = "stub/hash"\n')

    def test_ingest_and_search(self, tmp_path, capsys):
        config = self.config(tmp_path)
        manifest = str(FIXTURES / "grammars" / "manifest.jsonl")
        assert main(["--config", config, "--cache-dir", str(tmp_path / "c"), "kb", "ingest", "--manifest", manifest]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in lines] == ["finnish", "swahili", "turkish", "tamasheq", "quechua"]
        assert (tmp_path / "kb" / "manifest.json").exists()
        assert main(["--config", config, "--cache-dir", str(tmp_path / "c"), "kb", "search", "elative case",
                     "--glottocode", "finn1318", "--top-k", "2"]) == 0
        hits = capsys.readouterr().out.splitlines()
        assert 1 <= len(hits) <= 2 and all(h.split("\t")[3] == "finn1318" for h in hits)

    def test_fulltext_without_embeddings(self, tmp_path, capsys):
        index = tmp_path / "plain"
        manifest = str(FIXTURES / "grammars" / "manifest.jsonl")
        assert main(["kb", "ingest", "--manifest", manifest, "--index", str(index)]) == 0
        capsys.readouterr()
        assert main(["kb", "search", "noun class", "--index", str(index), "--mode", "fulltext"]) == 0
        assert "swahili" in capsys.readouterr().out
        assert main(["kb", "search", "noun class", "--index", str(index), "--mode", "vector"]) == EXIT_CONFIG

    def test_bad_manifest(self, tmp_path):
        bad = tmp_path / "m.jsonl"
        bad.write_text('{"doc_id": "x"}\n', encoding="utf-8")
        assert main(["kb", "ingest", "--manifest", str(bad), "--index", str(tmp_path / "i")]) == EXIT_CONFIG

    def test_empty_query(self, tmp_path):
        index = tmp_path / "plain"
        main(["kb", "ingest", "--manifest", str(FIXTURES / "grammars" / "manifest.jsonl"), "--index", str(index)])
        assert main(["kb", "search", " ", "--index", str(index), "--mode", "fulltext"]) == EXIT_CONFIG
