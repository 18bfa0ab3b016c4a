import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from iuqval.benchmark import BENCHMARK
from iuqval.cli import main
from iuqval.core import read_dataset_csv
from iuqval.pipeline import OUT_ENV, PipelineError, RunManifest, load_config, output_lock, run_all, run_stages
from iuqval.prediction import bma_weights
from iuqval.validation import read_bf_table_csv

SMALL = {
    "schema_version": 1,
    "dataset": "small",
    "paths": {"output": "out"},
    "seeds": {"generate": 1, "split": 2, "surrogate": 3, "iuq": 4, "validate": 5, "predict": 6},
    "generator": {"n_iuq": 20, "n_tests": 12},
    "surrogate": {"enabled": False},
    "mcmc": {"n_samples": 3000, "burn_in": 1000, "thinning": 5},
    "bias": {"modes": "both", "n_restarts": 1},
    "validation": {"n_samples": 500},
    "prediction": {"n_samples": 200},
}


def write_config(tmp_path, **changes):
    raw = json.loads(json.dumps(SMALL))
    for key, value in changes.items():
        block, _, field = key.partition("__")
        if field:
            raw.setdefault(block, {})[field] = value
        else:
            raw[block] = value
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = load_config(write_config(tmp))
    run_all(cfg)
    return cfg


class TestConfig:
    def test_unknown_key(self, tmp_path):
        with pytest.raises(PipelineError, match="extra"):
            load_config(write_config(tmp_path, mcmc__n_sample=10))

    def test_schema_version(self, tmp_path):
        with pytest.raises(PipelineError, match="schema_version"):
            load_config(write_config(tmp_path, schema_version=2))

    def test_missing_file(self, tmp_path):
        with pytest.raises(PipelineError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_missing_data_dir(self, tmp_path):
        with pytest.raises(PipelineError, match="does not exist"):
            load_config(write_config(tmp_path, paths={"output": "o", "data": "missing"}))

    def test_output_precedence(self, tmp_path, monkeypatch):
        p = write_config(tmp_path)
        assert load_config(p).paths.output == str(tmp_path / "out")
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        assert load_config(p).paths.output == str(tmp_path / "env")
        assert load_config(p, out=str(tmp_path / "flag")).paths.output == str(tmp_path / "flag")

    def test_hash_ignores_output(self, tmp_path):
        p = write_config(tmp_path)
        assert load_config(p, out="a").config_hash() == load_config(p, out="b").config_hash()
        assert load_config(p).config_hash() != load_config(p, seed_override=9).config_hash()

    def test_seed_override(self, tmp_path):
        seeds = load_config(write_config(tmp_path), seed_override=42).seeds
        assert {seeds.generate, seeds.split, seeds.surrogate, seeds.iuq, seeds.validate_, seeds.predict} == {42}

    def test_bias_mode_override(self, tmp_path):
        assert load_config(write_config(tmp_path), bias_mode="off").bias_modes() == ("off",)


class TestStages:
    def test_generate_deterministic(self, tmp_path):
        p = write_config(tmp_path)
        a = run_stages(load_config(p, out=str(tmp_path / "a")), ["generate"])
        b = run_stages(load_config(p, out=str(tmp_path / "b")), ["generate"])
        assert a.stages["generate"]["artifacts"] == b.stages["generate"]["artifacts"]
        for name in ("iuq", "val", "pred"):
            assert (tmp_path / "a" / "data" / f"{name}.csv").read_bytes() == \
                   (tmp_path / "b" / "data" / f"{name}.csv").read_bytes()

    def test_noise_free_unbiased_data(self, tmp_path):
        p = write_config(tmp_path, generator__noise_std=0.0, generator__bias=False)
        cfg = load_config(p)
        run_stages(cfg, ["generate"])
        d = read_dataset_csv(tmp_path / "out" / "data" / "iuq.csv")
        expected = BENCHMARK.evaluate(d.X, np.tile(cfg.generator.theta_star, (len(d), 1)))
        np.testing.assert_allclose(d.y, expected, rtol=1e-12, atol=1e-12)

    def test_split(self, tmp_path):
        run_stages(load_config(write_config(tmp_path)), ["generate"])
        val = read_dataset_csv(tmp_path / "out" / "data" / "val.csv")
        pred = read_dataset_csv(tmp_path / "out" / "data" / "pred.csv")
        assert len(val) == len(pred) == 6
        assert not set(val.test_ids) & set(pred.test_ids)

    def test_missing_upstream(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        run_stages(cfg, ["generate", "surrogate"])
        with pytest.raises(PipelineError, match="iuq") as err:
            run_stages(cfg, ["validate"])
        assert err.value.stage == "validate"

    def test_tampered_artifact(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        run_stages(cfg, ["generate"])
        f = tmp_path / "out" / "data" / "iuq.csv"
        f.write_text(f.read_text() + "\n")
        with pytest.raises(PipelineError, match="checksum"):
            run_stages(cfg, ["surrogate"])

    def test_config_change_detected(self, tmp_path):
        run_stages(load_config(write_config(tmp_path)), ["generate"])
        changed = load_config(write_config(tmp_path, validation__n_samples=400))
        with pytest.raises(PipelineError, match="different configuration"):
            run_stages(changed, ["surrogate"])

    def test_lock(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        with output_lock(tmp_path / "out"):
            with pytest.raises(PipelineError, match="locked"):
                run_stages(cfg, ["generate"])
        assert not (tmp_path / "out" / ".lock").exists()

    def test_empty_prediction_set(self, tmp_path, finished_run):
        # empty the prediction set in a copy of a finished run
        out = tmp_path / "copy"
        shutil.copytree(finished_run.paths.output, out)
        cfg = load_config(write_config(tmp_path), out=str(out))
        pred = out / "data" / "pred.csv"
        pred.write_text(pred.read_text().splitlines()[0] + "\n")
        m = RunManifest(out, cfg.config_hash())
        m.record("generate", [out / "data" / n for n in ("iuq.csv", "val.csv", "pred.csv")])
        with pytest.raises(PipelineError, match="empty"):
            run_stages(cfg, ["predict"])


class TestFullRun:
    def test_artifacts(self, finished_run):
        m = json.loads((Path(finished_run.paths.output) / "manifest.json").read_text())
        assert set(m["stages"]) == {"generate", "surrogate", "iuq", "validate", "predict", "report"}
        for rec in m["stages"].values():
            assert rec["artifacts"]

    def test_weights_match_bayes_factors(self, finished_run):
        root = Path(finished_run.paths.output)
        table = read_bf_table_csv(root / "report" / "bf_table.csv")
        with (root / "report" / "weights.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(table) == 8
        for row in rows:
            mode = "no_bias" if row["model"] == "D" else "with_bias"
            w = bma_weights(table[("small", mode, row["qoi"])])
            assert float(row["w_prior"]) == w.w_prior
            assert float(row["w_posterior"]) == w.w_posterior

    def test_rerun_identical(self, tmp_path, finished_run):
        cfg = load_config(write_config(tmp_path), out=str(tmp_path / "again"))
        again = run_all(cfg)
        first = json.loads((Path(finished_run.paths.output) / "manifest.json").read_text())["stages"]
        assert {k: v["artifacts"] for k, v in first.items()} == {k: v["artifacts"] for k, v in again.stages.items()}

    def test_summary_flags(self, finished_run):
        root = Path(finished_run.paths.output)
        text = (root / "report" / "summary.txt").read_text()
        table = read_bf_table_csv(root / "report" / "bf_table.csv")
        assert text.startswith("dataset: small")
        assert ("prior-favored or neutral entries:" in text) == any(b <= 1 for b in table.values())


class TestCli:
    def test_exit_codes(self, tmp_path, capsys):
        p = write_config(tmp_path)
        assert main(["generate", "--config", str(p)]) == 0
        assert main(["validate", "--config", str(p)]) == 2
        assert "[validate]" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        p = write_config(tmp_path, bogus=1)
        assert main(["generate", "--config", str(p)]) == 2
        assert "[config]" in capsys.readouterr().err

    def test_all_prints_summary(self, tmp_path, capsys):
        p = write_config(tmp_path)
        assert main(["all", "--config", str(p), "--bias-mode", "off", "--out", str(tmp_path / "cli")]) == 0
        out = capsys.readouterr().out
        assert "BMA weights" in out and "D  A" in out
        assert not (tmp_path / "cli" / "iuq" / "with_bias").exists()

    def test_bad_command(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["fly", "--config", str(write_config(tmp_path))])
