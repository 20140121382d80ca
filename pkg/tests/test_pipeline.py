import filecmp
import json
import shutil

import numpy as np
import pytest

from riverpath.chromio import read_rows
from riverpath.config import load_config
from riverpath.pipeline import STAGES, StageError, run_pipeline, run_stage, site_groups


def numeric_outputs(root):
    skip = {"run_report.json"}
    return sorted(p.relative_to(root) for p in root.rglob("*")
                  if p.is_file() and p.parent.name != "stages" and p.name not in skip)


class TestRun:
    def test_report_lists_every_stage(self, mini_rhine_run):
        cfg, out, report = mini_rhine_run
        assert [s["stage"] for s in report["stages"]] == list(STAGES)
        assert report["seed"] == 17
        assert json.loads((out / "run_report.json").read_text())["stages"][0]["stage"] == "sync"

    def test_expected_outputs(self, mini_rhine_run):
        _, out, _ = mini_rhine_run
        for rel in ("sync/volumes.csv", "decompose/ranks.csv", "decompose/components.csv",
                    "pathmodel/model.json", "pathmodel/summary.txt", "predict/nrmse.csv", "match/hits.csv"):
            assert (out / rel).is_file(), rel

    def test_rank_table_is_complete(self, mini_rhine_run):
        cfg, out, _ = mini_rhine_run
        rows = read_rows(out / "decompose" / "ranks.csv")
        per_window = {}
        for r in rows:
            per_window.setdefault((r["group"], r["window_id"]), []).append(int(r["rank"]))
        expected = list(range(cfg["decompose.f_min"], cfg["decompose.f_max"] + 1))
        assert all(v == expected for v in per_window.values())

    def test_nrmse_table_is_finite(self, mini_rhine_run):
        _, out, _ = mini_rhine_run
        vals = [float(r["nrmse"]) for r in read_rows(out / "predict" / "nrmse.csv")]
        assert vals and np.all(np.isfinite(vals)) and min(vals) >= 0

    def test_groups(self, mini_rhine_run):
        cfg, _, _ = mini_rhine_run
        g = site_groups(cfg)
        assert list(g) == ["HON", "main"] and "HON" not in g["main"]


class TestCheckpoint:
    @pytest.mark.parametrize("stages", [("pathmodel", "predict", "match"), ("report",)])
    def test_rerun_stage_reproduces_outputs(self, mini_rhine_run, tmp_path, stages):
        cfg, out, _ = mini_rhine_run
        copy = tmp_path / "run"
        shutil.copytree(out, copy)
        for name in stages:
            (copy / "stages" / f"{name}.json").unlink()
            run_stage(name, cfg, copy)
        for rel in numeric_outputs(out):
            assert filecmp.cmp(out / rel, copy / rel, shallow=False), rel
        assert all((copy / "stages" / f"{n}.json").is_file() for n in stages)

    def test_stage_without_inputs_fails(self, mini_rhine_data, tmp_path):
        _, paths = mini_rhine_data
        cfg = load_config(paths["config"], {"output.dir": str(tmp_path / "empty")})
        with pytest.raises(StageError) as exc:
            run_stage("pathmodel", cfg)
        assert exc.value.stage == "pathmodel" and exc.value.exit_code == 3


class TestFailures:
    def test_missing_flow_table_aborts_in_sync(self, mini_rhine_data, tmp_path):
        _, paths = mini_rhine_data
        cfg = load_config(paths["config"], {"output.dir": str(tmp_path / "o"),
                                            "data.flow_table": str(tmp_path / "nope.csv")})
        with pytest.raises(StageError) as exc:
            run_pipeline(cfg)
        assert exc.value.stage == "sync" and exc.value.exit_code == 3
        assert not (tmp_path / "o" / "sync" / "volumes.csv").exists()

    def test_unknown_stage(self, mini_rhine_data, tmp_path):
        from riverpath.config import ConfigError
        _, paths = mini_rhine_data
        cfg = load_config(paths["config"], {"output.dir": str(tmp_path)})
        with pytest.raises(ConfigError):
            run_stage("nope", cfg)
