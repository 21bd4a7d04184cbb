import hashlib
import json
from pathlib import Path

import pytest

from plc3d.cli import run
from plc3d.config import PRESETS, build_config, default_config_dict, derive_seed, load_config
from plc3d.errors import InvalidConfig
from plc3d.pipeline import run_in_memory


def small_config(workdir):
    raw = default_config_dict()
    raw["scene"].update(count=2, image_size=[80, 60], points_per_m2=6.0, view_count=2)
    raw["train"].update(steps=15, hidden=16)
    raw["embeddings"]["dim"] = 32
    raw["paths"]["workdir"] = str(workdir)
    return raw


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(small_config(tmp_path / "work")))
    return path


def snapshot(root):
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file()
    }


class TestConfig:
    def test_default_loads(self):
        cfg = load_config(environ={})
        assert cfg.scene_count == 10 and cfg.primary.value == "kos_like"
        assert [t.value for t in cfg.fusion.candidate_order] == ["det_t", "sw"]
        assert cfg.partition.categories == cfg.scene.names

    def test_workdir_env_override(self, cfg_file, tmp_path):
        cfg = load_config(cfg_file, environ={"PLC_WORKDIR": str(tmp_path / "elsewhere")})
        assert cfg.workdir == tmp_path / "elsewhere"

    def test_seed_override_changes_every_stage(self, cfg_file):
        a, b = load_config(cfg_file, environ={}), load_config(cfg_file, seed=9, environ={})
        assert b.seed == 9
        assert a.scene_config(0).seed != b.scene_config(0).seed
        assert a.train.seed != b.train.seed and a.fusion.seed != b.fusion.seed
        assert b.train.seed == derive_seed(9, 5)

    def test_presets(self, cfg_file):
        for name, patch in PRESETS.items():
            cfg = load_config(cfg_file, preset=name, environ={})
            assert cfg.train.loss_kind == patch["train"]["loss_kind"]
            assert cfg.fusion.t_high == patch["fusion"]["t_high"]
        with pytest.raises(InvalidConfig):
            load_config(cfg_file, preset="nope", environ={})

    def test_schema_error_names_key(self):
        raw = default_config_dict()
        raw["train"]["steps"] = 0
        with pytest.raises(InvalidConfig, match="train.steps"):
            build_config(raw, environ={})
        raw = default_config_dict()
        raw["scene"]["colour"] = 1
        with pytest.raises(InvalidConfig, match="scene"):
            build_config(raw, environ={})

    def test_unknown_vocabulary(self):
        raw = default_config_dict()
        raw["sources"][1]["vocabulary"].append("spaceship")
        with pytest.raises(InvalidConfig, match="spaceship"):
            build_config(raw, environ={})

    def test_missing_partition_file(self, tmp_path):
        raw = default_config_dict()
        raw["eval"] = {"partition": "nowhere.json"}
        with pytest.raises(InvalidConfig, match="eval.partition"):
            build_config(raw, tmp_path, environ={})


class TestCli:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run([]) == 2

    def test_gradcheck(self, capsys):
        assert run(["gradcheck", "--loss", "rpdc", "--seed", "7", "-q"]) == 0
        out = capsys.readouterr().out
        err = float(out.split(":")[1])
        assert err <= 1e-4

    def test_gradcheck_json(self, capsys):
        assert run(["gradcheck", "--seed", "1", "--instances", "1", "--json", "-q"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert set(data["max_rel_error"]) == {"clip_style", "pdc", "rpdc", "supervised"}
        assert data["ok"]

    def test_bad_fusion_thresholds(self, tmp_path, capsys):
        raw = small_config(tmp_path / "w")
        raw["fusion"].update(t_low=0.5, t_high=0.3)
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(raw))
        assert run(["fuse", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "t_low" in err and "t_high" in err

    def test_missing_config_file(self, tmp_path):
        assert run(["gen", "--config", str(tmp_path / "none.json"), "-q"]) == 2

    def test_missing_stage_input(self, cfg_file, capsys):
        assert run(["train", "--config", str(cfg_file), "-q"]) == 3
        assert "missing input" in capsys.readouterr().err

    def test_stages_match_pipeline(self, cfg_file, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("PLC_WORKDIR", raising=False)
        for stage in ("gen", "caption", "associate", "fuse", "embed", "train", "eval"):
            assert run([stage, "--config", str(cfg_file), "-q"]) == 0, stage
        staged = snapshot(tmp_path / "work")
        capsys.readouterr()
        monkeypatch.setenv("PLC_WORKDIR", str(tmp_path / "work2"))
        assert run(["pipeline", "--config", str(cfg_file), "-q", "--json"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert "hiou" in report["eval"]
        piped = snapshot(tmp_path / "work2")
        assert staged.keys() == piped.keys()
        for name in staged:
            if name != "config.json":  # records its own workdir
                assert staged[name] == piped[name], name

    def test_idempotent_and_inputs_untouched(self, cfg_file, tmp_path, monkeypatch):
        monkeypatch.delenv("PLC_WORKDIR", raising=False)
        assert run(["pipeline", "--config", str(cfg_file), "-q"]) == 0
        first = snapshot(tmp_path / "work")
        cfg_bytes = cfg_file.read_bytes()
        assert run(["pipeline", "--config", str(cfg_file), "-q"]) == 0
        assert snapshot(tmp_path / "work") == first
        # rerunning a late stage leaves the earlier stage files alone
        assert run(["train", "--config", str(cfg_file), "-q"]) == 0
        assert snapshot(tmp_path / "work") == first
        assert cfg_file.read_bytes() == cfg_bytes

    def test_threads_give_same_result(self, cfg_file, tmp_path, monkeypatch):
        monkeypatch.setenv("PLC_WORKDIR", str(tmp_path / "t1"))
        assert run(["pipeline", "--config", str(cfg_file), "-q"]) == 0
        monkeypatch.setenv("PLC_WORKDIR", str(tmp_path / "t3"))
        assert run(["pipeline", "--config", str(cfg_file), "-q", "--threads", "3"]) == 0
        a = (tmp_path / "t1" / "eval" / "metrics.json").read_bytes()
        assert a == (tmp_path / "t3" / "eval" / "metrics.json").read_bytes()

    def test_disk_pipeline_equals_in_memory(self, cfg_file, tmp_path, monkeypatch):
        monkeypatch.delenv("PLC_WORKDIR", raising=False)
        assert run(["pipeline", "--config", str(cfg_file), "-q"]) == 0
        report, _, _ = run_in_memory(load_config(cfg_file, environ={}))
        assert report.dumps() == (tmp_path / "work" / "eval" / "metrics.json").read_text()

    def test_fusion_report_written(self, cfg_file, tmp_path, monkeypatch):
        monkeypatch.delenv("PLC_WORKDIR", raising=False)
        for stage in ("gen", "caption", "associate", "fuse"):
            assert run([stage, "--config", str(cfg_file), "-q"]) == 0
        rep = json.loads((tmp_path / "work" / "fused" / "scene_000.report.json").read_text())
        assert rep["achieved_primary_ratio"] >= 0.72
