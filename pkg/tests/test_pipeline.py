"""Run configuration, staged pipeline orchestration, export, and the CLI.

The full-quality end-to-end behaviour is exercised by the acceptance suite;
here the stages run with tiny iteration budgets to check wiring, file
contracts, determinism, and error handling.
"""

import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from hoifit import cli, hand, pipeline
from hoifit.errors import ConfigError, MissingStageOutput
from hoifit.pipeline import RunConfig, export_views, run_pipeline
from hoifit.render import load_pgm, render_silhouette, save_pgm
from hoifit.scenario import ScenarioScript, generate_scenario, load_scenario
from hoifit.tracking import ObjectTrack

TINY = {
    "static_init": {"iters": 40},
    "stage1": {"iters": 20, "block": 5},
    "rectifier": {"n_pairs": 20, "epochs": 3},
    "stage3": {"iters": 10, "rebuild_every": 5},
}


def _tiny_config(scenario_dir, **extra):
    doc = json.loads(json.dumps(TINY))
    doc["scenario_dir"] = str(scenario_dir)
    doc.update(extra)
    return RunConfig(doc)


@pytest.fixture(scope="module")
def rig():
    return hand.default_rig()


@pytest.fixture(scope="module")
def scn_dir(rig, tmp_path_factory):
    out = tmp_path_factory.mktemp("scn") / "clip"
    generate_scenario(ScenarioScript(), 3, out, rig=rig)
    return out


@pytest.fixture(scope="module")
def tiny_run(scn_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "tiny"
    manifest = run_pipeline(_tiny_config(scn_dir), out)
    return out, manifest


def _dirs_equal(a, b):
    a, b = Path(a), Path(b)
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(p) for p in fa],
                                           shallow=False)
    return not mismatch and not errors


class TestRunConfig:
    def test_defaults_and_access(self):
        cfg = RunConfig()
        assert cfg["stage3"]["iters"] == 800
        assert cfg["stage1"]["lr_object"] == 1e-3

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="stage4"):
            RunConfig({"stage4": {}})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="stage3.itres"):
            RunConfig({"stage3": {"itres": 10}})

    def test_unknown_weight_rejected(self):
        with pytest.raises(ConfigError, match="weights.contct"):
            RunConfig({"weights": {"contct": 1.0}})

    def test_hash_tracks_content(self):
        assert RunConfig().hash == RunConfig().hash
        assert RunConfig().hash != RunConfig({"seed": 1}).hash

    def test_ablations_zero_the_right_weights(self):
        w = RunConfig({"ablate": {"contact": True, "attr": True}}).make_weights()
        assert w.contact == 0.0 and w.attr == 0.0
        assert w.pen > 0 and w.sil > 0


class TestRunPipeline:
    def test_all_stages_ok_and_files_present(self, tiny_run):
        out, manifest = tiny_run
        assert [s["status"] for s in manifest["stages"]] == ["ok"] * 8
        for rel in ("manifest.json", "config.json",
                    "tracking/track.json", "tracking/phases.json",
                    "static/track.json", "stage1/hand_states.json",
                    "stage1/history.csv", "stage2/hand_states.json",
                    "anchors/anchors.jsonl", "stage3/hand_states.json",
                    "stage3/cache.jsonl", "metrics/metrics.json",
                    "metrics/metrics.csv", "report/stage1_loss.png",
                    "report/stage3_loss.png", "report/metrics.png"):
            assert (out / rel).exists(), rel

    def test_timings_live_outside_the_run_directory(self, tiny_run):
        out, _ = tiny_run
        sidecar = out.parent / (out.name + ".timings.json")
        assert sidecar.exists()
        assert not (out / "timings.json").exists()
        timings = json.loads(sidecar.read_text())
        assert set(timings) == set(pipeline.STAGES)

    def test_manifest_records_config_hash(self, tiny_run, scn_dir):
        out, manifest = tiny_run
        assert manifest["config_hash"] == _tiny_config(scn_dir).hash

    def test_rerun_is_byte_identical(self, scn_dir, tiny_run, tmp_path):
        out, _ = tiny_run
        out2 = tmp_path / "again"
        run_pipeline(_tiny_config(scn_dir), out2)
        assert _dirs_equal(out, out2)

    def test_stage3_zero_iters_passes_stage2_through(self, scn_dir, tmp_path):
        cfg = _tiny_config(scn_dir)
        cfg.data["stage3"]["iters"] = 0
        out = tmp_path / "zero3"
        run_pipeline(cfg, out)
        s2 = pipeline.load_states(out / "stage2" / "hand_states.json")
        s3 = pipeline.load_states(out / "stage3" / "hand_states.json")
        for a, b in zip(s2, s3):
            assert np.allclose(a.theta, b.theta, atol=1e-12)
            assert np.allclose(a.wrist_trans, b.wrist_trans, atol=1e-12)
            assert min(np.abs(a.wrist_rot - b.wrist_rot).max(),
                       np.abs(a.wrist_rot + b.wrist_rot).max()) < 1e-12

    def test_missing_scenario_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            run_pipeline(_tiny_config(tmp_path / "nope"), tmp_path / "out")

    def test_stage_failure_recorded_in_manifest(self, scn_dir, tmp_path, monkeypatch):
        from hoifit.errors import NoInteractionFrames

        def boom(*a, **kw):
            raise NoInteractionFrames("forced")

        monkeypatch.setattr(pipeline.contact, "establish_anchors", boom)
        out = tmp_path / "fail"
        with pytest.raises(NoInteractionFrames):
            run_pipeline(_tiny_config(scn_dir), out)
        manifest = json.loads((out / "manifest.json").read_text())
        statuses = {s["name"]: s["status"] for s in manifest["stages"]}
        assert statuses["anchors"] == "failed"
        assert "stage3" not in statuses
        rec = [s for s in manifest["stages"] if s["name"] == "anchors"][0]
        assert "forced" in rec["error"]


class TestExport:
    def test_single_frame_export(self, tiny_run, tmp_path):
        out, _ = tiny_run
        index = export_views(out, [0], out_subdir="export_one")
        assert len(index["frames"]) == 1
        d = out / "export_one"
        entry = index["frames"][0]
        for key in ("hand_mask", "object_mask", "hand_depth", "object_depth"):
            assert (d / entry[key]).exists()
        assert json.loads((d / "index.json").read_text()) == index

    def test_empty_frame_list(self, tiny_run):
        out, _ = tiny_run
        index = export_views(out, [], out_subdir="export_none")
        assert index["frames"] == []

    def test_object_mask_matches_metrics_render(self, tiny_run, tmp_path, scn_dir):
        out, _ = tiny_run
        export_views(out, [2], out_subdir="export_cmp")
        scn = load_scenario(scn_dir)
        track = ObjectTrack.from_json((out / "stage3" / "track.json").read_text(),
                                      scn.gt_track.mesh)
        ref = tmp_path / "ref.pgm"
        save_pgm(render_silhouette(scn.cam, track.posed_mesh(2), "hard"), ref)
        exported = (out / "export_cmp" / "object_mask_0002.pgm").read_bytes()
        assert exported == ref.read_bytes()

    def test_missing_stage_raises(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(MissingStageOutput):
            export_views(tmp_path / "empty", [0])


class TestCli:
    def test_stage_chain_matches_run_all(self, scn_dir, tiny_run, tmp_path):
        out, _ = tiny_run
        runner = CliRunner()
        staged = tmp_path / "staged"
        cfg_path = tmp_path / "cfg.json"
        doc = json.loads(json.dumps(TINY))
        doc["scenario_dir"] = str(scn_dir)
        cfg_path.write_text(json.dumps(doc))
        for cmd in ("track", "fit-stage1", "rectify", "anchors", "optimize",
                    "metrics"):
            res = runner.invoke(cli.main, [cmd, "--config", str(cfg_path),
                                           "--out", str(staged)])
            assert res.exit_code == 0, (cmd, res.output)
        # stage-by-stage invocation produces the same fit as run-all
        a = (out / "stage3" / "hand_states.json").read_text()
        b = (staged / "stage3" / "hand_states.json").read_text()
        assert a == b
        assert (staged / "report" / "metrics.png").exists()

    def test_gen_scenario_and_export(self, tmp_path, scn_dir, tiny_run):
        runner = CliRunner()
        res = runner.invoke(cli.main, ["gen-scenario", "--seed", "4",
                                       "--out", str(tmp_path / "scn")])
        assert res.exit_code == 0
        assert (tmp_path / "scn" / "scenario.json").exists()
        out, _ = tiny_run
        res = runner.invoke(cli.main, ["export", "--out", str(out),
                                       "--frames", "0..1"])
        assert res.exit_code == 0
        assert "2 frames" in res.output

    def test_bad_config_exits_2(self, tmp_path, scn_dir):
        runner = CliRunner()
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"scenario_dir": str(scn_dir),
                                   "stage9": {}}))
        res = runner.invoke(cli.main, ["track", "--config", str(cfg),
                                       "--out", str(tmp_path / "o")])
        assert res.exit_code == 2

    def test_invalid_script_exits_2(self, tmp_path):
        runner = CliRunner()
        script = tmp_path / "script.json"
        script.write_text(json.dumps({"object_kind": "torus"}))
        res = runner.invoke(cli.main, ["gen-scenario", "--config", str(script),
                                       "--out", str(tmp_path / "s")])
        assert res.exit_code == 2

    def test_missing_stage_exits_3(self, tmp_path, scn_dir):
        runner = CliRunner()
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"scenario_dir": str(scn_dir)}))
        res = runner.invoke(cli.main, ["optimize", "--config", str(cfg),
                                       "--out", str(tmp_path / "fresh")])
        assert res.exit_code == 3
