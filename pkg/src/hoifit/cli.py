"""Command-line interface for scenario generation and the staged pipeline.

Exit codes: 0 on success, 2 on configuration/script errors, 3 on stage
failures.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import pipeline
from .errors import ConfigError, HoifitError, InvalidScript, MissingStageOutput
from .pipeline import RunConfig
from .scenario import ScenarioScript, generate_scenario, load_scenario
from .tracking import ObjectTrack, PhaseLabels


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*a, **kw):
        try:
            fn(*a, **kw)
        except (ConfigError, InvalidScript) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except HoifitError as exc:
            click.echo(f"stage failure: {exc}", err=True)
            sys.exit(3)
    return wrapper


def _load_config(config_path, out: Path, seed) -> RunConfig:
    """Resolve the run configuration: explicit file, else the one a previous
    stage left in the run directory; --seed overrides."""
    if config_path:
        doc = json.loads(Path(config_path).read_text())
        # full run configs are nested; a bare stage invocation may reuse a
        # previously written config document verbatim
    elif (out / "config.json").exists():
        doc = json.loads((out / "config.json").read_text())
    else:
        doc = {}
    if seed is not None:
        doc["seed"] = seed
    cfg = RunConfig(doc)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical_json())
    return cfg


def _scenario(cfg: RunConfig):
    scn_dir = Path(cfg["scenario_dir"])
    if not (scn_dir / "scenario.json").exists():
        raise ConfigError(f"scenario directory {scn_dir!s} not found")
    return load_scenario(scn_dir)


def _phases(out: Path) -> PhaseLabels:
    path = pipeline._require(out / "tracking" / "phases.json", "track")
    return PhaseLabels.from_json(path.read_text())


def _track(out: Path, stage: str, scn) -> ObjectTrack:
    path = pipeline._require(out / stage / "track.json", stage)
    return ObjectTrack.from_json(path.read_text(), scn.gt_track.mesh)


def _states(out: Path, stage: str):
    path = pipeline._require(out / stage / "hand_states.json", stage)
    return pipeline.load_states(path)


def _parse_frames(spec: str, n: int):
    if spec is None or spec == "":
        return list(range(n))
    try:
        if ".." in spec:
            a, b = spec.split("..")
            return list(range(int(a), int(b) + 1))
        return [int(spec)]
    except ValueError as exc:
        raise ConfigError(f"bad frame range {spec!r}") from exc


config_opt = click.option("--config", "config_path", type=click.Path(),
                          default=None, help="run configuration JSON")
seed_opt = click.option("--seed", type=int, default=None,
                        help="override the configured seed")
out_opt = click.option("--out", "out_dir", type=click.Path(), required=True,
                       help="run directory")


@click.group()
def main():
    """Contact-aware hand-object sequence fitting on synthetic scenarios."""


@main.command("gen-scenario")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="scenario script JSON (defaults used when omitted)")
@click.option("--seed", type=int, default=0)
@out_opt
@_handled
def gen_scenario(config_path, seed, out_dir):
    """Generate a synthetic grasp-lift-place scenario."""
    doc = json.loads(Path(config_path).read_text()) if config_path else {}
    script = ScenarioScript.from_dict(doc)
    scn = generate_scenario(script, seed, out_dir)
    click.echo(f"wrote scenario ({scn.n_frames} frames) to {out_dir}")


@main.command()
@config_opt
@seed_opt
@out_opt
@_handled
def track(config_path, seed, out_dir):
    """Guarded pose acceptance, gap filling, phase segmentation."""
    out = Path(out_dir)
    cfg = _load_config(config_path, out, seed)
    _, phases = pipeline.stage_tracking(_scenario(cfg), cfg, out)
    click.echo(f"phases: {phases.runs()}")


@main.command("fit-stage1")
@config_opt
@seed_opt
@out_opt
@_handled
def fit_stage1(config_path, seed, out_dir):
    """Static-segment initialization plus isolated hand/object fitting."""
    out = Path(out_dir)
    cfg = _load_config(config_path, out, seed)
    scn = _scenario(cfg)
    phases = _phases(out)
    trk = _track(out, "tracking", scn)
    trk = pipeline.stage_static_init(scn, trk, phases, cfg, out)
    pipeline.stage_one(scn, trk, phases, cfg, out)
    click.echo("stage 1 complete")


@main.command()
@config_opt
@seed_opt
@out_opt
@_handled
def rectify(config_path, seed, out_dir):
    """Generative ray-depth rectification of the interaction frames."""
    out = Path(out_dir)
    cfg = _load_config(config_path, out, seed)
    scn = _scenario(cfg)
    pipeline.stage_rectify(scn, _states(out, "stage1"),
                           _track(out, "stage1", scn), _phases(out), cfg, out)
    click.echo("rectification complete")


@main.command()
@config_opt
@seed_opt
@out_opt
@_handled
def anchors(config_path, seed, out_dir):
    """Establish contact anchors on the rectified geometry."""
    out = Path(out_dir)
    cfg = _load_config(config_path, out, seed)
    scn = _scenario(cfg)
    found = pipeline.stage_anchors(_states(out, "stage2"),
                                   _track(out, "stage1", scn),
                                   _phases(out), cfg, out)
    click.echo(f"{len(found)} anchors")


@main.command()
@config_opt
@seed_opt
@out_opt
@_handled
def optimize(config_path, seed, out_dir):
    """Joint contact-aware optimization (stage 3)."""
    out = Path(out_dir)
    cfg = _load_config(config_path, out, seed)
    scn = _scenario(cfg)
    pipeline.stage_three(scn, _states(out, "stage2"),
                         _track(out, "stage1", scn), _phases(out), cfg, out)
    click.echo("stage 3 complete")


@main.command()
@config_opt
@seed_opt
@out_opt
@_handled
def metrics(config_path, seed, out_dir):
    """Reference-free metrics plus report figures."""
    from .report import write_report_figures
    out = Path(out_dir)
    cfg = _load_config(config_path, out, seed)
    scn = _scenario(cfg)
    rep = pipeline.stage_metrics(scn, _states(out, "stage3"),
                                 _track(out, "stage3", scn), out)
    figures = write_report_figures(out)
    header, row = rep.csv_row()
    click.echo(header)
    click.echo(row)
    click.echo(f"{len(figures)} figures written")


@main.command()
@out_opt
@click.option("--frames", default="", help="frame range A..B (default: all)")
@_handled
def export(out_dir, frames):
    """Export per-frame silhouette and depth images."""
    out = Path(out_dir)
    if not (out / "manifest.json").exists():
        raise MissingStageOutput(f"no manifest under {out}")
    scn, _, _, _ = pipeline._latest_states(out)
    index = pipeline.export_views(out, _parse_frames(frames, scn.n_frames))
    click.echo(f"exported {len(index['frames'])} frames ({index['stage']})")


@main.command("run-all")
@config_opt
@seed_opt
@out_opt
@_handled
def run_all(config_path, seed, out_dir):
    """Execute the full pipeline: tracking through metrics and figures."""
    out = Path(out_dir)
    cfg = _load_config(config_path, out, seed)
    manifest = pipeline.run_pipeline(cfg, out)
    rep_path = out / "metrics" / "metrics.csv"
    if rep_path.exists():
        click.echo(rep_path.read_text().strip())
    click.echo("stages: " + ", ".join(
        f"{s['name']}={s['status']}" for s in manifest["stages"]))


if __name__ == "__main__":
    main()
