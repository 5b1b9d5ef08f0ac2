from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from canvas import checkpoint as ckpt
from canvas.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_DROPPED, EXIT_OK, main
from canvas.datasets import catalog_item
from canvas.imageio import read_image
from canvas.model import ModelConfig, init_params
from canvas.pipeline import SeedReport

TINY = {"channels": 3, "embed_dim": 8, "hidden": 8, "time_freqs": 4}
TWO_D = {"channels": 2, "embed_dim": 8, "hidden": 16, "time_freqs": 4}


def _cfg(path: Path, doc: dict) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


def _run(command: str, config: str, out: Path, *extra: str) -> int:
    return main([command, "--config", config, "--out", str(out), *extra])


def _rows(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _strip_timings(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "timings"} for r in rows]


def _tree_bytes(out: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix in (".ppm", ".pgm", ".cvtn", ".cvck")}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny trained flow model, a reward model and a catalog inputs manifest."""
    root = tmp_path_factory.mktemp("cli")
    flow = _cfg(root / "flow.json", {
        "model": TINY, "seed": 0, "stages": [{"stage_id": "s", "resolution": [16, 16], "steps": 6,
                                              "batch_size": 2}],
        "data": {"kind": "mixture", "catalog_size": 16}})
    assert _run("train-flow", flow, root / "flow") == EXIT_OK
    data = _cfg(root / "data.json", {"catalog": {"seed": 0, "start": 0, "count": 4}})
    assert _run("make-dataset", data, root / "data") == EXIT_OK
    rewards = _cfg(root / "rewards.json", {
        "checkpoint": str(root / "flow" / "checkpoint.cvck"), "catalog": {"count": 6, "start": 100},
        "pipeline": {"steps": 3}, "reward": {"epochs": 50}})
    assert _run("eval-rewards", rewards, root / "reward") == EXIT_OK
    return root


def _outpaint_cfg(ws: Path, **pipeline) -> str:
    return _cfg(ws / "outpaint.json", {
        "checkpoint": str(ws / "flow" / "checkpoint.cvck"), "reward_checkpoint": str(ws / "reward" / "reward.cvck"),
        "inputs": str(ws / "data" / "inputs.jsonl"),
        "pipeline": {"steps": 3, "sr_steps": 2, "post_filter_threshold": 1.0, **pipeline}})


# -- train-flow ----------------------------------------------------------------

def test_zero_step_config_writes_initial_params(tmp_path):
    cfg = _cfg(tmp_path / "c.json", {"model": TINY, "stages": [{"stage_id": "s", "resolution": [4, 4], "steps": 0}],
                                     "data": {"kind": "mixture", "catalog_size": 4}})
    assert _run("train-flow", cfg, tmp_path / "o") == EXIT_OK
    state, meta = ckpt.load_train_state(tmp_path / "o" / "checkpoint.cvck")
    assert state.stage_step == 0 and meta["seed"] == 0
    initial = init_params(ModelConfig(**TINY), 0)
    assert state.params.flat().tobytes() == initial.flat().tobytes()


def test_resume_matches_an_uninterrupted_run(tmp_path):
    stages = [{"stage_id": "s", "resolution": [1, 1], "steps": 40, "batch_size": 4}]
    base = {"model": TWO_D, "seed": 3, "stages": stages, "data": {"kind": "two-gaussians"}}
    full = _cfg(tmp_path / "full.json", base)
    assert _run("train-flow", full, tmp_path / "full") == EXIT_OK
    part = _cfg(tmp_path / "part.json", dict(base, max_steps=17))
    assert _run("train-flow", part, tmp_path / "part") == EXIT_OK
    rest = _cfg(tmp_path / "rest.json", dict(base, resume=str(tmp_path / "part" / "checkpoint.cvck")))
    assert _run("train-flow", rest, tmp_path / "rest") == EXIT_OK
    a, _ = ckpt.load_train_state(tmp_path / "full" / "checkpoint.cvck")
    b, _ = ckpt.load_train_state(tmp_path / "rest" / "checkpoint.cvck")
    assert a.stage_step == b.stage_step
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    assert a.ema.shadow.flat().tobytes() == b.ema.shadow.flat().tobytes()


def test_spike_abort_exits_with_divergence_code(tmp_path):
    cfg = _cfg(tmp_path / "c.json", {
        "model": TWO_D, "stages": [{"stage_id": "s", "resolution": [1, 1], "steps": 200, "batch_size": 4}],
        "settings": {"lr": 3e-3},
        "data": {"kind": "two-gaussians", "spike_after": 60, "spike_scale": 50.0}})
    assert _run("train-flow", cfg, tmp_path / "o") == EXIT_DIVERGED
    log = _rows(tmp_path / "o" / "train_log.jsonl")
    assert sum(r["spike"] for r in log) >= 5


def test_config_errors_exit_2(tmp_path):
    bad = _cfg(tmp_path / "bad.json", {"stages": [], "data": {"kind": "mixture"}, "colour": 1})
    assert _run("train-flow", bad, tmp_path / "o") == EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{")
    assert _run("train-flow", str(tmp_path / "broken.json"), tmp_path / "o") == EXIT_CONFIG
    assert _run("train-flow", str(tmp_path / "missing.json"), tmp_path / "o") == EXIT_CONFIG
    nockpt = _cfg(tmp_path / "s.json", {"checkpoint": str(tmp_path / "none.cvck")})
    assert _run("sample", nockpt, tmp_path / "o") == EXIT_CONFIG
    assert main(["sample", "--config", nockpt, "--seed", "-1"]) == EXIT_CONFIG


# -- sample --------------------------------------------------------------------

def test_sample_batch_counts_and_determinism(workspace, tmp_path):
    ck = str(workspace / "flow" / "checkpoint.cvck")
    base = {"checkpoint": ck, "prompt": "a red disc", "size": [8, 8], "steps": 5, "count": 10}
    cfg = _cfg(tmp_path / "s.json", dict(base, guidance={"variant": "none"}))
    assert _run("sample", cfg, tmp_path / "a") == EXIT_OK
    assert _run("sample", cfg, tmp_path / "b") == EXIT_OK
    rows = _rows(tmp_path / "a" / "manifest.jsonl")
    assert len(rows) == 10 and len(list((tmp_path / "a").glob("*.ppm"))) == 10
    assert all(r["evals"] == 5 for r in rows)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    assert _strip_timings(rows) == _strip_timings(_rows(tmp_path / "b" / "manifest.jsonl"))
    td = _cfg(tmp_path / "t.json", dict(base, count=1, guidance={"variant": "text_drop", "scale": 3.0}))
    assert _run("sample", td, tmp_path / "c") == EXIT_OK
    assert _rows(tmp_path / "c" / "manifest.jsonl")[0]["evals"] == 10


# -- outpaint ------------------------------------------------------------------

def test_outpaint_is_deterministic(workspace, tmp_path):
    cfg = _outpaint_cfg(workspace)
    assert _run("outpaint", cfg, tmp_path / "a") == EXIT_OK
    assert _run("outpaint", cfg, tmp_path / "b") == EXIT_OK
    a, b = _rows(tmp_path / "a" / "manifest.jsonl"), _rows(tmp_path / "b" / "manifest.jsonl")
    assert len(a) == 4 and _strip_timings(a) == _strip_timings(b)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    assert all(r["output"] for r in a)
    assert read_image(tmp_path / "a" / a[0]["output"]).shape == (3, 72, 48)


def test_manifest_row_reruns_in_isolation(workspace, tmp_path):
    cfg = _outpaint_cfg(workspace)
    assert _run("outpaint", cfg, tmp_path / "batch") == EXIT_OK
    row = _rows(tmp_path / "batch" / "manifest.jsonl")[2]
    (tmp_path / "one.jsonl").write_text(json.dumps(row["input"]) + "\n")
    single = _cfg(tmp_path / "one.json", {
        "checkpoint": str(workspace / "flow" / "checkpoint.cvck"),
        "reward_checkpoint": str(workspace / "reward" / "reward.cvck"),
        "inputs": str(tmp_path / "one.jsonl"), "pipeline": row["config"]})
    assert _run("outpaint", single, tmp_path / "single") == EXIT_OK
    again = _rows(tmp_path / "single" / "manifest.jsonl")[0]
    assert _strip_timings([again]) == _strip_timings([row])
    name = row["output"]
    assert (tmp_path / "single" / name).read_bytes() == (tmp_path / "batch" / name).read_bytes()


def test_mixed_and_all_dropped_batches(workspace, tmp_path):
    tall = catalog_item(0, 1, 24, 16)
    rows = [{"id": "ok", "catalog": {"seed": 0, "item": 0, "size": [16, 16]}},
            {"id": "tall", "catalog": {"seed": 0, "item": 1, "size": list(tall.mask.shape)}}]
    (tmp_path / "mixed.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    cfg = json.loads(Path(_outpaint_cfg(workspace)).read_text())
    mixed = _cfg(tmp_path / "m.json", dict(cfg, inputs=str(tmp_path / "mixed.jsonl"), task="aspect"))
    assert _run("outpaint", mixed, tmp_path / "m") == EXIT_OK
    out = {r["input_id"]: r for r in _rows(tmp_path / "m" / "manifest.jsonl")}
    assert out["ok"]["output"] and out["tall"]["dropped"] == "ASPECT_TOO_TALL"
    (tmp_path / "tall.jsonl").write_text(json.dumps(rows[1]) + "\n")
    dropped = _cfg(tmp_path / "d.json", dict(cfg, inputs=str(tmp_path / "tall.jsonl"), task="aspect"))
    assert _run("outpaint", dropped, tmp_path / "d") == EXIT_DROPPED
    assert _rows(tmp_path / "d" / "manifest.jsonl")[0]["dropped"] == "ASPECT_TOO_TALL"


def test_outpaint_with_dedicated_sr_checkpoint(workspace, tmp_path):
    cfg = json.loads(Path(_outpaint_cfg(workspace)).read_text())
    with_sr = _cfg(tmp_path / "c.json", dict(cfg, sr_checkpoint=str(workspace / "flow" / "checkpoint.cvck")))
    assert _run("outpaint", with_sr, tmp_path / "a") == EXIT_OK
    assert _run("outpaint", _outpaint_cfg(workspace), tmp_path / "b") == EXIT_OK
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    missing = _cfg(tmp_path / "m.json", dict(cfg, sr_checkpoint=str(tmp_path / "none.cvck")))
    assert _run("outpaint", missing, tmp_path / "c") == EXIT_CONFIG


# -- seed-sweep, review, benchmark --------------------------------------------

def test_seed_sweep_report_round_trips(workspace, tmp_path):
    cfg = _cfg(tmp_path / "s.json", {
        "checkpoint": str(workspace / "flow" / "checkpoint.cvck"),
        "reward_checkpoint": str(workspace / "reward" / "reward.cvck"),
        "catalog": {"count": 2}, "seeds": {"count": 5}, "pipeline": {"steps": 2}})
    assert _run("seed-sweep", cfg, tmp_path / "a") == EXIT_OK
    assert _run("seed-sweep", cfg, tmp_path / "b") == EXIT_OK
    text = (tmp_path / "a" / "seed_report.json").read_text()
    assert text == (tmp_path / "b" / "seed_report.json").read_text()
    doc = json.loads(text)
    report = SeedReport.from_json(doc)
    assert sorted(e["seed"] for e in report.entries) == list(range(5))
    assert [e["rank"] for e in report.entries] == [1, 2, 3, 4, 5]
    assert doc["top_subset"] == [report.entries[0]["seed"]]
    single = _cfg(tmp_path / "one.json", dict(json.loads(Path(cfg).read_text()), seeds=[7]))
    assert _run("seed-sweep", single, tmp_path / "c") == EXIT_OK
    assert json.loads((tmp_path / "c" / "seed_report.json").read_text())["entries"][0]["rank"] == 1


def _record(image_id, rater, product, background):
    return {"image_id": image_id, "rater_id": rater, "task": "background",
            "answers": {"Q_product": product, "Q_background": background}}


def test_simulate_review_counting_fixture(tmp_path):
    D, N = "DEFECT", "NO_DEFECT"
    recs = []
    for i, (p, b) in enumerate([(N, N), (D, N), (N, D), (D, D)]):
        recs += [_record(f"img{i}", "r1", p, b), _record(f"img{i}", "r2", N, N)]
    (tmp_path / "recs.jsonl").write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    cfg = _cfg(tmp_path / "c.json", {"records": str(tmp_path / "recs.jsonl"), "table_rows": [
        {"name": "canvas", "per_question": {"Q_product": 84.0, "Q_background": 54.9}, "overall": 47.2}]})
    assert _run("simulate-review", cfg, tmp_path / "o") == EXIT_OK
    rates = json.loads((tmp_path / "o" / "rates.json").read_text())["background"]
    assert rates["per_question"] == {"Q_product": 0.5, "Q_background": 0.5} and rates["overall"] == 0.25
    bad = _cfg(tmp_path / "b.json", {"records": str(tmp_path / "recs.jsonl"), "table_rows": [
        {"per_question": {"Q_product": 84.0, "Q_background": 54.9}, "overall": 60.0}]})
    assert _run("simulate-review", bad, tmp_path / "o2") == EXIT_CONFIG


def test_simulate_review_on_outpaint_outputs(workspace, tmp_path):
    assert _run("outpaint", _outpaint_cfg(workspace), tmp_path / "out") == EXIT_OK
    cfg = _cfg(tmp_path / "r.json", {"outputs": str(tmp_path / "out" / "manifest.jsonl"), "rater": {"rho": 0.0}})
    assert _run("simulate-review", cfg, tmp_path / "a") == EXIT_OK
    assert _run("simulate-review", cfg, tmp_path / "b") == EXIT_OK
    a = (tmp_path / "a" / "review_records.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "review_records.jsonl").read_bytes()
    assert len(_rows(tmp_path / "a" / "review_records.jsonl")) == 8
    rates = json.loads((tmp_path / "a" / "rates.json").read_text())["background"]
    # pasted product pixels are exact, so no product defects are ever flagged at zero noise
    assert rates["per_question"]["Q_product"] == 1.0


def test_eval_rewards_report(workspace):
    report = json.loads((workspace / "reward" / "reward_report.json").read_text())
    assert report["task"] == "background_outpaint"
    assert report["train"]["n"] + report["holdout"]["n"] == 12


def test_benchmark_eval_ratios(tmp_path):
    cfg = _cfg(tmp_path / "b.json", {"model": TINY, "size": [4, 4], "steps": 50})
    assert _run("benchmark", cfg, tmp_path / "o") == EXIT_OK
    doc = json.loads((tmp_path / "o" / "benchmark.json").read_text())
    assert [r["evals_per_sample"] for r in doc["results"]] == [50, 150, 100, 100]
    assert doc["results"][2]["evals_per_sample"] / doc["results"][1]["evals_per_sample"] == pytest.approx(2 / 3)


def test_console_entry_point(tmp_path):
    cfg = _cfg(tmp_path / "c.json", {"catalog": {"count": 1}})
    proc = subprocess.run([sys.executable, "-m", "canvas.cli", "make-dataset", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(_rows(tmp_path / "o" / "inputs.jsonl")) == 1
