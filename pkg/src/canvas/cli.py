"""Command-line entry points.

Every command reads a JSON config (unknown keys are rejected), writes its
outputs under ``--out`` and returns 0 on success, 2 on a config or input
error, 3 when every input was dropped and 4 on numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from canvas import checkpoint as ckpt
from canvas.conditions import ConditionSet, tokenize
from canvas.datasets import (
    DEFAULT_MIXTURE, MixtureBatchSource, ProductImage, TwoGaussiansSource, catalog_item, from_model_space,
)
from canvas.errors import InvalidArgument, NumericDivergence, ParseError, SpikeAbort
from canvas.flow import euler_sample, make_schedule
from canvas.guidance import GuidanceConfig, TaskKind, guided_field, resolve_task_guidance
from canvas.imageio import read_image, read_mask, write_image, write_mask, write_tensor
from canvas.model import ModelConfig, ModelField, ModelParams, init_params
from canvas.pipeline import PipelineConfig, generate_candidates, prepare_job, run_pipeline, seed_sweep
from canvas.review import (
    RaterRecord, RaterSpec, RewardConfig, RewardExample, RewardModel, aggregate_review, check_rate_consistency,
    defect_fraction, group_records, load_reward, no_defect_rates, predict, rate_pair, read_records,
    reward_features, save_reward, train_reward,
)
from canvas.rng import stream
from canvas.training import TrainSettings, TrainStageConfig, train

log = logging.getLogger("canvas")

EXIT_OK, EXIT_CONFIG, EXIT_DROPPED, EXIT_DIVERGED = 0, 2, 3, 4

TASK_ALIASES = {"background": TaskKind.BACKGROUND_OUTPAINT, "aspect": TaskKind.ASPECT_RATIO_OUTPAINT}


class ConfigError(InvalidArgument):
    pass


def _task(name: str) -> TaskKind:
    try:
        return TASK_ALIASES.get(name) or TaskKind(name)
    except ValueError:
        raise ConfigError(f"unknown task {name!r}") from None


def load_config(path: str | Path, allowed: set[str], required: set[str] = frozenset()) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    check_keys(cfg, allowed, required, "config")
    return cfg


def check_keys(d: dict, allowed: set[str], required: set[str] = frozenset(), where: str = "config") -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        raise ConfigError(f"missing {where} keys: {sorted(missing)}")


def _path(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CANVAS_THREADS", "1")))
    except ValueError:
        raise ConfigError("CANVAS_THREADS must be an integer") from None


def _parallel_map(fn, items):
    """Order-preserving map capped by CANVAS_THREADS."""
    n = _threads()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _load_params(path: str | Path) -> ModelParams:
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    return ckpt.load_inference_params(path)


def _load_reward(path: str | Path) -> RewardModel:
    if not Path(path).exists():
        raise ConfigError(f"reward checkpoint {path} not found")
    return RewardModel(load_reward(path))


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

INPUT_KEYS = {"id", "catalog", "image", "product_shot", "mask", "caption"}


def load_input(row: dict, base: Path) -> ProductImage:
    """An input row either names a catalog item or points at image files."""
    check_keys(row, INPUT_KEYS, {"id"}, "input row")
    if "catalog" in row:
        c = row["catalog"]
        check_keys(c, {"seed", "item", "size"}, {"seed", "item"}, "catalog reference")
        h, w = c.get("size", [16, 16])
        p = catalog_item(int(c["seed"]), int(c["item"]), int(h), int(w), 3)
        p.sample_id = row["id"]
        return p
    check_keys(row, INPUT_KEYS, {"id", "image", "mask"}, "input row")
    image = read_image(_path(base, row["image"]))
    mask = read_mask(_path(base, row["mask"]))
    shot = read_image(_path(base, row["product_shot"])) if "product_shot" in row else \
        np.where(mask.astype(bool)[None], image, np.float32(1.0)).astype(np.float32)
    if image.shape[1:] != mask.shape or shot.shape != image.shape:
        raise InvalidArgument(f"input {row['id']}: image, product shot and mask sizes differ")
    return ProductImage(image, shot, mask, row.get("caption", ""), row["id"])


def load_inputs(manifest: str | Path) -> list[tuple[dict, ProductImage]]:
    manifest = Path(manifest)
    if not manifest.exists():
        raise ConfigError(f"inputs manifest {manifest} not found")
    out = []
    for i, line in enumerate(manifest.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{manifest}:{i + 1}: {e}") from None
        out.append((row, load_input(row, manifest.parent)))
    return out


def _catalog_inputs(spec: dict) -> list[ProductImage]:
    check_keys(spec, {"seed", "start", "count", "size"}, {"count"}, "catalog")
    h, w = spec.get("size", [16, 16])
    start = int(spec.get("start", 0))
    return [catalog_item(int(spec.get("seed", 0)), i, int(h), int(w), 3)
            for i in range(start, start + int(spec["count"]))]


# ---------------------------------------------------------------------------
# train-flow
# ---------------------------------------------------------------------------

class SpikingSource:
    """Wraps a source and inflates its targets after a given step, to force loss spikes."""

    def __init__(self, inner, after: int, scale: float):
        self.inner, self.after, self.scale = inner, after, scale

    def batch(self, stage, step, size, seed):
        out = self.inner.batch(stage, step, size, seed)
        if step >= self.after:
            out = [(x * np.float32(self.scale), c) for x, c in out]
        return out


def _data_source(d: dict):
    check_keys(d, {"kind", "mixture", "optout", "catalog_size", "catalog_seed", "separation", "sigma",
                   "spike_after", "spike_scale"}, {"kind"}, "data")
    if d["kind"] == "mixture":
        src = MixtureBatchSource(d.get("mixture", DEFAULT_MIXTURE), d.get("optout", ()),
                                 int(d.get("catalog_size", 512)), int(d.get("catalog_seed", 0)))
    elif d["kind"] == "two-gaussians":
        src = TwoGaussiansSource(float(d.get("separation", 2.0)), float(d.get("sigma", 0.25)))
    else:
        raise ConfigError(f"unknown data kind {d['kind']!r}")
    if "spike_after" in d:
        src = SpikingSource(src, int(d["spike_after"]), float(d.get("spike_scale", 100.0)))
    return src


SETTINGS_KEYS = {"lr", "beta1", "beta2", "weight_decay", "eps", "clip_norm", "ema_decay", "p_text", "p_image",
                 "spike_ratio", "spike_window", "spike_min_history", "max_consecutive_spikes"}


def cmd_train_flow(args) -> int:
    cfg = load_config(args.config, {"model", "settings", "stages", "data", "resume", "max_steps", "seed"},
                      {"stages", "data"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.get("model", {})
    check_keys(model, set(ModelConfig.__dataclass_fields__), where="model")
    st = cfg.get("settings", {})
    check_keys(st, SETTINGS_KEYS, where="settings")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    settings = TrainSettings(model=ModelConfig(**model), seed=seed, **st)
    stages = []
    for s in cfg["stages"]:
        check_keys(s, {"stage_id", "resolution", "steps", "shift", "batch_size", "mixture"},
                   {"stage_id", "resolution", "steps"}, "stage")
        stages.append(TrainStageConfig(**s))
    data = _data_source(cfg["data"])
    state = None
    if cfg.get("resume"):
        path = Path(cfg["resume"])
        if not path.exists():
            raise ConfigError(f"resume checkpoint {path} not found")
        state, meta = ckpt.load_train_state(path)
        if meta.get("seed") != seed or state.params.config != settings.model:
            raise ConfigError("resume checkpoint was written with a different seed or model")
    extra = {"seed": seed, "stages": [s.stage_id for s in stages]}
    try:
        result = train(stages, data, settings, state, cfg.get("max_steps"))
    except SpikeAbort as e:
        _write_jsonl(out / "train_log.jsonl", e.log)
        raise
    _write_jsonl(out / "train_log.jsonl", result.log)
    ckpt.save_train_state(out / "checkpoint.cvck", result.state, dict(extra, finished=result.finished))
    print(f"wrote {out / 'checkpoint.cvck'} ({len(result.log)} log records)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def cmd_sample(args) -> int:
    cfg = load_config(args.config, {"checkpoint", "task", "prompt", "negative_prompt", "size", "steps", "shift",
                                    "guidance", "count", "references", "seed"}, {"checkpoint"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_params(cfg["checkpoint"])
    task = _task(cfg.get("task", "general_edit"))
    guidance = GuidanceConfig.from_json(cfg["guidance"]) if cfg.get("guidance") else resolve_task_guidance(task)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    H, W = cfg.get("size", [24, 16])
    steps, shift = int(cfg.get("steps", 20)), float(cfg.get("shift", 1.0))
    refs = []
    for r in cfg.get("references", []):
        img = read_image(r).copy()
        img[:3] = 2.0 * img[:3] - 1.0
        refs.append(img)
    neg = cfg.get("negative_prompt")
    cond = ConditionSet(text=tokenize(cfg.get("prompt", "")), images=tuple(refs),
                        negative_text=tokenize(neg) if neg is not None else None)
    C = params.config.channels

    def one(i):
        field_ = guided_field(ModelField(params), guidance)
        z = stream(seed, "sample", i).standard_normal((C, H, W)).astype(np.float32)
        t0 = time.perf_counter()
        x = euler_sample(field_, z, make_schedule(steps, shift), cond)
        elapsed = time.perf_counter() - t0
        if C == 3:
            name = f"sample_{i:04d}.ppm"
            write_image(out / name, from_model_space(x))
        else:
            name = f"sample_{i:04d}.cvtn"
            write_tensor(out / name, x)
        return {"index": i, "file": name, "seed": seed, "prompt": cfg.get("prompt", ""), "size": [H, W],
                "steps": steps, "shift": shift, "guidance": guidance.to_json(), "evals": field_.base.eval_count,
                "timings": {"sample": elapsed}}

    rows = _parallel_map(one, list(range(int(cfg.get("count", 1)))))
    _write_jsonl(out / "manifest.jsonl", rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# outpaint
# ---------------------------------------------------------------------------

def _pipeline_config(cfg: dict, seed: int | None) -> PipelineConfig:
    pc = PipelineConfig.from_json(cfg.get("pipeline", {}))
    if seed is not None:
        pc = PipelineConfig.from_json(dict(pc.to_json(), seed=seed))
    return pc


def cmd_outpaint(args) -> int:
    cfg = load_config(args.config, {"checkpoint", "sr_checkpoint", "reward_checkpoint", "task", "inputs",
                                    "pipeline"}, {"checkpoint", "reward_checkpoint"})
    task = _task(args.task or cfg.get("task", "background"))
    inputs_path = args.inputs or cfg.get("inputs")
    if not inputs_path:
        raise ConfigError("no inputs manifest given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pc = _pipeline_config(cfg, args.seed)
    params = _load_params(cfg["checkpoint"])
    sr_params = _load_params(cfg["sr_checkpoint"]) if cfg.get("sr_checkpoint") else None
    reward = _load_reward(cfg["reward_checkpoint"])
    inputs = load_inputs(inputs_path)

    def one(item):
        row, p = item
        try:
            res = run_pipeline(p, task, pc, params, reward, sr_params)
        except Exception as e:  # a single input must never stop the batch
            return {"input_id": row["id"], "input": row, "dropped": "ERROR", "selected": None,
                    "errors": [f"{type(e).__name__}: {e}"], "timings": {}}
        m = res.manifest.to_json()
        if res.image is not None:
            stem = row["id"]
            write_image(out / f"{stem}.ppm", res.image)
            write_mask(out / f"{stem}_mask.pgm", res.mask)
            write_image(out / f"{stem}_base.ppm", res.base_image)
            m["output"] = f"{stem}.ppm"
        m["input"] = row
        m["config"] = pc.to_json()
        return m

    rows = _parallel_map(one, inputs)
    _write_jsonl(out / "manifest.jsonl", rows)
    emitted = sum(r.get("output") is not None for r in rows)
    print(f"{emitted}/{len(rows)} inputs produced an output")
    return EXIT_OK if emitted else EXIT_DROPPED


# ---------------------------------------------------------------------------
# seed-sweep
# ---------------------------------------------------------------------------

def cmd_seed_sweep(args) -> int:
    cfg = load_config(args.config, {"checkpoint", "reward_checkpoint", "task", "inputs", "catalog", "seeds",
                                    "pipeline", "top_fraction"}, {"checkpoint", "reward_checkpoint", "seeds"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = _task(cfg.get("task", "background"))
    pc = _pipeline_config(cfg, args.seed)
    params = _load_params(cfg["checkpoint"])
    reward = _load_reward(cfg["reward_checkpoint"])
    if "inputs" in cfg:
        inputs = [p for _, p in load_inputs(cfg["inputs"])]
    elif "catalog" in cfg:
        inputs = _catalog_inputs(cfg["catalog"])
    else:
        raise ConfigError("seed sweep needs 'inputs' or 'catalog'")
    seeds = cfg["seeds"]
    if isinstance(seeds, dict):
        check_keys(seeds, {"start", "count"}, {"count"}, "seeds")
        seeds = list(range(int(seeds.get("start", 0)), int(seeds.get("start", 0)) + int(seeds["count"])))
    report = seed_sweep(inputs, [int(s) for s in seeds], task, params, reward, pc)
    doc = report.to_json()
    doc["top_subset"] = report.top_subset(float(cfg.get("top_fraction", 0.1)))
    _write_json(out / "seed_report.json", doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval-rewards
# ---------------------------------------------------------------------------

def collect_reward_examples(params: ModelParams, inputs: list[ProductImage], task: TaskKind, pc: PipelineConfig,
                            rater: RaterSpec, rater_seed: int, n_raters: int = 2):
    """Oracle-labelled (features, defect fraction) for every candidate of every input."""
    examples, groups = [], []
    for p in inputs:
        job = prepare_job(p, task, pc)
        cands = generate_candidates(job, task, pc.n_candidates, params, pc)
        for k, c in enumerate(cands):
            if c.failed:
                continue
            image_id = f"{p.sample_id}/{k}"
            recs = rate_pair(job.masked_original, c.image, job.known, _review_task(task), rater, rater_seed,
                             image_id, n_raters)
            examples.append(RewardExample(reward_features(job.masked_original, c.image, job.known),
                                          defect_fraction(recs)))
            groups.append(p.sample_id)
    return examples, groups


def _review_task(task: TaskKind) -> str:
    return "background" if task is TaskKind.BACKGROUND_OUTPAINT else "aspect"


def cmd_eval_rewards(args) -> int:
    cfg = load_config(args.config, {"checkpoint", "task", "catalog", "rater", "rater_seed", "n_raters", "reward",
                                    "holdout_fraction", "pipeline"}, {"checkpoint", "catalog"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = _task(cfg.get("task", "background"))
    pc = _pipeline_config(cfg, None)
    params = _load_params(cfg["checkpoint"])
    rater = RaterSpec.from_json(cfg.get("rater", {}))
    seed = args.seed if args.seed is not None else int(cfg.get("rater_seed", 0))
    rc = cfg.get("reward", {})
    check_keys(rc, set(RewardConfig.__dataclass_fields__), where="reward")
    inputs = _catalog_inputs(cfg["catalog"])
    examples, groups = collect_reward_examples(params, inputs, task, pc, rater, seed, int(cfg.get("n_raters", 2)))
    ids = sorted(set(groups))
    n_hold = int(math.floor(float(cfg.get("holdout_fraction", 0.25)) * len(ids)))
    held = set(ids[len(ids) - n_hold:])
    train_set = [e for e, g in zip(examples, groups) if g not in held]
    test_set = [e for e, g in zip(examples, groups) if g in held]
    rp = train_reward(train_set, RewardConfig(**rc), task=_review_task(task))
    save_reward(out / "reward.cvck", rp)

    def summary(es):
        if not es:
            return None
        pred = predict(rp, np.stack([e.features for e in es]))
        y = np.array([e.target for e in es])
        return {"n": len(es), "mae": float(np.mean(np.abs(pred - y))),
                "accuracy": float(np.mean((pred > 0.5) == (y > 0.5))), "mean_target": float(y.mean())}

    _write_json(out / "reward_report.json", {"task": task.value, "train": summary(train_set),
                                              "holdout": summary(test_set),
                                              "calibration_warning": rp.calibration_warning})
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate-review
# ---------------------------------------------------------------------------

def cmd_simulate_review(args) -> int:
    cfg = load_config(args.config, {"outputs", "records", "rater", "rater_seed", "n_raters", "task", "table_rows"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_raters = int(cfg.get("n_raters", 2))
    for row in cfg.get("table_rows", []):
        check_keys(row, {"name", "per_question", "overall"}, {"per_question", "overall"}, "table row")
        check_rate_consistency(row["per_question"], row["overall"])
    records: list[RaterRecord] = []
    if "records" in cfg:
        records.extend(read_records(cfg["records"]))
    if "outputs" in cfg:
        rater = RaterSpec.from_json(cfg.get("rater", {}))
        seed = args.seed if args.seed is not None else int(cfg.get("rater_seed", 0))
        manifest = Path(cfg["outputs"])
        if not manifest.exists():
            raise ConfigError(f"outputs manifest {manifest} not found")
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if not row.get("output"):
                continue
            task = _task(row.get("task", cfg.get("task", "background")))
            p = load_input(row["input"], manifest.parent)
            generated = read_image(manifest.parent / row["output"])
            mask = read_mask(manifest.parent / row["output"].replace(".ppm", "_mask.pgm"))
            original = _reference_for_review(p, task, mask)
            records.extend(rate_pair(original, generated, mask, _review_task(task), rater, seed,
                                     row["input_id"], n_raters))
    if not records:
        raise ConfigError("no review records to summarise")
    _write_jsonl(out / "review_records.jsonl", [r.to_json() for r in records])
    outcomes = [aggregate_review(g, n_raters) for g in group_records(records).values()]
    by_task: dict[str, list] = {}
    for o in outcomes:
        by_task.setdefault(o.task.value, []).append(o)
    _write_json(out / "rates.json", {k: no_defect_rates(v).to_json() for k, v in sorted(by_task.items())})
    return EXIT_OK


def _reference_for_review(p: ProductImage, task: TaskKind, mask: np.ndarray) -> np.ndarray:
    """The original's pixels on the output canvas; unknown pixels are filled neutrally."""
    from canvas.pipeline import _hires_source

    src, _, _ = _hires_source(p, task)
    H, W = mask.shape
    out = np.full((3, H, W), 1.0 if task is TaskKind.BACKGROUND_OUTPAINT else 0.5, dtype=np.float32)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if task is TaskKind.ASPECT_RATIO_OUTPAINT:
        out[:, rows[0]:rows[0] + src.shape[1]] = src
        return out
    # background: locate the source frame from the placed product mask
    from canvas.pipeline import bbox

    _, smask, _ = _hires_source(p, task)
    t, _, l, _ = bbox(smask)
    dy, dx = int(rows[0]) - t, int(cols[0]) - l
    known = mask.astype(bool)
    ys, xs = np.nonzero(known)
    out[:, ys, xs] = src[:, ys - dy, xs - dx]
    return out


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def cmd_benchmark(args) -> int:
    cfg = load_config(args.config, {"checkpoint", "model", "size", "steps", "variants", "repeats"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.get("checkpoint"):
        params = _load_params(cfg["checkpoint"])
    else:
        model = cfg.get("model", {})
        check_keys(model, set(ModelConfig.__dataclass_fields__), where="model")
        params = init_params(ModelConfig(**model), args.seed or 0, zero_out=False)
    H, W = cfg.get("size", [24, 16])
    steps = int(cfg.get("steps", 50))
    variants = cfg.get("variants", [
        GuidanceConfig.none().to_json(), GuidanceConfig.sequential(1.5, 7.0).to_json(),
        GuidanceConfig.text_drop(7.0).to_json(), GuidanceConfig.full_drop(3.0).to_json()])
    C = params.config.channels
    cond = ConditionSet(text=tokenize("a product"), images=(np.zeros((C, H, W), np.float32),))
    results, timings = [], []
    for v in variants:
        g = GuidanceConfig.from_json(v)
        field_ = guided_field(ModelField(params), g)
        z = stream(args.seed or 0, "benchmark").standard_normal((C, H, W)).astype(np.float32)
        t0 = time.perf_counter()
        for _ in range(int(cfg.get("repeats", 1))):
            euler_sample(field_, z, make_schedule(steps), cond)
        timings.append(time.perf_counter() - t0)
        evals = field_.base.eval_count // int(cfg.get("repeats", 1))  # backbone forward passes
        results.append({"guidance": g.to_json(), "evals_per_sample": evals})
    base = results[0]["evals_per_sample"]
    for r in results:
        r["eval_ratio"] = r["evals_per_sample"] / base
    _write_json(out / "benchmark.json", {"size": [H, W], "steps": steps, "results": results,
                                         "timings": timings})
    return EXIT_OK


# ---------------------------------------------------------------------------
# make-dataset
# ---------------------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    """Write catalog items as image files plus an inputs manifest for ``outpaint``."""
    cfg = load_config(args.config, {"catalog"}, {"catalog"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = dict(cfg["catalog"])
    if args.seed is not None:
        spec["seed"] = args.seed
    rows = []
    for p in _catalog_inputs(spec):
        stem = p.sample_id
        write_image(out / f"{stem}.ppm", p.image)
        write_image(out / f"{stem}_shot.ppm", p.product_shot)
        write_mask(out / f"{stem}_mask.pgm", p.mask)
        item = int(stem.split("-")[1])
        rows.append({"id": stem, "catalog": {"seed": int(spec.get("seed", 0)), "item": item,
                                             "size": list(p.mask.shape)}, "caption": p.caption})
    _write_jsonl(out / "inputs.jsonl", rows)
    return EXIT_OK


COMMANDS = {
    "train-flow": cmd_train_flow,
    "sample": cmd_sample,
    "outpaint": cmd_outpaint,
    "seed-sweep": cmd_seed_sweep,
    "eval-rewards": cmd_eval_rewards,
    "simulate-review": cmd_simulate_review,
    "benchmark": cmd_benchmark,
    "make-dataset": cmd_make_dataset,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="canvas", description="Toy product-image outpainting toolkit.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON config file")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--task", default=None, help="outpaint task: background or aspect")
    ap.add_argument("--in", dest="inputs", default=None, help="inputs manifest (JSONL)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (NumericDivergence, SpikeAbort) as e:
        print(f"error: numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InvalidArgument, ParseError, KeyError, TypeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
