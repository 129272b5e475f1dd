"""Command-line surface: gen-data, train, dump, metrics, report.

Exit codes: 0 success, 2 validation error (bad flags or config), 1 runtime
error. PRELAB_THREADS caps internal worker threads (default 1); all outputs
are byte-deterministic for fixed inputs and seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import (DataSpec, Dataset, export_label_map_text, generate_dataset,
                   load_dataset, token_name)
from .diagnostics import (linear_probe, logit_lens, patch_metrics_over_images,
                          pool_global, similarity_map, stat_props)
from .model import (MllmConfig, llm_forward, load_checkpoint, lm_loss,
                    dump_hidden_states, read_hidden_states, save_checkpoint)
from .reports import (MetricsReport, config_hash, read_metrics_csv,
                      write_comparison, write_summary_text)
from .training import Trainer, make_batch


class ConfigError(ValueError):
    """Invalid run configuration or command arguments."""


def thread_count() -> int:
    raw = os.environ.get("PRELAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PRELAB_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"PRELAB_THREADS must be >= 1, got {n}")
    return n


def _parallel_map(fn, items):
    n = thread_count()
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))  # collected in order: reproducible


@dataclass
class RunConfig:
    """Everything a training run needs; serialized next to its outputs."""

    # model
    grid: int = 8
    patch: int = 4
    d_v: int = 32
    d_l: int = 64
    layers: int = 8
    heads: int = 4
    vocab: int = 64
    lam: float = 0.5
    target_layer: int = 4
    anchor: str = "pre-llm"
    prompt_len: int = 4
    max_answer: int = 12
    mlp_ratio: int = 2
    seed: int = 0
    # run
    dataset: str = ""
    steps: int = 500
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup_frac: float = 0.03
    use_schedule: bool = True
    out_dir: str = ""
    diag_every: int = 0

    def model_config(self) -> MllmConfig:
        return MllmConfig(grid=self.grid, patch=self.patch, d_v=self.d_v,
                          d_l=self.d_l, layers=self.layers, heads=self.heads,
                          vocab=self.vocab, lam=self.lam,
                          target_layer=self.target_layer, anchor=self.anchor,
                          prompt_len=self.prompt_len, max_answer=self.max_answer,
                          mlp_ratio=self.mlp_ratio, seed=self.seed)

    def validate(self) -> None:
        try:
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup fraction must be in [0, 1), got {self.warmup_frac}")
        if self.diag_every < 0:
            raise ConfigError(f"diag cadence must be >= 0, got {self.diag_every}")

    def to_dict(self) -> dict:
        return asdict(self)


_RUN_FIELDS = {f.name for f in fields(RunConfig)}


def run_config_from_dict(raw: dict) -> RunConfig:
    """Strict constructor: unknown keys are rejected, never ignored (a typo
    in a knob name must not silently run a different experiment)."""
    unknown = set(raw) - _RUN_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    return run_config_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    spec = DataSpec(grid=args.grid, patch=args.patch, num_classes=args.classes,
                    min_objects=args.min_objects, max_objects=args.max_objects)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    manifest = generate_dataset(args.n, args.seed, out, spec)
    if args.export_label_text:
        ds = load_dataset(out)
        text_dir = out / "label-maps"
        text_dir.mkdir(exist_ok=True)
        for ex in ds.all_examples():
            export_label_map_text(ex.labels, text_dir / f"{ex.id:08d}.txt")
    print(f"dataset written to {out}")
    print(f"  n={manifest['n']} seed={manifest['seed']} "
          f"splits={manifest['counts']}")
    return 0


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--steps", type=int, default=defaults.steps)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--lambda", dest="lam", type=float, default=defaults.lam,
                   help="auxiliary loss weight; 0 runs the pure baseline")
    p.add_argument("--target-layer", type=int, default=defaults.target_layer)
    p.add_argument("--anchor", choices=["pre-llm", "pre-proj"], default=defaults.anchor)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    p.add_argument("--warmup-frac", type=float, default=defaults.warmup_frac)
    p.add_argument("--no-schedule", action="store_true",
                   help="constant learning rate instead of warmup+cosine")
    p.add_argument("--grid", type=int, default=defaults.grid)
    p.add_argument("--patch", type=int, default=defaults.patch)
    p.add_argument("--d-v", type=int, default=defaults.d_v)
    p.add_argument("--d-l", type=int, default=defaults.d_l)
    p.add_argument("--layers", type=int, default=defaults.layers)
    p.add_argument("--heads", type=int, default=defaults.heads)
    p.add_argument("--mlp-ratio", type=int, default=defaults.mlp_ratio)
    p.add_argument("--max-answer", type=int, default=defaults.max_answer)
    p.add_argument("--diag-every", type=int, default=defaults.diag_every)


def _run_config_from_args(args) -> RunConfig:
    return run_config_from_dict({
        "grid": args.grid, "patch": args.patch, "d_v": args.d_v, "d_l": args.d_l,
        "layers": args.layers, "heads": args.heads, "lam": args.lam,
        "target_layer": args.target_layer, "anchor": args.anchor,
        "max_answer": args.max_answer, "seed": args.seed,
        "dataset": str(args.data), "steps": args.steps,
        "batch_size": args.batch_size, "lr": args.lr,
        "weight_decay": args.weight_decay, "warmup_frac": args.warmup_frac,
        "use_schedule": not args.no_schedule, "out_dir": str(args.out),
        "mlp_ratio": args.mlp_ratio, "diag_every": args.diag_every,
    })


def _load_dataset_checked(path) -> Dataset:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise ConfigError(f"no dataset manifest in {path}")
    return load_dataset(path)


def cmd_train(args) -> int:
    run_cfg = _run_config_from_args(args)
    dataset = _load_dataset_checked(run_cfg.dataset)
    out = Path(run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(run_cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    trainer = Trainer(run_cfg.model_config(), dataset, steps=run_cfg.steps,
                      batch_size=run_cfg.batch_size, lr=run_cfg.lr,
                      weight_decay=run_cfg.weight_decay,
                      warmup_frac=run_cfg.warmup_frac,
                      use_schedule=run_cfg.use_schedule)

    eval_rows = []

    def on_step(report):
        if run_cfg.diag_every and report.step % run_cfg.diag_every == 0:
            eval_rows.append((report.step, _held_out_lm(trainer, dataset)))

    reports = trainer.run(log_path=out / "train_log.csv", on_step=on_step)
    save_checkpoint(trainer.params, out / "checkpoint.prea")
    if eval_rows:
        lines = ["step,eval_lm"] + [f"{s},{v!r}" for s, v in eval_rows]
        (out / "eval.csv").write_text("\n".join(lines) + "\n")
    last = reports[-1]
    print(f"run {config_hash(run_cfg.to_dict())} finished: {len(reports)} steps, "
          f"final lm {last.lm:.4f}, total {last.total:.4f}")
    print(f"  log {out / 'train_log.csv'}  checkpoint {out / 'checkpoint.prea'}")
    return 0


def _held_out_lm(trainer, dataset, limit: int = 64) -> float:
    examples = dataset.splits["probe-train"][:limit]
    if not examples:
        return float("nan")
    batch = make_batch(trainer.params, trainer.cfg, examples)
    with ad.no_grad():
        trace = llm_forward(trainer.params, batch.z, batch.prompts, batch.answers)
        return float(lm_loss(trace, batch.answers).value)


def _load_run(run_dir):
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    ckpt_path = run_dir / "checkpoint.prea"
    if not cfg_path.exists():
        raise ConfigError(f"no config.json in {run_dir}")
    if not ckpt_path.exists():
        raise ConfigError(f"no checkpoint.prea in {run_dir}")
    run_cfg = load_run_config(cfg_path)
    params = load_checkpoint(run_cfg.model_config(), ckpt_path)
    return run_cfg, params


_SPLIT_CHOICES = ("train", "probe-train", "probe-test", "probe")


def _split_examples(dataset, split):
    if split == "probe":
        return dataset.splits["probe-train"] + dataset.splits["probe-test"]
    return dataset.splits[split]


def cmd_dump(args) -> int:
    run_cfg, params = _load_run(args.run)
    dataset = _load_dataset_checked(args.data)
    examples = _split_examples(dataset, args.split)
    if args.limit:
        examples = examples[: args.limit]
    if not examples:
        raise ConfigError(f"split {args.split!r} has no examples")
    cfg = run_cfg.model_config()
    traces, ids = [], []
    with ad.no_grad():
        for i in range(0, len(examples), 50):
            chunk = examples[i : i + 50]
            batch = make_batch(params, cfg, chunk)
            traces.append(llm_forward(params, batch.z, batch.prompts, batch.answers))
            ids.extend(ex.id for ex in chunk)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_hidden_states(traces, ids, out, grid=cfg.grid)
    print(f"dumped {len(ids)} examples x {cfg.layers + 2} visual tensors to {out}")
    return 0


def _default_sim_choice(dataset, ids):
    """First probe-test example (by id) with >= 2 distinct classes; probe
    patch is the first object patch in row-major order."""
    by_id = {ex.id: ex for ex in dataset.splits["probe-test"]}
    for ex_id in ids:
        ex = by_id.get(ex_id)
        if ex is None:
            continue
        classes = np.unique(ex.labels[ex.labels > 0])
        if classes.size >= 2:
            flat = ex.labels.ravel()
            return ex_id, int(np.nonzero(flat > 0)[0][0])
    return ids[0], 0


def cmd_metrics(args) -> int:
    run_cfg, params = _load_run(args.run)
    cfg = run_cfg.model_config()
    dataset = _load_dataset_checked(args.data)
    grid, hidden = read_hidden_states(args.hidden)
    if grid != cfg.grid:
        raise ConfigError(f"hidden states grid {grid} != run grid {cfg.grid}")
    ids = sorted(hidden)
    n_layers = len(hidden[ids[0]]["layers"])

    split_of = {}
    meta_of = {}
    for name in ("probe-train", "probe-test"):
        for ex in dataset.splits[name]:
            split_of[ex.id] = name
            meta_of[ex.id] = ex
    for name in ("train",):
        for ex in dataset.splits[name]:
            split_of.setdefault(ex.id, name)
            meta_of.setdefault(ex.id, ex)
    missing = [i for i in ids if i not in meta_of]
    if missing:
        raise ConfigError(f"{len(missing)} dumped examples not in dataset "
                          f"(first: {missing[0]})")

    labels_per_image = [meta_of[i].labels for i in ids]
    probe_labels = np.array([meta_of[i].probe_label for i in ids])
    train_idx = np.array([k for k, i in enumerate(ids) if split_of[i] == "probe-train"])
    test_idx = np.array([k for k, i in enumerate(ids) if split_of[i] == "probe-test"])
    if train_idx.size == 0 or test_idx.size == 0:
        raise ConfigError("metrics needs examples from both probe splits "
                          "(dump with --split probe)")

    def layer_features(layer):
        return [hidden[i]["layers"][layer] for i in ids]

    pooled_by_layer = [np.stack([pool_global(f) for f in layer_features(l)])
                       for l in range(n_layers)]
    probe = linear_probe(pooled_by_layer, probe_labels, train_idx, test_idx)

    def layer_metrics(layer):
        pm = patch_metrics_over_images(layer_features(layer), labels_per_image)
        sp = stat_props(pooled_by_layer[layer])
        return pm, sp

    per_layer = _parallel_map(layer_metrics, range(n_layers))

    rows = []
    for layer, (pm, sp) in enumerate(per_layer):
        rows.append({"layer": layer, "probe_acc": probe.accuracies[layer],
                     "cohesion": pm.cohesion, "coupling": pm.coupling,
                     "contrast": pm.contrast, "eff_dim": sp.effective_dim,
                     "redundancy": sp.redundancy})

    # similarity maps for one probe patch
    sim_id = args.sim_example
    sim_patch = args.sim_patch
    if sim_id is None:
        sim_id, default_patch = _default_sim_choice(dataset, ids)
        if sim_patch is None:
            sim_patch = default_patch
    elif sim_patch is None:
        sim_patch = 0
    if sim_id not in hidden:
        raise ConfigError(f"similarity example {sim_id} not in the hidden archive")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for layer in range(n_layers):
        grid_vals = similarity_map(hidden[sim_id]["layers"][layer], sim_patch, grid=grid)
        lines = [" ".join(repr(float(v)) for v in row) for row in grid_vals]
        (out / f"simmap_layer{layer:02d}.txt").write_text("\n".join(lines) + "\n")

    # logit lens through the run's output head
    lens = logit_lens([np.concatenate(layer_features(l)) for l in range(n_layers)],
                      params.ln_f.gamma.value, params.ln_f.beta.value,
                      params.head.w.value, params.head.b.value)
    lens_rows = [{"layer": d.layer,
                  "top": [(tok, token_name(tok), mass) for tok, mass in d.top_tokens]}
                 for d in lens]
    with open(out / "logitlens.csv", "w", newline="") as fh:
        import csv as _csv
        writer = _csv.writer(fh)
        writer.writerow(["layer", "rank", "token", "token_name", "mass"])
        for entry in lens_rows:
            for rank, (tok, name, mass) in enumerate(entry["top"], 1):
                writer.writerow([entry["layer"], rank, tok, name, repr(float(mass))])

    meta = {
        "version": __version__,
        "config": run_cfg.to_dict(),
        "config_hash": config_hash(run_cfg.to_dict()),
        "seed": run_cfg.seed,
        "n_examples": len(ids),
        "n_layers": n_layers,
        "sim_example": int(sim_id),
        "sim_patch": int(sim_patch),
        "floored_images_per_layer": [pm.n_floored for pm, _ in per_layer],
        "coupling_images_per_layer": [pm.n_coupling_images for pm, _ in per_layer],
    }
    MetricsReport(rows=rows, meta=meta).write(out)
    print(f"metrics for {len(ids)} examples x {n_layers} layers -> {out / 'metrics.csv'}")
    return 0


def _read_metrics_dir(path):
    path = Path(path)
    rows = read_metrics_csv(path / "metrics.csv")
    meta = json.loads((path / "summary.json").read_text())
    if config_hash(meta["config"]) != meta["config_hash"]:
        raise ConfigError(f"config hash mismatch in {path / 'summary.json'}")
    lens_rows = []
    lens_path = path / "logitlens.csv"
    if lens_path.exists():
        import csv as _csv
        by_layer = {}
        with open(lens_path, newline="") as fh:
            for row in _csv.DictReader(fh):
                by_layer.setdefault(int(row["layer"]), []).append(
                    (int(row["token"]), row["token_name"], float(row["mass"])))
        lens_rows = [{"layer": layer, "top": tops}
                     for layer, tops in sorted(by_layer.items())]
    sims = {}
    for f in sorted(path.glob("simmap_layer*.txt")):
        layer = int(f.stem.replace("simmap_layer", ""))
        sims[layer] = np.array([[float(v) for v in line.split()]
                                for line in f.read_text().splitlines() if line])
    return rows, meta, lens_rows, sims


def cmd_report(args) -> int:
    b_rows, b_meta, b_lens, b_sims = _read_metrics_dir(args.baseline)
    p_rows, p_meta, p_lens, p_sims = _read_metrics_dir(args.pre)
    if len(b_rows) != len(p_rows):
        raise ConfigError("metric tables have different layer counts")
    sim_layers = args.sim_layers or sorted(set(b_sims) & set(p_sims))
    out = Path(args.out)
    write_comparison(
        b_rows, p_rows, out,
        baseline_sim={l: b_sims[l] for l in sim_layers if l in b_sims},
        pre_sim={l: p_sims[l] for l in sim_layers if l in p_sims},
        sim_probe_index=b_meta.get("sim_patch"),
        baseline_lens=b_lens, pre_lens=p_lens,
    )
    mid = len(b_rows) // 2
    lines = [
        f"comparison of {b_meta['config_hash']} (baseline) vs {p_meta['config_hash']} (+aux)",
        f"layers: {len(b_rows) - 1} + input; mid layer = {mid}",
        "",
        f"probe accuracy  L0 {b_rows[0]['probe_acc']:.3f} -> mid "
        f"{b_rows[mid]['probe_acc']:.3f} (baseline), {p_rows[mid]['probe_acc']:.3f} (+aux)",
        f"contrast        L0 {b_rows[0]['contrast']:.3f} -> mid "
        f"{b_rows[mid]['contrast']:.3f} (baseline), {p_rows[mid]['contrast']:.3f} (+aux)",
        f"mid-layer degradation (baseline contrast, L0 - mid): "
        f"{b_rows[0]['contrast'] - b_rows[mid]['contrast']:+.3f}",
        f"mid-layer aux effect (contrast, +aux - baseline): "
        f"{p_rows[mid]['contrast'] - b_rows[mid]['contrast']:+.3f}",
    ]
    write_summary_text(out / "summary.txt", lines)
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prelab",
        description="toy multimodal decoder lab: train with or without "
                    "predictive patch regularization and measure per-layer "
                    "visual representation quality")
    parser.add_argument("--version", action="version", version=f"prelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--export-label-text", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy model")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("dump", help="dump per-layer visual hidden states")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=_SPLIT_CHOICES, default="probe")
    p.add_argument("--out", required=True, help="output archive file")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(fn=cmd_dump)

    p = sub.add_parser("metrics", help="compute per-layer diagnostics")
    p.add_argument("--hidden", required=True, help="hidden-state archive")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sim-example", type=int, default=None)
    p.add_argument("--sim-patch", type=int, default=None)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("report", help="compare two metric reports")
    p.add_argument("--baseline", required=True, help="baseline metrics directory")
    p.add_argument("--pre", required=True, help="regularized metrics directory")
    p.add_argument("--out", required=True)
    p.add_argument("--sim-layers", type=int, nargs="*", default=None)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
