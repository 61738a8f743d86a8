"""On-disk experiment pipeline shared by the command line and the demos.

Layout under an output root::

    data/   manifest.json  codebooks.bin  catalog.csv  interactions.csv
    runs/<name>/  config.yaml  fingerprint.txt  checkpoint.npz  steps.csv  metrics.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernel as K
from . import quantizer as Q
from .backbone import Decoder
from .config import ConfigError, ExperimentConfig
from .corpus import (
    CatalogError,
    Example,
    InteractionDataset,
    SidTrie,
    build_catalog,
    generate_synthetic,
    ingest_csv,
    make_batch,
    split_leave_one_out,
)
from .evaluator import MeasurementError, MetricsReport, aggregate_efficiency, dump_attention, evaluate, summarize_efficiency
from .sap import PruneConfig, make_hook
from .trainer import Trainer, TrainingDiverged, TrainResult, read_step_log, run_training

logger = logging.getLogger(__name__)

COMPARE_COLUMNS = ("run", "Recall@5", "Recall@10", "NDCG@5", "NDCG@10", "Hit@20", "Hit@100", "Time", "Speedup", "PeakBytes", "Reduction")


class ComparisonError(Exception):
    pass


class ArtifactError(Exception):
    pass


# ---------------------------------------------------------------------------
# data generation


@dataclass
class DataBundle:
    dataset: InteractionDataset
    codebooks: Q.Codebooks
    manifest: dict
    fingerprint: str

    @property
    def catalog(self):
        return self.dataset.catalog


def _read_embeddings(path: str) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                out[row[0].strip()] = np.array([float(v) for v in row[1:]])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ConfigError(f"{path}:{lineno}: non-numeric embedding value") from None
    return out


def cmd_gen(cfg: ExperimentConfig) -> Path:
    """Build the dataset, fit codebooks and write every data artifact."""
    cfg.check_paths()
    dc, qc = cfg.data, cfg.quantizer
    if dc.kind == "synthetic":
        emb, ds = generate_synthetic(dc.n_users, dc.n_items, dc.d_emb, dc.n_latent_clusters, dc.seed, history_len=dc.history_len)
        items = list(range(dc.n_items))
    else:
        ds = ingest_csv(dc.csv_path, dc.min_count)
        table = _read_embeddings(dc.embeddings_path)
        items = sorted(ds.items)
        missing = [i for i in items if i not in table]
        if missing:
            raise CatalogError(f"items without embeddings: {missing[:5]}")
        emb = np.stack([table[i] for i in items])
    cb = Q.fit(emb, L=qc.L, V_c=qc.V_c, seed=qc.seed, max_iters=qc.max_iters)
    codes = Q.encode_many(emb, cb)

    out = cfg.data_dir()
    out.mkdir(parents=True, exist_ok=True)
    cb.save(out / "codebooks.bin")
    with open(out / "catalog.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id"] + [f"c{j}" for j in range(qc.L)])
        for item, row in zip(items, codes):
            w.writerow([item] + [int(c) for c in row])
    with open(out / "interactions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "timestamp"])
        for u in ds.users:
            for t, item in enumerate(ds.histories[u]):
                w.writerow([u, item, t])
    manifest = {
        "n_users": len(ds.users),
        "n_items": len(items),
        "n_interactions": ds.n_interactions,
        "collision_rate": Q.collision_rate(codes),
        "L": qc.L,
        "V_c": qc.V_c,
        "d_emb": int(emb.shape[1]),
        "fingerprint": fingerprint(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def fingerprint(data_dir: str | Path) -> str:
    """Content hash of the interaction log and the catalog code map."""
    h = hashlib.sha256()
    for name in ("interactions.csv", "catalog.csv"):
        h.update(name.encode())
        h.update((Path(data_dir) / name).read_bytes())
    return h.hexdigest()


def load_data(data_dir: str | Path) -> DataBundle:
    d = Path(data_dir)
    for name in ("manifest.json", "codebooks.bin", "catalog.csv", "interactions.csv"):
        if not (d / name).exists():
            raise ArtifactError(f"{d / name} missing; run `gen` first")
    manifest = json.loads((d / "manifest.json").read_text())
    cb = Q.Codebooks.load(d / "codebooks.bin")
    with open(d / "catalog.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    catalog = build_catalog([r[0] for r in rows], np.array([[int(c) for c in r[1:]] for r in rows], dtype=np.int64).reshape(len(rows), cb.L))
    histories: dict[str, list[str]] = {}
    with open(d / "interactions.csv", newline="") as fh:
        for r in list(csv.reader(fh))[1:]:
            histories.setdefault(r[0], []).append(r[1])
    ds = InteractionDataset(users=list(histories), histories=histories, catalog=catalog)
    ds.check()
    fp = fingerprint(d)
    if fp != manifest.get("fingerprint"):
        raise ArtifactError(f"{d}: data files do not match the manifest fingerprint")
    return DataBundle(ds, cb, manifest, fp)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunOutput:
    run_dir: Path
    result: TrainResult
    metrics: MetricsReport


def _validator(cfg: ExperimentConfig, catalog, trie: SidTrie, hook):
    def validate(model: Decoder, examples: Sequence[Example]) -> float:
        rep = evaluate(model, examples, catalog, trie, cfg.data.window_items, cfg.quantizer.V_c, cfg.train.beam_width, prune_hook=hook)
        return rep.recall_at[10]

    return validate


def _efficiency(log) -> tuple[float, float]:
    try:
        return summarize_efficiency(log)
    except MeasurementError:
        # short runs: fall back to every recorded step
        return float(np.mean([r.wall_millis for r in log])), float(np.mean([r.high_water_bytes for r in log]))


def cmd_train(cfg: ExperimentConfig, bundle: DataBundle | None = None) -> RunOutput:
    bundle = bundle or load_data(cfg.data_dir())
    if (bundle.manifest["L"], bundle.manifest["V_c"]) != (cfg.quantizer.L, cfg.quantizer.V_c):
        raise ConfigError("quantizer section disagrees with the generated data")
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    (run_dir / "fingerprint.txt").write_text(bundle.fingerprint + "\n")

    split = split_leave_one_out(bundle.dataset)
    catalog = bundle.catalog
    trie = SidTrie(catalog)
    model = Decoder(cfg.model_config(), seed=cfg.model.init_seed)
    trainer = Trainer(model, cfg.train, cfg.prune, cfg.map)
    W, V_c = cfg.data.window_items, cfg.quantizer.V_c

    def make(examples):
        return make_batch(examples, catalog, W, V_c)

    try:
        result = run_training(trainer, split.train, split.val, make, _validator(cfg, catalog, trie, trainer.hook), run_dir / "steps.csv")
    except TrainingDiverged as exc:
        diag = {"error": "non-finite loss", "step": exc.step, "components": {k: repr(v) for k, v in exc.components.items()}}
        (run_dir / "diagnostic.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
        raise

    model.load_state_dict(result.best_state)
    extra = {
        "variant": cfg.variant,
        "best_step": result.best_step,
        "best_val_recall10": result.best_metric,
        "stop_reason": result.stop_reason,
        "fingerprint": bundle.fingerprint,
    }
    model.save(run_dir / "checkpoint.npz", extra=extra)
    metrics = evaluate(model, split.test, catalog, trie, W, V_c, cfg.train.beam_width, prune_hook=trainer.hook)
    metrics.mean_step_millis, metrics.peak_bytes = _efficiency(result.log)
    metrics.save(run_dir / "metrics.json")
    return RunOutput(run_dir, result, metrics)


def load_run(run_dir: str | Path) -> tuple[ExperimentConfig, Decoder, dict]:
    run_dir = Path(run_dir)
    for name in ("config.yaml", "checkpoint.npz"):
        if not (run_dir / name).exists():
            raise ArtifactError(f"{run_dir}: missing {name}")
    cfg = ExperimentConfig.load(run_dir / "config.yaml")
    model, extra = Decoder.load(run_dir / "checkpoint.npz")
    return cfg, model, extra


def cmd_eval(run_dir: str | Path, split_name: str = "test", attention_layers: Sequence[int] = (), data_dir: str | Path | None = None) -> MetricsReport:
    cfg, model, extra = load_run(run_dir)
    bundle = load_data(data_dir or cfg.data_dir())
    if extra.get("fingerprint") != bundle.fingerprint:
        raise ArtifactError(f"{run_dir}: checkpoint was trained on different data")
    split = split_leave_one_out(bundle.dataset)
    examples = {"val": split.val, "test": split.test}[split_name]
    hook = make_hook(cfg.prune)
    W, V_c = cfg.data.window_items, cfg.quantizer.V_c
    rep = evaluate(model, examples, bundle.catalog, SidTrie(bundle.catalog), W, V_c, cfg.train.beam_width, prune_hook=hook)
    if attention_layers:
        batch = make_batch(examples[:1], bundle.catalog, W, V_c)
        with K.no_grad():
            trace = model.forward(batch.input_ids, batch.valid, prune_hook=hook, retain=tuple(attention_layers))
        dump_attention(trace, attention_layers, Path(run_dir) / "attention")
    Path(run_dir, f"eval_{split_name}.json").write_text(rep.to_json() + "\n")
    return rep


# ---------------------------------------------------------------------------
# comparison


def _run_artifacts(run_dir: Path):
    name = run_dir.name
    needed = {"config.yaml": "config", "fingerprint.txt": "dataset fingerprint", "metrics.json": "metrics", "steps.csv": "StepRecord CSV"}
    for fname, what in needed.items():
        if not (run_dir / fname).exists():
            raise ComparisonError(f"run {name!r}: missing {what} ({run_dir / fname})")
    fp = (run_dir / "fingerprint.txt").read_text().strip()
    return fp, MetricsReport.load(run_dir / "metrics.json"), read_step_log(run_dir / "steps.csv")


def _num(v: float | None, fmt: str) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, fmt)


def compare_rows(run_dirs: Sequence[str | Path]) -> list[list[str]]:
    """Rows of the comparison table; the first run is the baseline."""
    if len(run_dirs) < 2:
        raise ComparisonError("compare needs at least two runs (the first is the baseline)")
    dirs = [Path(d) for d in run_dirs]
    arts = [_run_artifacts(d) for d in dirs]
    base_fp, _, base_log = arts[0]
    for d, (fp, _, _) in zip(dirs[1:], arts[1:]):
        if fp != base_fp:
            raise ComparisonError(f"run {d.name!r} was trained on different data than {dirs[0].name!r}")
    try:
        t_base, _ = summarize_efficiency(base_log)
    except MeasurementError as exc:
        raise ComparisonError(f"run {dirs[0].name!r}: {exc}") from None
    rows = [list(COMPARE_COLUMNS)]
    for d, (_, rep, log) in zip(dirs, arts):
        try:
            t, peak = summarize_efficiency(log)
            speedup, reduction = aggregate_efficiency(log, base_log)
        except MeasurementError as exc:
            raise ComparisonError(f"run {d.name!r}: {exc}") from None
        rows.append(
            [
                d.name,
                _num(rep.recall_at.get(5), ".6f"),
                _num(rep.recall_at.get(10), ".6f"),
                _num(rep.ndcg_at.get(5), ".6f"),
                _num(rep.ndcg_at.get(10), ".6f"),
                _num(rep.hit_at.get(20), ".6f"),
                _num(rep.hit_at.get(100), ".6f"),
                f"{t:.3f}",
                f"{speedup:.4f}",
                f"{peak:.0f}",
                f"{reduction:.4f}",
            ]
        )
    return rows


def cmd_compare(run_dirs: Sequence[str | Path], out_path: str | Path) -> list[list[str]]:
    rows = compare_rows(run_dirs)
    with open(out_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# ablation


VARIANTS = {
    "Base": (False, False),
    "SAP": (True, False),
    "MAP": (False, True),
    "STAMP": (True, True),
}


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Switch SAP and MAP on or off, keeping every other setting."""
    prune_on, map_on = VARIANTS[variant]
    strategy = cfg.prune.strategy if cfg.prune.strategy != "none" else "sap"
    prune = replace(cfg.prune, strategy=strategy if prune_on else "none")
    return replace(cfg, name=f"{cfg.name}-{variant}", prune=prune, map=replace(cfg.map, enabled=map_on))


def ablation_configs(
    cfg: ExperimentConfig,
    variants: bool = True,
    alphas: Sequence[float] = (),
    l_prunes: Sequence[int] = (),
    strategies: Sequence[str] = (),
) -> list[ExperimentConfig]:
    """Base first, then the module ablation and the requested sweeps."""
    base = variant_config(cfg, "Base")
    out = [base]
    if variants:
        out += [variant_config(cfg, v) for v in ("SAP", "MAP", "STAMP")]
    pruned = cfg.prune if cfg.prune.strategy != "none" else replace(cfg.prune, strategy="sap")
    for a in alphas:
        out.append(replace(cfg, name=f"{cfg.name}-alpha{a:g}", prune=replace(pruned, alpha=float(a))))
    for lp in l_prunes:
        out.append(replace(cfg, name=f"{cfg.name}-lprune{lp}", prune=replace(pruned, l_prune=int(lp))))
    for s in strategies:
        out.append(replace(cfg, name=f"{cfg.name}-{s}", prune=replace(pruned, strategy=s)))
    return out


def compressed_lengths(model: Decoder, batch, prune_cfg: PruneConfig) -> np.ndarray:
    """Per-sequence length after the prune layer for ``batch``."""
    hook = make_hook(prune_cfg)
    with K.no_grad(), K.deterministic(True):
        trace = model.forward(batch.input_ids, batch.valid, prune_hook=hook)
    return trace.valid.sum(axis=1)


STRUCTURE_COLUMNS = ("run", "strategy", "alpha", "l_prune", "window_W", "input_len", "compressed_len")


def cmd_ablate(
    cfg: ExperimentConfig,
    variants: bool = True,
    alphas: Sequence[float] = (),
    l_prunes: Sequence[int] = (),
    strategies: Sequence[str] = (),
) -> Path:
    """Train every configuration, then write ``summary.csv`` and ``structure.csv``."""
    bundle = load_data(cfg.data_dir())
    configs = ablation_configs(cfg, variants, alphas, l_prunes, strategies)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"ablation produced duplicate run names: {names}")
    outs = [cmd_train(c, bundle) for c in configs]
    out_dir = cfg.output_path() / "ablations" / cfg.name
    out_dir.mkdir(parents=True, exist_ok=True)
    cmd_compare([o.run_dir for o in outs], out_dir / "summary.csv")

    probe = split_leave_one_out(bundle.dataset).val[: cfg.train.batch_size]
    batch = make_batch(probe, bundle.catalog, cfg.data.window_items, cfg.quantizer.V_c)
    with open(out_dir / "structure.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STRUCTURE_COLUMNS)
        for c, o in zip(configs, outs):
            p = c.prune
            lengths = compressed_lengths(Decoder.load(o.run_dir / "checkpoint.npz")[0], batch, p)
            w.writerow([c.name, p.strategy, repr(p.alpha), p.l_prune, p.window_W, int(batch.valid.sum(1).sum()), int(lengths.sum())])
    return out_dir
