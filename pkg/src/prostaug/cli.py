"""Command-line entry points for the pipeline stages and experiment grids."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click
import numpy as np

from . import curation, harness, maskgen, synthesis, unetseg
from .dataio import generate_phantom_case


def _load_config(config_path: str | None, seed: int | None, scale: str) -> harness.ExperimentConfig:
    if config_path:
        cfg = harness.ExperimentConfig.from_dict(json.loads(Path(config_path).read_text()))
    elif scale == "desk":
        cfg = harness.desk_config()
    else:
        raise click.UsageError("--scale full requires --config with a promise12 path")
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                      help="JSON experiment config; defaults to the desk preset.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the root seed.")(fn)
    fn = click.option("--scale", type=click.Choice(["desk", "full"]), default="desk")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default="runs/out")(fn)
    return fn


@click.group()
def main():
    """Prostate WG segmentation with GAN-based synthetic augmentation."""


@main.command()
@_common_options
def prepare(config_path, seed, scale, out_dir):
    """Preprocess the dataset and write the patient split manifest."""
    cfg = _load_config(config_path, seed, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = harness.prepare_dataset(cfg)
    from .dataio import split_patients

    manifest = split_patients(
        sorted(prepared.samples_by_patient), cfg.split_ratios,
        seed=harness.sub_seed(cfg.seed, "split"),
    )
    (out / "split.json").write_text(manifest.to_json())
    (out / "config.json").write_text(cfg.to_json())
    n_slices = sum(len(v) for v in prepared.samples_by_patient.values())
    click.echo(f"prepared {len(prepared.samples_by_patient)} patients, {n_slices} slices")
    click.echo(f"split: {len(manifest.train)} train / {len(manifest.val)} val / {len(manifest.test)} test")


@main.command("train-seg")
@_common_options
def train_seg(config_path, seed, scale, out_dir):
    """Train the U-Net segmenter for the configured augmentation row."""
    cfg = _load_config(config_path, seed, scale)
    row, report = harness.run_experiment(cfg, out_dir)
    click.echo(harness.emit_table([row]))


@main.command("train-maskgan")
@_common_options
def train_maskgan(config_path, seed, scale, out_dir):
    """Train the mask DCGAN on the prostate-bearing training slices."""
    cfg = _load_config(config_path, seed, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = harness.prepare_dataset(cfg)
    train_samples, _, _ = harness._split_dataset(cfg, prepared)
    masks = [s.mask for s in train_samples if s.mask.any()]
    G, history = maskgen.train_mask_gan(masks, cfg.maskgan, seed=harness.sub_seed(cfg.seed, "maskgan"))
    maskgen.save_generator(out / "maskgan.pt", G, seed=cfg.seed)
    lines = ["iteration,d_loss,g_loss"] + [
        f"{i},{d:.6f},{g:.6f}" for i, (d, g) in enumerate(zip(history.d_loss, history.g_loss))
    ]
    (out / "maskgan_history.csv").write_text("\n".join(lines) + "\n")
    click.echo(f"trained {len(history)} iterations -> {out / 'maskgan.pt'}")


@main.command("screen-masks")
@_common_options
@click.option("--generator", "generator_path", type=click.Path(exists=True), required=True)
@click.option("--count", type=int, default=64, help="Masks to generate and screen.")
def screen_masks(config_path, seed, scale, out_dir, generator_path, count):
    """Generate masks and run the automatic realism screen."""
    cfg = _load_config(config_path, seed, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = harness.prepare_dataset(cfg)
    train_samples, _, _ = harness._split_dataset(cfg, prepared)
    real = [s.mask for s in train_samples if s.mask.any()]
    bounds = curation.ScreenBounds(**curation.fit_area_bounds(real))

    G = maskgen.load_generator(generator_path)
    masks = maskgen.generate_masks(G, count, seed=harness.sub_seed(cfg.seed, "screen"))
    store = curation.CurationStore(out / "curation.ndjson")
    store.ingest_candidates(
        list(masks), bounds, auto_apply=cfg.synthetic.curation_mode == "auto"
    )
    click.echo(json.dumps(store.stats()))


@main.command("serve-review")
@click.option("--ledger", type=click.Path(), default="runs/review/curation.ndjson")
@click.option("--static-dir", type=click.Path(), default=None,
              help="Built review UI to serve alongside the API.")
@click.option("--seed-phantom", type=int, default=0,
              help="Ingest N demo candidates (pending) before serving.")
@click.option("--seed", type=int, default=0)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8008)
def serve_review(ledger, static_dir, seed_phantom, seed, host, port):
    """Host the curation API (and optionally the review UI) over HTTP."""
    import uvicorn

    ledger = Path(ledger)
    ledger.parent.mkdir(parents=True, exist_ok=True)
    store = curation.CurationStore(ledger)
    if seed_phantom > 0:
        masks = demo_candidate_masks(seed_phantom, seed)
        bounds = curation.ScreenBounds(area_lo=0.005, area_hi=0.3)
        store.ingest_candidates(masks, bounds, auto_apply=False)
    app = curation.create_app(store, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


def demo_candidate_masks(n: int, seed: int, size: int = 256) -> list[np.ndarray]:
    """Plausible and implausible masks for exercising the review workflow."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    masks = []
    for i in range(n):
        cy, cx = rng.uniform(0.35, 0.65, 2) * size
        a, b = rng.uniform(0.06, 0.14, 2) * size
        mask = (((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1).astype(np.uint8)
        kind = i % 4
        if kind == 1:  # disconnected second blob
            mask |= (((yy - cy * 0.4) / (a * 0.4)) ** 2 + ((xx - cx * 0.4) / (b * 0.4)) ** 2 <= 1)
        elif kind == 2:  # shifted against the frame
            mask = np.roll(mask, size // 2, axis=1)
        masks.append(mask.astype(np.uint8))
    return masks


@main.command("train-pix2pix")
@_common_options
def train_pix2pix(config_path, seed, scale, out_dir):
    """Train the mask-to-image translator on real pairs."""
    cfg = _load_config(config_path, seed, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = harness.prepare_dataset(cfg)
    train_samples, _, _ = harness._split_dataset(cfg, prepared)
    pairs = [s for s in train_samples if s.mask.any()]
    G, history = synthesis.train_translator(pairs, cfg.pix2pix, seed=harness.sub_seed(cfg.seed, "p2p"))
    synthesis.save_translator(out / "pix2pix.pt", G, seed=cfg.seed)
    click.echo(f"trained {len(history)} iterations -> {out / 'pix2pix.pt'}")


@main.command()
@_common_options
@click.option("--translator", "translator_path", type=click.Path(exists=True), required=True)
@click.option("--store", "store_path", type=click.Path(exists=True), required=True,
              help="Curation ledger with accepted masks.")
def synthesize(config_path, seed, scale, out_dir, translator_path, store_path):
    """Translate every accepted mask into a synthetic T2 pair."""
    out = Path(out_dir)
    G = synthesis.load_translator(translator_path)
    store = curation.CurationStore(store_path)
    pairs = synthesis.synthesize_pairs(
        G, store, checkpoint_id=Path(translator_path).name, maskgen_run_id="external"
    )
    for p in pairs:
        store.attach_preview(p.id, p.image)
    manifest = synthesis.export_pairs(pairs, out / "pairs")
    click.echo(f"synthesized {len(pairs)} pairs -> {manifest}")


@main.command()
@_common_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
def evaluate(config_path, seed, scale, out_dir, checkpoint_path):
    """Evaluate a segmenter checkpoint on the held-out test split."""
    from .dataio import MaskVolume
    from .evalmetrics import evaluate as run_eval

    cfg = _load_config(config_path, seed, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = harness.prepare_dataset(cfg)
    _, _, test_ids = harness._split_dataset(cfg, prepared)
    model = unetseg.load_checkpoint(checkpoint_path)

    predictions, ground_truths = [], []
    for pid in test_ids:
        gt = prepared.gt_volumes[pid]
        pred = np.stack(
            [unetseg.predict_mask(model, s.image) for s in prepared.samples_by_patient[pid]]
        )
        predictions.append(MaskVolume(voxels=pred, spacing_mm=gt.spacing_mm, patient_id=pid))
        ground_truths.append(gt)
    report = run_eval(predictions, ground_truths, cfg.eval)
    (out / "metrics.json").write_text(report.to_json())
    dsc, msd, hd, vdsc = report.as_row()
    click.echo(f"DSC {dsc:.2f}  MSD {msd:.2f}  HD {hd:.2f}  VDSC {vdsc:.2f}")


@main.command()
@_common_options
@click.option("--with-synthetic", is_flag=True, default=False,
              help="Combine every standard row with the synthetic pairs (table 2 grid).")
def table(config_path, seed, scale, out_dir, with_synthetic):
    """Run the full 8-row augmentation grid and emit the results table."""
    cfg = _load_config(config_path, seed, scale)
    out = Path(out_dir)
    results = harness.run_table(cfg, out, combine_with_synthetic=with_synthetic)
    csv_text = harness.emit_table(results, fmt="csv")
    (out / "table.csv").write_text(csv_text)
    (out / "table.md").write_text(harness.emit_table(results, fmt="markdown"))
    (out / "metadata.json").write_text(json.dumps(results.metadata(), indent=2))
    click.echo(csv_text, nl=False)


@main.command()
@_common_options
@click.option("--counts", default="0,16,32,64",
              help="Comma-separated synthetic sample counts.")
def sweep(config_path, seed, scale, out_dir, counts):
    """Synthetic-sample-size sweep: one run per count, DSC recorded."""
    cfg = _load_config(config_path, seed, scale)
    out = Path(out_dir)
    ladder = [int(c) for c in counts.split(",")]
    results = harness.sweep_synthetic_size(cfg, ladder, out)
    lines = ["count,DSC"] + [f"{c},{d:.2f}" for c, d in results]
    text = "\n".join(lines) + "\n"
    (out / "sweep.csv").write_text(text)
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
