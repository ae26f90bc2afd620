"""Experiment orchestration: assemble training sets per augmentation row,
train, evaluate, and emit the results tables and synthetic-size sweep.

Every random draw descends from a single root seed through named sub-seeds,
so a whole table grid is reproducible end to end.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import curation, maskgen, synthesis, unetseg
from .augment import AugmentSpec, TABLE_ROW_LABELS
from .dataio import MaskVolume, SliceSample, Volume, extract_slices, generate_phantom_case, \
    list_promise12_cases, load_promise12_case, split_patients
from .evalmetrics import EvalConfig, MetricsReport, evaluate
from .preprocess import PreprocessConfig, preprocess_case


def sub_seed(root_seed: int, name: str) -> int:
    """Deterministic named sub-seed derived from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "big") % (2 ** 31)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    kind: str = "phantom"  # phantom | promise12
    path: str | None = None
    n_patients: int = 12
    n_slices: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("phantom", "promise12"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "promise12" and not self.path:
            raise ValueError("promise12 dataset requires a path")


@dataclass
class SyntheticConfig:
    enabled: bool = False
    count: int | None = None
    multiplier: float | None = None
    maskgen_checkpoint: str | None = None
    translator_checkpoint: str | None = None
    pairs_manifest: str | None = None
    curation_mode: str = "auto"  # auto | reviewed

    def __post_init__(self):
        if self.enabled and (self.count is None) == (self.multiplier is None):
            raise ValueError("set exactly one of count or multiplier when synthetic is enabled")
        if self.curation_mode not in ("auto", "reviewed"):
            raise ValueError(f"unknown curation mode {self.curation_mode!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    row: str = "Original"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    unet: unetseg.UNetConfig = field(default_factory=unetseg.UNetConfig)
    seg_train: unetseg.SegTrainConfig = field(default_factory=unetseg.SegTrainConfig)
    maskgan: maskgen.MaskGanConfig = field(default_factory=maskgen.MaskGanConfig)
    pix2pix: synthesis.Pix2PixConfig = field(default_factory=synthesis.Pix2PixConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scale: str = "desk"  # desk | full
    seed: int = 0

    def __post_init__(self):
        if self.row not in TABLE_ROW_LABELS:
            raise ValueError(f"unknown row {self.row!r}; expected one of {TABLE_ROW_LABELS}")
        if self.row == "Synthetic data" and not self.synthetic.enabled:
            raise ValueError("row 'Synthetic data' requires synthetic.enabled")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def build(klass, sub: dict):
            fields = {f.name: f for f in dataclasses.fields(klass)}
            kwargs = {}
            for k, v in sub.items():
                if k not in fields:
                    raise ValueError(f"unknown {klass.__name__} field {k!r}")
                if isinstance(v, list):
                    v = tuple(v)
                kwargs[k] = v
            return klass(**kwargs)

        d = dict(d)
        return cls(
            dataset=build(DatasetConfig, d.pop("dataset", {})),
            preprocess=build(PreprocessConfig, d.pop("preprocess", {})),
            synthetic=build(SyntheticConfig, d.pop("synthetic", {})),
            unet=build(unetseg.UNetConfig, d.pop("unet", {})),
            seg_train=build(unetseg.SegTrainConfig, d.pop("seg_train", {})),
            maskgan=build(maskgen.MaskGanConfig, d.pop("maskgan", {})),
            pix2pix=build(synthesis.Pix2PixConfig, d.pop("pix2pix", {})),
            eval=build(EvalConfig, d.pop("eval", {})),
            **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()},
        )

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


def desk_config(seed: int = 0) -> ExperimentConfig:
    """Minutes-scale preset: 12 phantom patients, 64x64, small models."""
    return ExperimentConfig(
        dataset=DatasetConfig(kind="phantom", n_patients=12, n_slices=16, seed=0),
        preprocess=PreprocessConfig(target_size=(64, 64), clahe_tiles=(4, 4)),
        unet=unetseg.UNetConfig(input_size=(64, 64), depth=3, base_channels=16),
        seg_train=unetseg.SegTrainConfig(epochs=15, batch_size=16),
        maskgan=maskgen.MaskGanConfig(
            image_size=64, batch_size=16, g_lr=8e-4, d_input_noise=0.2, target_iters=150
        ),
        pix2pix=synthesis.Pix2PixConfig(image_size=64, base_channels=32, target_iters=200),
        synthetic=SyntheticConfig(enabled=False, count=64),
        scale="desk",
        seed=seed,
    )


def full_config(promise12_path: str, seed: int = 0) -> ExperimentConfig:
    """Paper-scale preset; multi-hour GPU training territory."""
    return ExperimentConfig(
        dataset=DatasetConfig(kind="promise12", path=promise12_path),
        synthetic=SyntheticConfig(enabled=False, count=10000),
        scale="full",
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Dataset preparation (with a shared cache keyed by dataset + preprocess)
# ---------------------------------------------------------------------------

@dataclass
class PreparedDataset:
    samples_by_patient: dict[str, list[SliceSample]]
    gt_volumes: dict[str, MaskVolume]
    source_spacing: dict[str, tuple[float, float, float]]


_PREPARE_CACHE: dict[str, PreparedDataset] = {}


def _load_cases(cfg: DatasetConfig) -> list[tuple[Volume, MaskVolume]]:
    if cfg.kind == "phantom":
        return [
            generate_phantom_case(cfg.seed + i, cfg.n_slices) for i in range(cfg.n_patients)
        ]
    cases = []
    for cid in list_promise12_cases(cfg.path):
        vol, mask = load_promise12_case(cfg.path, cid)
        if mask is not None:
            cases.append((vol, mask))
    if not cases:
        raise FileNotFoundError(f"no annotated cases under {cfg.path}")
    return cases


def prepare_dataset(config: ExperimentConfig) -> PreparedDataset:
    """Preprocess every case once per (dataset, preprocess-config) pair."""
    key = hashlib.sha256(
        json.dumps(
            {"dataset": asdict(config.dataset), "preprocess": asdict(config.preprocess)},
            sort_keys=True,
        ).encode()
    ).hexdigest()
    if key in _PREPARE_CACHE:
        return _PREPARE_CACHE[key]

    samples_by_patient: dict[str, list[SliceSample]] = {}
    gt_volumes: dict[str, MaskVolume] = {}
    source_spacing: dict[str, tuple[float, float, float]] = {}
    for vol, mask in _load_cases(config.dataset):
        samples = preprocess_case(vol, mask, config.preprocess)
        pid = vol.patient_id
        samples_by_patient[pid] = samples
        gt_volumes[pid] = MaskVolume(
            voxels=np.stack([s.mask for s in samples]),
            spacing_mm=(vol.spacing_mm[0],) + samples[0].spacing_mm,
            patient_id=pid,
        )
        source_spacing[pid] = vol.spacing_mm

    prepared = PreparedDataset(samples_by_patient, gt_volumes, source_spacing)
    _PREPARE_CACHE[key] = prepared
    return prepared


# ---------------------------------------------------------------------------
# Synthetic assets: mask GAN -> screening -> pix2pix -> paired samples
# ---------------------------------------------------------------------------

@dataclass
class SyntheticAssets:
    generator_path: Path
    translator_path: Path
    pairs_manifest: Path
    n_pairs: int
    screen_stats: dict[str, int]


def build_synthetic_assets(
    config: ExperimentConfig,
    train_samples: list[SliceSample],
    out_dir: Path,
    n_pairs: int,
    max_rounds: int = 50,
) -> SyntheticAssets:
    """Train the mask GAN and the translator, then emit n_pairs curated pairs.

    Generated masks are screened in rounds until n_pairs are accepted; too low
    an acceptance rate is a hard error rather than a silently smaller dataset.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = config.seed

    gland_samples = [s for s in train_samples if s.mask.any()]
    if not gland_samples:
        raise ValueError("no prostate-bearing training slices for GAN training")
    real_masks = [s.mask for s in gland_samples]

    G, _ = maskgen.train_mask_gan(real_masks, config.maskgan, seed=sub_seed(root, "maskgan"))
    gen_path = out_dir / "maskgan.pt"
    maskgen.save_generator(gen_path, G, seed=sub_seed(root, "maskgan"))

    bounds = curation.ScreenBounds(**curation.fit_area_bounds(real_masks))
    store = curation.CurationStore(out_dir / "curation.ndjson")
    accepted_needed = n_pairs
    batch = max(64, n_pairs)
    rounds = 0
    while len(store.export_accepted()) < accepted_needed:
        if rounds >= max_rounds:
            raise RuntimeError(
                f"screening accepted only {len(store.export_accepted())}/{accepted_needed} "
                f"masks after {rounds} rounds; generator quality too low"
            )
        masks = maskgen.generate_masks(
            G, batch, seed=sub_seed(root, f"synth-latents-{rounds}")
        )
        store.ingest_candidates(
            list(masks), bounds, auto_apply=config.synthetic.curation_mode == "auto"
        )
        if config.synthetic.curation_mode == "reviewed":
            break  # pending items wait for the human reviewer
        rounds += 1

    accepted = store.export_accepted()[:accepted_needed]
    if len(accepted) < accepted_needed:
        raise RuntimeError(
            f"only {len(accepted)} accepted masks available, need {accepted_needed}"
        )

    T, _ = synthesis.train_translator(gland_samples, config.pix2pix, seed=sub_seed(root, "p2p"))
    tr_path = out_dir / "pix2pix.pt"
    synthesis.save_translator(tr_path, T, seed=sub_seed(root, "p2p"))

    pairs = synthesis.synthesize_pairs(
        T,
        store,
        checkpoint_id=tr_path.name,
        maskgen_run_id=gen_path.name,
        ids=[cid for cid, _ in accepted],
    )
    manifest = synthesis.export_pairs(pairs, out_dir / "pairs")
    return SyntheticAssets(
        generator_path=gen_path,
        translator_path=tr_path,
        pairs_manifest=manifest,
        n_pairs=len(pairs),
        screen_stats=store.stats(),
    )


def synthetic_pairs_as_samples(pairs: list[synthesis.SyntheticPair]) -> list[SliceSample]:
    return [
        SliceSample(
            image=p.image.astype(np.float32),
            mask=p.mask.astype(np.uint8),
            patient_id=f"synth:{p.id}",
            slice_index=0,
            spacing_mm=(1.0, 1.0),
        )
        for p in pairs
    ]


def required_synthetic_count(synthetic: SyntheticConfig, n_base: int) -> int:
    if synthetic.count is not None:
        return int(synthetic.count)
    return int(round(synthetic.multiplier * n_base))


def assemble_training_set(
    base_samples: list[SliceSample],
    row: str,
    synthetic_cfg: SyntheticConfig,
    synthetic_pairs: list[synthesis.SyntheticPair] | None,
    include_synthetic: bool,
) -> list[SliceSample]:
    """Base slices plus, when the row calls for it, exactly the requested
    number of synthetic pairs."""
    out = list(base_samples)
    if not include_synthetic:
        return out
    n_required = required_synthetic_count(synthetic_cfg, len(base_samples))
    if synthetic_pairs is None or len(synthetic_pairs) < n_required:
        have = 0 if synthetic_pairs is None else len(synthetic_pairs)
        raise ValueError(f"need {n_required} synthetic pairs, have {have}")
    out.extend(synthetic_pairs_as_samples(synthetic_pairs[:n_required]))
    return out


# ---------------------------------------------------------------------------
# Experiment runs
# ---------------------------------------------------------------------------

@dataclass
class ResultRow:
    label: str
    dsc_pct: float
    msd_mm: float
    hd_mm: float
    vdsc_pct: float


@dataclass
class ResultsTable:
    rows: list[ResultRow]
    seed: int
    scale: str
    config_hash: str

    def metadata(self) -> dict:
        return {"seed": self.seed, "scale": self.scale, "config_hash": self.config_hash}


def _split_dataset(
    config: ExperimentConfig, prepared: PreparedDataset
) -> tuple[list[SliceSample], list[SliceSample], list[str]]:
    manifest = split_patients(
        sorted(prepared.samples_by_patient),
        config.split_ratios,
        seed=sub_seed(config.seed, "split"),
    )
    train = [s for pid in manifest.train for s in prepared.samples_by_patient[pid]]
    val = [s for pid in manifest.val for s in prepared.samples_by_patient[pid]]
    return train, val, manifest.test


def run_experiment(
    config: ExperimentConfig,
    out_dir: Path | str,
    synthetic_pairs: list[synthesis.SyntheticPair] | None = None,
) -> tuple[ResultRow, MetricsReport]:
    """One table row: assemble training data, train the segmenter, evaluate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared = prepare_dataset(config)
    train_samples, val_samples, test_ids = _split_dataset(config, prepared)

    include_synth = config.synthetic.enabled
    if include_synth and synthetic_pairs is None:
        if config.synthetic.pairs_manifest:
            synthetic_pairs = synthesis.load_pairs(config.synthetic.pairs_manifest)
        else:
            n_req = required_synthetic_count(config.synthetic, len(train_samples))
            assets = build_synthetic_assets(
                config, train_samples, out_dir / "assets", n_pairs=n_req
            )
            synthetic_pairs = synthesis.load_pairs(assets.pairs_manifest)

    training_set = assemble_training_set(
        train_samples, config.row, config.synthetic, synthetic_pairs, include_synth
    )

    model = unetseg.build_unet(config.unet, seed=sub_seed(config.seed, "seg-init"))
    model, history = unetseg.train_segmenter(
        model,
        training_set,
        val_samples,
        config.seg_train,
        seed=sub_seed(config.seed, "seg-train"),
        augment_spec=AugmentSpec.for_row(config.row),
    )
    (out_dir / "history.csv").write_text(history.to_csv())
    unetseg.save_checkpoint(out_dir / "segmenter.pt", model, config.seg_train, config.seed)

    predictions, ground_truths = [], []
    for pid in test_ids:
        gt = prepared.gt_volumes[pid]
        pred = np.stack(
            [unetseg.predict_mask(model, s.image) for s in prepared.samples_by_patient[pid]]
        )
        predictions.append(
            MaskVolume(voxels=pred, spacing_mm=gt.spacing_mm, patient_id=pid)
        )
        ground_truths.append(gt)

    report = evaluate(predictions, ground_truths, config.eval)
    dsc, msd, hd, vdsc = report.as_row()
    row = ResultRow(label=config.row, dsc_pct=dsc, msd_mm=msd, hd_mm=hd, vdsc_pct=vdsc)
    (out_dir / "metrics.json").write_text(report.to_json())
    return row, report


def _ensure_pairs(
    config: ExperimentConfig, out_dir: Path, n_pairs: int | None = None
) -> list[synthesis.SyntheticPair]:
    """Load synthetic pairs from the configured manifest or build them."""
    cfg = config.replace(
        row="Synthetic data",
        synthetic=dataclasses.replace(
            config.synthetic,
            enabled=True,
            **({"count": n_pairs, "multiplier": None} if n_pairs is not None else {}),
        ),
    )
    if cfg.synthetic.pairs_manifest:
        return synthesis.load_pairs(cfg.synthetic.pairs_manifest)
    prepared = prepare_dataset(cfg)
    train_samples, _, _ = _split_dataset(cfg, prepared)
    n_req = required_synthetic_count(cfg.synthetic, len(train_samples))
    assets = build_synthetic_assets(cfg, train_samples, out_dir / "assets", n_pairs=n_req)
    return synthesis.load_pairs(assets.pairs_manifest)


def run_table(
    config: ExperimentConfig,
    out_dir: Path | str,
    combine_with_synthetic: bool = False,
) -> ResultsTable:
    """All eight rows. Plain grid by default; with combine_with_synthetic every
    standard row additionally receives the synthetic pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # both grids contain the "Synthetic data" row, so assets are always needed
    synthetic_pairs = _ensure_pairs(config, out_dir)

    rows = []
    for label in TABLE_ROW_LABELS:
        use_synth = combine_with_synthetic or label == "Synthetic data"
        row_cfg = config.replace(
            row=label,
            synthetic=dataclasses.replace(config.synthetic, enabled=use_synth),
        )
        row, _ = run_experiment(
            row_cfg,
            out_dir / label.lower().replace(" ", "_"),
            synthetic_pairs=synthetic_pairs if use_synth else None,
        )
        rows.append(row)

    return ResultsTable(
        rows=rows, seed=config.seed, scale=config.scale, config_hash=config.config_hash()
    )


def sweep_synthetic_size(
    config: ExperimentConfig, counts: list[int], out_dir: Path | str
) -> list[tuple[int, float]]:
    """One run per synthetic-sample count, everything else fixed. The count-0
    run is exactly the Original row."""
    out_dir = Path(out_dir)
    results = []
    synthetic_pairs = None
    max_count = max(counts)
    if max_count > 0:
        synthetic_pairs = _ensure_pairs(config, out_dir, n_pairs=max_count)

    for count in counts:
        if count == 0:
            row_cfg = config.replace(
                row="Original",
                synthetic=dataclasses.replace(config.synthetic, enabled=False),
            )
            pairs = None
        else:
            row_cfg = config.replace(
                row="Synthetic data",
                synthetic=dataclasses.replace(
                    config.synthetic, enabled=True, count=count, multiplier=None
                ),
            )
            pairs = synthetic_pairs
        row, _ = run_experiment(row_cfg, out_dir / f"count_{count}", synthetic_pairs=pairs)
        results.append((count, row.dsc_pct))
    return results


# ---------------------------------------------------------------------------
# Table rendering
# ---------------------------------------------------------------------------

CSV_HEADER = "Transformation,DSC,MSD,HD,VDSC"


def emit_table(results: ResultsTable | list[ResultRow], fmt: str = "csv") -> str:
    """Byte-deterministic rendering, two decimals throughout."""
    rows = results.rows if isinstance(results, ResultsTable) else results
    if not rows:
        raise ValueError("no results to emit")
    if fmt == "csv":
        lines = [CSV_HEADER]
        for r in rows:
            lines.append(
                f"{r.label},{r.dsc_pct:.2f},{r.msd_mm:.2f},{r.hd_mm:.2f},{r.vdsc_pct:.2f}"
            )
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        lines = [
            "| Transformation | DSC (%) | MSD | HD | VDSC (%) |",
            "| --- | --- | --- | --- | --- |",
        ]
        for r in rows:
            lines.append(
                f"| {r.label} | {r.dsc_pct:.2f} | {r.msd_mm:.2f} | {r.hd_mm:.2f} "
                f"| {r.vdsc_pct:.2f} |"
            )
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def parse_table(csv_text: str) -> list[ResultRow]:
    lines = [ln for ln in csv_text.strip().splitlines() if ln]
    if lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected header {lines[0]!r}")
    rows = []
    for ln in lines[1:]:
        label, dsc, msd, hd, vdsc = ln.split(",")
        rows.append(
            ResultRow(
                label=label,
                dsc_pct=float(dsc),
                msd_mm=float(msd),
                hd_mm=float(hd),
                vdsc_pct=float(vdsc),
            )
        )
    return rows
