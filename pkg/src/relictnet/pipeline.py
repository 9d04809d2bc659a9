"""Artifact layout and the steps behind each CLI command."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import clustering
from .config import PipelineConfig, dataset_factor
from .datasets import (
    DatasetManifest,
    augment_positives,
    augmented_manifest,
    balance_classes,
    build_cluster_dataset,
    build_labeled_dataset,
    load_tileset,
    save_tileset,
    train_subset,
)
from .evaluation import (
    GridReport,
    compare_frameworks,
    confusion,
    predict_scene,
    render_outcome_map,
    run_grid,
)
from .models import EncoderSpec, ParameterStore
from .raster import (
    AreaSplit,
    MaskRaster,
    clip_regions,
    load_raster,
    make_tile_grid,
    rasterize_mask,
    read_polygons,
    save_raster,
    split_train_test,
    write_polygons,
)
from .synthetic import generate_scene
from .training import Combination, combinations, run_framework, run_pretrain, validate_combination

log = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact is absent; ``command`` names the step producing it."""

    def __init__(self, what: str, command: str):
        super().__init__(f"{what} is missing; run `{command}` first")
        self.command = command


class ConfigHashMismatch(RuntimeError):
    pass


def _write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = config.output_root
        self.hash = config.config_hash()

    # ------------------------------------------------------------ layout

    def scene_paths(self) -> list[Path]:
        cfg = self.config
        if cfg.paths.scenes:
            return [cfg.resolve(p) for p in cfg.paths.scenes]
        if cfg.synthetic is not None:
            return [self.root / "scenes" / f"scene_{i:03d}.tif" for i in range(cfg.synthetic.scene_count)]
        return [self.labeled_scene_path()]

    def labeled_scene_path(self) -> Path:
        if self.config.paths.labeled_scene:
            return self.config.resolve(self.config.paths.labeled_scene)
        return self.root / "scenes" / "scene_000.tif"

    def polygons_path(self) -> Path:
        if self.config.paths.polygons:
            return self.config.resolve(self.config.paths.polygons)
        return self.root / "scenes" / "scene_000_scars.geojson"

    @property
    def labeled_dir(self) -> Path:
        return self.root / "datasets" / "labeled"

    def ld_dir(self, name: str) -> Path:
        return self.root / "datasets" / name

    def cluster_dir(self, k: int) -> Path:
        return self.root / "datasets" / f"cluster_k{k}"

    def seed_root(self, seed: int) -> Path:
        return self.root / "checkpoints" / f"seed{seed}"

    def pretrain_dir(self, k: int, seed: int) -> Path:
        return self.seed_root(seed) / "pretrain" / f"k{k}"

    def final_checkpoint(self, directory: Path, epochs: int) -> Path:
        return directory / f"epoch_{epochs}.pt"

    def report_dir(self, combo: Combination, seed: int) -> Path:
        return self.root / "reports" / f"seed{seed}" / combo.relpath()

    # ------------------------------------------------------------ helpers

    @property
    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec.preset(self.config.encoder_preset, self.config.band_count)

    def _voids(self):
        p = self.config.paths.void_regions
        return read_polygons(self.config.resolve(p)) if p else []

    def _scene(self, path: Path, command: str = "synth"):
        if not path.exists():
            raise MissingArtifactError(f"scene {path}", command)
        raster = load_raster(path, expected_bands=self.config.band_count)
        voids = self._voids()
        return clip_regions(raster, voids) if voids else raster

    def _check_hash(self, meta: dict, what, force: bool) -> None:
        found = meta.get("config_hash")
        if found != self.hash and not force:
            raise ConfigHashMismatch(
                f"{what} was produced by config {found}, current config is {self.hash} (use --force)"
            )

    def _load_dataset(self, directory: Path, command: str):
        if not (directory / "manifest.json").exists():
            raise MissingArtifactError(f"dataset {directory}", command)
        return load_tileset(directory)

    def _save_dataset(self, tiles, directory: Path, manifest: DatasetManifest) -> Path:
        manifest.extra["config_hash"] = self.hash
        return save_tileset(tiles, directory, manifest)

    # ------------------------------------------------------------ steps

    def synth(self) -> dict:
        syn = self.config.synthetic
        if syn is None:
            raise ValueError("config has no synthetic block")
        out = []
        for i, path in enumerate(self.scene_paths()):
            spec = syn.scene
            spec = type(spec).from_dict({**spec.to_dict(), "seed": spec.seed + i})
            scene = generate_scene(spec)
            save_raster(scene.raster, path)
            stem = path.with_suffix("")
            write_polygons(scene.scar_polygons, f"{stem}_scars.geojson")
            write_polygons(scene.confounder_polygons, f"{stem}_confounders.geojson")
            save_raster(scene.mask.values[None], f"{stem}_mask.tif", spec.transform, spec.crs)
            save_raster(scene.confounder_mask.values[None], f"{stem}_confounders.tif",
                        spec.transform, spec.crs)
            out.append({"scene": path.name, "scars": len(scene.scar_polygons),
                        "confounders": len(scene.confounder_polygons)})
        _write_json(self.root / "scenes" / "synth.json", {"config_hash": self.hash, "scenes": out})
        return {"scenes": len(out)}

    def labeled_inputs(self):
        """Clipped labeled scene, its truth mask and the train/test split."""
        raster = self._scene(self.labeled_scene_path())
        poly_path = self.polygons_path()
        if not poly_path.exists():
            raise MissingArtifactError(f"landslide polygons {poly_path}", "synth")
        mask = rasterize_mask(read_polygons(poly_path), raster)
        mask = MaskRaster(np.where(raster.nodata_mask, 0, mask.values))
        return raster, mask

    def prepare_labeled(self) -> dict:
        cfg = self.config
        raster, mask = self.labeled_inputs()
        split = split_train_test(raster, mask, cfg.split_ratio)
        grid = make_tile_grid(raster, cfg.tile_size, cfg.pad_mode)
        tiles, manifest = build_labeled_dataset(grid, mask, split)
        manifest.source_scenes = [self.labeled_scene_path().name]
        self._save_dataset(tiles, self.labeled_dir, manifest)
        return {"tiles": len(tiles), "counts": manifest.class_counts, "split": split.to_dict()}

    def load_split(self) -> AreaSplit:
        _, manifest = self._load_dataset(self.labeled_dir, "prepare-labeled")
        return AreaSplit.from_dict(manifest.extra["split"])

    def _pooled_pixels(self, rasters) -> np.ndarray:
        cap = self.config.kmeans.sample_size
        rng = np.random.default_rng(self.config.seeds.kmeans)
        valid_counts = [int(r.valid.sum()) for r in rasters]
        total = sum(valid_counts)
        parts = []
        for r, n in zip(rasters, valid_counts):
            px = r.pixels[:, r.valid].T
            if cap is not None and total > cap:
                take = int(round(cap * n / total))
                px = px[np.sort(rng.choice(n, min(take, n), replace=False))]
            parts.append(px)
        return np.concatenate(parts).astype(np.float64)

    def prepare_cluster(self, k_values=None) -> dict:
        cfg = self.config
        rasters = [self._scene(p) for p in self.scene_paths()]
        grids = [make_tile_grid(r, cfg.tile_size, cfg.pad_mode) for r in rasters]
        pooled = self._pooled_pixels(rasters)
        summary = {}
        for k in k_values or cfg.k_values:
            model = clustering.fit_kmeans(
                pooled, k, seed=cfg.seeds.kmeans, max_iter=cfg.kmeans.max_iter,
                tol=cfg.kmeans.tol, standardize=cfg.kmeans.standardize, sample_size=None,
            )
            tiles, manifest = build_cluster_dataset(grids, model)
            raw = manifest.class_counts
            balanced = balance_classes(tiles, cfg.seeds.data)
            manifest.class_counts = {str(c): n for c, n in balanced.class_counts(k).items()}
            manifest.total = len(balanced)
            manifest.source_scenes = [p.name for p in self.scene_paths()]
            manifest.seeds = {"kmeans": cfg.seeds.kmeans, "balance": cfg.seeds.data}
            manifest.extra["unbalanced_class_counts"] = raw
            self._save_dataset(balanced, self.cluster_dir(k), manifest)
            model.save(self.cluster_dir(k) / "kmeans.json")
            summary[str(k)] = manifest.class_counts
        return {"cluster_datasets": summary}

    def augment(self, names=None) -> dict:
        tiles, base = self._load_dataset(self.labeled_dir, "prepare-labeled")
        out = {}
        for name in names or self.config.dataset_names:
            factor = dataset_factor(name)
            aug = train_subset(augment_positives(tiles, factor, self.config.seeds.augment))
            manifest = augmented_manifest(base, aug, factor, self.config.seeds.augment)
            self._save_dataset(aug, self.ld_dir(name), manifest)
            out[name] = manifest.class_counts["train"]
        return {"augmented": out}

    def pretrain(self, k: int, seed: int) -> ParameterStore:
        cfg = self.config
        tiles, _ = self._load_dataset(self.cluster_dir(k), "prepare-cluster")
        tc = type(cfg.pretrain)(**{**cfg.pretrain.to_dict(), "seed": seed})
        d = self.pretrain_dir(k, seed)
        store, record = run_pretrain(k, self.encoder_spec, tiles, tc, d,
                                     {"config_hash": self.hash, "seed": seed})
        record.save(d / "record.json")
        return store

    def load_pretrained(self, k: int, seed: int, force: bool = False) -> ParameterStore:
        path = self.final_checkpoint(self.pretrain_dir(k, seed), self.config.pretrain.epochs)
        if not path.exists():
            raise MissingArtifactError(f"pre-trained encoder {path}", "pretrain")
        store = ParameterStore.load(path)
        self._check_hash(store.meta, path, force)
        return store

    def train(self, combo: Combination, seed: int, force: bool = False) -> ParameterStore:
        cfg = self.config
        validate_combination(combo.framework, combo.arch, combo.k, combo.dataset, cfg.allow_any_k)
        tiles, _ = self._load_dataset(self.ld_dir(combo.dataset), "augment")
        pretrained = self.load_pretrained(combo.k, seed, force) if combo.framework == "proposed" else None
        tc = type(cfg.finetune)(**{**cfg.finetune.to_dict(), "seed": seed})
        return run_framework(
            combo,
            encoder_spec=self.encoder_spec,
            finetune_config=tc,
            train_tiles=tiles,
            pretrained=pretrained,
            checkpoint_root=self.seed_root(seed),
            meta={"config_hash": self.hash, "seed": seed},
        )

    def checkpoint_path(self, combo: Combination, seed: int) -> Path:
        return self.final_checkpoint(self.seed_root(seed) / combo.relpath(), self.config.finetune.epochs)

    def load_checkpoint(self, combo: Combination, seed: int, force: bool = False) -> ParameterStore:
        path = self.checkpoint_path(combo, seed)
        if not path.exists():
            raise MissingArtifactError(f"checkpoint {path}", "train")
        store = ParameterStore.load(path)
        self._check_hash(store.meta, path, force)
        return store

    def predict(self, combo: Combination, seed: int, force: bool = False) -> dict:
        store = self.load_checkpoint(combo, seed, force)
        raster = self._scene(self.labeled_scene_path())
        pred = predict_scene(store, raster, self.config.threshold, self.config.tile_size, self.config.pad_mode)
        d = self.root / "predictions" / f"seed{seed}" / combo.relpath()
        save_raster(pred.probabilities[None], d / "probability.tif", raster.transform, raster.crs)
        save_raster(pred.binary[None], d / "binary.tif", raster.transform, raster.crs)
        _write_json(d / "prediction.json", {"config_hash": self.hash, "threshold": pred.threshold,
                                            "combination": combo.to_dict(),
                                            "positive_pixels": int(pred.binary.sum())})
        return {"positive_pixels": int(pred.binary.sum())}

    def evaluation_inputs(self):
        raster, mask = self.labeled_inputs()
        split = self.load_split()
        return raster, mask, split.test_mask() & raster.valid

    def _write_eval(self, combo, seed, rep) -> None:
        d = self.report_dir(combo, seed)
        _write_json(d / "eval.json", dict(rep.to_dict(), config_hash=self.hash, seed=seed))
        render_outcome_map(rep, d / "outcome.tif")

    def evaluate(self, combo: Combination, seed: int, force: bool = False) -> dict:
        store = self.load_checkpoint(combo, seed, force)
        raster, mask, valid = self.evaluation_inputs()
        pred = predict_scene(store, raster, self.config.threshold, self.config.tile_size, self.config.pad_mode)
        rep = confusion(pred, mask, valid, combo.to_dict())
        self._write_eval(combo, seed, rep)
        return {k: rep.to_dict()[k] for k in ("TP", "FP", "FN", "precision", "recall")}

    # ------------------------------------------------------------ grid

    def grid_combinations(self, frameworks=None, archs=None, k_values=None, datasets=None):
        cfg = self.config
        return combinations(frameworks or cfg.frameworks, archs or cfg.architectures,
                            k_values or cfg.k_values, datasets or cfg.dataset_names)

    def _fresh(self, path: Path) -> bool:
        if not path.exists():
            return False
        try:
            return ParameterStore.load(path).meta.get("config_hash") == self.hash
        except Exception:
            return False

    def grid(self, combos, seeds=None) -> dict:
        cfg = self.config
        seeds = list(seeds if seeds is not None else cfg.grid_seeds)
        self._ensure_datasets(combos)
        raster, mask, valid = self.evaluation_inputs()
        reports = {}
        for seed in seeds:
            ks = sorted({c.k for c in combos if c.framework == "proposed"})
            todo_pre = [k for k in ks if not self._fresh(self.final_checkpoint(self.pretrain_dir(k, seed), cfg.pretrain.epochs))]
            self._map(_pretrain_job, [(cfg, k, seed) for k in todo_pre])
            todo = [c for c in combos if not self._fresh(self.checkpoint_path(c, seed))]
            self._map(_train_job, [(cfg, c, seed) for c in todo])

            def on_report(combo, pred, rep, seed=seed):
                self._write_eval(combo, seed, rep)

            report = run_grid(combos, raster, mask, valid,
                              lambda c, seed=seed: self.load_checkpoint(c, seed),
                              cfg.threshold, cfg.tile_size, cfg.pad_mode, on_report)
            report.write_csv(self.root / "reports" / f"grid_seed{seed}.csv")
            reports[seed] = report
        summary = compare_frameworks(reports)
        summary["config_hash"] = self.hash
        _write_json(self.root / "reports" / "grid_comparison.json", summary)
        first = reports[seeds[0]]
        return {"rows": len(first), "seeds": seeds, "totals": first.totals(),
                "failed": sum(r.totals()["failed"] for r in reports.values())}

    def _ensure_datasets(self, combos) -> None:
        if not (self.labeled_dir / "manifest.json").exists():
            self.prepare_labeled()
        names = sorted({c.dataset for c in combos})
        missing = [n for n in names if not (self.ld_dir(n) / "manifest.json").exists()]
        if missing:
            self.augment(missing)
        ks = sorted({c.k for c in combos if c.framework == "proposed"})
        missing_k = [k for k in ks if not (self.cluster_dir(k) / "manifest.json").exists()]
        if missing_k:
            self.prepare_cluster(missing_k)

    def _map(self, fn, jobs) -> None:
        if not jobs:
            return
        if self.config.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.config.workers) as pool:
                list(pool.map(fn, jobs))
        else:
            for job in jobs:
                fn(job)


def _pretrain_job(args):
    cfg, k, seed = args
    Pipeline(cfg).pretrain(k, seed)


def _train_job(args):
    cfg, combo, seed = args
    Pipeline(cfg).train(combo, seed)


def read_grid(path) -> GridReport:
    return GridReport.read_csv(path)
