#!/usr/bin/env python3
"""
FlexiCT command-line interface.

One click group, one subcommand per pipeline stage. Every command writes a
run manifest (JSON + TXT + SHA-256) next to its outputs.

Exit codes:
  0  success
  1  runtime failure; a one-line JSON object {"error", "message"} on stderr
  2  usage error (unknown flag, missing input file)
"""

from dataclasses import dataclass, replace
import functools
import json
import logging
import math
from pathlib import Path
import sys
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd
import torch

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src import __version__
from src.core.container import ContainerKind, TensorContainer
from src.core.errors import FlexiCTError, ValidationError
from src.core.format import CompressionType
from src.downstream.classification import ClassifierConfig, FeatureSet, linear_classify
from src.downstream.decoder import DecoderConfig, DecoderVariant, SegmentationModel
from src.downstream.features import FeatureCache, cache_for
from src.downstream.probing import PhenotypeConfig, ProbeConfig, lda_phenotype, linear_probe
from src.downstream.retrieval import evaluate_rankings, retrieve as retrieve_rankings
from src.downstream.segmentation import (SegCase, SegTrainConfig, evaluate_segmentation, load_seg_model,
                                         save_seg_model, segment, train_seg)
from src.downstream.zero_shot import load_class_names, select_thresholds, zero_shot_classify
from src.evaluation.metrics import POOL_KS, POOL_SIZES, RECALL_KS, auc, finite_mean, pooled_recall
from src.evaluation.stats import (MAX_EXACT_PAIRS, N_RESAMPLES, MetricSample, bca_bootstrap,
                                  exact_permutation_test, holm_bonferroni, paired_permutation_test)
from src.models.vlm import VisionLanguageModel
from src.registration.convex import ConvexAdamParams
from src.registration.features import Modality
from src.registration.pca import PCAReducer
from src.registration.pipeline import label_overlap, register_pair
from src.registration.warp import warp
from src.text.captions import sample_caption_with_source, structured_text
from src.text.reports import StructuredReport, load_reports, save_report
from src.text.synthetic import report_for_spec
from src.train.checkpoint import CheckpointBundle, build_backbone_from_checkpoint, restore_models
from src.train.config import PHASES, PhaseConfig
from src.train.trainer import TrainResult, run_highres, run_phase1, run_phase2, run_phase3
from src.train.transfer import transfer_2d_to_3d
from src.utils.config import dump_config, load_config
from src.utils.manifest import RunRecorder
from src.volume.grid import VolumeGrid
from src.volume.io import list_volumes, load_volume, read_ctv_array, save_volume, write_ctv_array
from src.volume.phantom import PhantomSpec, gen_phantom, phantom_labels
from src.volume.preprocess import PrepMode, extract_slices, normalize_array, prep_volume
from src.volume.qc import QCReason, QCReport, Verdict

logger = logging.getLogger("flexict.cli")

CHECKPOINT_NAME = "checkpoint.fxc"
DEFAULT_PRESETS = {"1": "toy_phase1", "1hr": "toy_phase1hr", "2": "toy_phase2", "3": "toy_phase3"}
COMPRESSION_CHOICES = [c.name.lower() for c in CompressionType]


@dataclass
class CliState:
    verbose: bool = False
    seed: Optional[int] = None
    compression: CompressionType = CompressionType.NONE

    def seed_or(self, default: int) -> int:
        return default if self.seed is None else self.seed


# ============================================================================
# CLI GROUP AND HELPER FUNCTIONS
# ============================================================================

@click.group()
@click.version_option(version=__version__, prog_name='flexict')
@click.option('-v', '--verbose', is_flag=True, help='Log progress at INFO level')
@click.option('--seed', type=int, default=None, help='Override the seed of every config')
@click.option('--compression', type=click.Choice(COMPRESSION_CHOICES), default='none',
              help='Blob compression for container outputs')
@click.pass_context
def cli(ctx, verbose, seed, compression):
    """FlexiCT - dimension-flexible CT representation learning at desk scale."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctx.obj = CliState(verbose, seed, CompressionType[compression.upper()])


def print_ok(message: str):
    """Print success message."""
    click.echo(click.style(f"[OK] {message}", fg='green'))


def print_info(message: str):
    """Print info message."""
    click.echo(click.style(f"[INFO] {message}", fg='blue'))


def print_error(error: BaseException):
    """One-line JSON error object on stderr."""
    payload = {"error": type(error).__name__, "message": str(error)}
    click.echo(json.dumps(payload, ensure_ascii=False), err=True)


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    return value


def write_json(path: Path, obj: Any) -> Path:
    """UTF-8 JSON with sorted keys; non-finite floats become null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path


def manifested(name: str) -> Callable:
    """Run a command body with a RunRecorder and map failures to exit code 1.

    The body receives ``(state, recorder, **options)`` and returns the
    directory the manifest goes to.
    """
    def decorate(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def wrapper(**kwargs):
            ctx = click.get_current_context()
            state = ctx.find_object(CliState) or CliState()
            recorder = RunRecorder(name, seed=state.seed)
            try:
                out_dir = fn(state, recorder, **kwargs)
            except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
                raise
            except Exception as e:
                logger.debug("Command %s failed", name, exc_info=True)
                print_error(e)
                ctx.exit(1)
            recorder.finish(out_dir)
        return wrapper
    return decorate


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _volume_paths(path: str) -> List[Path]:
    p = Path(path)
    paths = list_volumes(p) if p.is_dir() else [p]
    if not paths:
        raise ValidationError(f"No volumes found in {p}")
    return paths


def _load_volumes(path: str, recorder: RunRecorder) -> List[VolumeGrid]:
    volumes = []
    for p in _volume_paths(path):
        recorder.add_input(p)
        volumes.append(load_volume(p))
    return volumes


def _load_labels(directory: str, volume_id: str, recorder: RunRecorder) -> np.ndarray:
    path = Path(directory) / f"{volume_id}.ctv"
    if not path.exists():
        raise ValidationError(f"No label map {path} for volume {volume_id}")
    recorder.add_input(path)
    labels, _ = read_ctv_array(path)
    return np.rint(labels).astype(np.int64)


def _load_checkpoint(path: str, recorder: RunRecorder) -> CheckpointBundle:
    recorder.add_input(path)
    return CheckpointBundle.load(path)


def _label_table(path: str, recorder: RunRecorder) -> pd.DataFrame:
    recorder.add_input(path)
    frame = pd.read_csv(path, dtype={"case_id": str})
    if "case_id" not in frame.columns:
        raise ValidationError(f"{path} lacks a case_id column")
    return frame


def _vlm_from_checkpoint(bundle: CheckpointBundle) -> VisionLanguageModel:
    restored = restore_models(bundle)
    if restored.vlm_heads is None or restored.text_encoder is None:
        raise ValidationError("Checkpoint has no vision-language towers; run Phase 3 first")
    return VisionLanguageModel(restored.backbone, restored.text_encoder, restored.vlm_heads).eval()


@torch.no_grad()
def _embed_volumes(vlm: VisionLanguageModel, volumes: List[VolumeGrid],
                   runtime_patch: Optional[int]) -> np.ndarray:
    rows = []
    for vol in volumes:
        x = torch.from_numpy(normalize_array(vol.voxels)[None, None])
        rows.append(vlm.embed_volume(x, runtime_patch=runtime_patch)[0].double().numpy())
    return np.stack(rows)


# ============================================================================
# VOLUME PREPARATION
# ============================================================================

@cli.command()
@click.argument('inputs', nargs=-1, required=True, type=click.Path(exists=True))
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--mode', type=click.Choice([m.value for m in PrepMode]), default=PrepMode.VOLUME3D.value,
              help='volume3d: isotropic volumes; slice2d: body-cropped axial slices')
@manifested("prep")
def prep(state, recorder, inputs, out, mode):
    """QC-screen and canonicalize CT volumes."""
    out_dir = _out_dir(out)
    mode = PrepMode(mode)
    reports = {}
    for item in inputs:
        for path in _volume_paths(item):
            recorder.add_input(path)
            try:
                vol = load_volume(path)
            except FlexiCTError as e:
                reports[path.name] = QCReport(Verdict.REJECT, [QCReason("load_error", float("nan"), float("nan"))]).to_dict()
                logger.warning("Rejected %s: %s", path, e)
                continue
            report, canonical = prep_volume(vol, mode)
            reports[vol.volume_id or path.name] = report.to_dict()
            if canonical is None:
                logger.warning("Rejected %s: %s", path, ", ".join(report.rules))
                continue
            if mode is PrepMode.VOLUME3D:
                target = save_volume(out_dir / f"{canonical.volume_id}.ctv", canonical)
            else:
                slices = extract_slices(canonical)
                container = TensorContainer(
                    ContainerKind.SLICES,
                    tensors={f"slice_{s.slice_index:05d}": s.pixels for s in slices},
                    meta={"volume_id": canonical.volume_id, "spacing_mm": list(canonical.spacing_mm),
                          "crop_boxes": {str(s.slice_index): list(s.crop_box) for s in slices}})
                target = container.save(out_dir / f"{canonical.volume_id}.slices.fxc", state.compression)
            recorder.add_output(target)
    qc_path = write_json(out_dir / "qc_report.json", reports)
    recorder.add_output(qc_path)
    accepted = sum(r["verdict"] == Verdict.ACCEPT.value for r in reports.values())
    recorder.add_summary(accepted=accepted, rejected=len(reports) - accepted)
    print_ok(f"Prepared {accepted}/{len(reports)} volumes into {out_dir}")
    return out_dir


@cli.command()
@click.option('--spec', 'spec_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Phantom spec (TOML)')
@click.option('-o', '--out', required=True, type=click.Path(dir_okay=False), help='Output .ctv volume')
@click.option('--labels', type=click.Path(dir_okay=False), default=None, help='Also write the label map (.ctv)')
@click.option('--report', type=click.Path(dir_okay=False), default=None,
              help='Also write a matching synthetic report (.json)')
@manifested("phantom")
def phantom(state, recorder, spec_path, out, labels, report):
    """Rasterize a synthetic phantom from a spec."""
    recorder.add_input(spec_path)
    spec = load_config(spec_path, PhantomSpec)
    if state.seed is not None:
        spec = replace(spec, seed=state.seed)
    recorder.seed, recorder.config = spec.seed, spec
    vol = gen_phantom(spec)
    recorder.add_output(save_volume(out, vol))
    if labels:
        recorder.add_output(write_ctv_array(labels, phantom_labels(spec).astype(np.float32),
                                            {"kind": "labels", "volume_id": vol.volume_id}))
    if report:
        rep = report_for_spec(spec, vol.volume_id, np.random.default_rng(spec.seed))
        recorder.add_output(save_report(report, rep))
    print_ok(f"Phantom {vol.volume_id} {vol.shape} written to {out}")
    return Path(out).parent


# ============================================================================
# REPORT TEXT
# ============================================================================

@cli.command()
@click.option('--reports', 'reports_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(dir_okay=False), help='Output captions (.json)')
@click.option('--draws', type=click.IntRange(min=1), default=1, help='Captions sampled per report')
@manifested("captions")
def captions(state, recorder, reports_dir, out, draws):
    """Sample training captions from structured reports."""
    recorder.add_input(reports_dir)
    seed = state.seed_or(0)
    recorder.seed = seed
    rng = np.random.default_rng(seed)
    rows = []
    for rep in load_reports(reports_dir):
        for draw in range(draws):
            sample = sample_caption_with_source(rep, rng)
            rows.append({"report_id": rep.report_id, "draw": draw, "source": sample.source.value,
                         "shuffled": sample.shuffled, "caption": sample.text})
    recorder.add_output(write_json(Path(out), rows))
    print_ok(f"{len(rows)} captions written to {out}")
    return Path(out).parent


# ============================================================================
# PRETRAINING
# ============================================================================

def _slice_corpus(data_dir: str, recorder: RunRecorder) -> List[np.ndarray]:
    """Axial slices of every volume plus every prepared slice stack in ``data_dir``."""
    corpus: List[np.ndarray] = []
    for p in list_volumes(data_dir):
        recorder.add_input(p)
        corpus.extend(np.asarray(s) for s in load_volume(p).voxels)
    for p in sorted(Path(data_dir).glob("*.slices.fxc")):
        recorder.add_input(p)
        container = TensorContainer.load(p, ContainerKind.SLICES)
        corpus.extend(container.tensors[k] for k in sorted(container.tensors))
    if not corpus:
        raise ValidationError(f"No slices or volumes found in {data_dir}")
    return corpus


def _paired_corpus(volumes: List[VolumeGrid], reports_dir: str,
                   recorder: RunRecorder) -> List[Tuple[VolumeGrid, StructuredReport]]:
    recorder.add_input(reports_dir)
    by_id = {r.report_id: r for r in load_reports(reports_dir)}
    missing = [v.volume_id for v in volumes if v.volume_id not in by_id]
    if missing:
        raise ValidationError(f"No report for volumes {missing[:5]}")
    return [(v, by_id[v.volume_id]) for v in volumes]


@cli.command()
@click.option('--phase', required=True, type=click.Choice(PHASES), help='Training stage')
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='PhaseConfig TOML (replaces the preset)')
@click.option('--preset', default=None, help='PhaseConfig preset name (default: toy preset of the phase)')
@click.option('--init', 'init_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Checkpoint to continue from (required after phase 1)')
@click.option('--reports', 'reports_dir', type=click.Path(exists=True, file_okay=False), default=None,
              help='Structured reports keyed by volume id (phase 3)')
@manifested("pretrain")
def pretrain(state, recorder, phase, data_dir, out, config_path, preset, init_path, reports_dir):
    """Run one pretraining stage and export the EMA teacher."""
    if phase != "1" and init_path is None:
        raise click.UsageError(f"--init is required for phase {phase}")
    if phase == "3" and reports_dir is None:
        raise click.UsageError("--reports is required for phase 3")
    if config_path:
        recorder.add_input(config_path)
        cfg = load_config(config_path, PhaseConfig)
    else:
        cfg = PhaseConfig.preset(preset or DEFAULT_PRESETS[phase])
    if state.seed is not None:
        cfg = replace(cfg, seed=state.seed)
    cfg.validate()
    recorder.seed, recorder.config = cfg.seed, cfg
    init = _load_checkpoint(init_path, recorder) if init_path else None
    if state.verbose:
        print_info(f"Phase {phase} with config {cfg.name!r}: {cfg.iterations} iterations, seed {cfg.seed}")

    if phase in ("1", "1hr"):
        corpus = _slice_corpus(data_dir, recorder)
        result: TrainResult = (run_phase1(corpus, cfg, init=init) if phase == "1"
                               else run_highres(init, corpus, cfg))
    else:
        volumes = _load_volumes(data_dir, recorder)
        if phase == "2":
            result = run_phase2(init, volumes, cfg)
        else:
            result = run_phase3(init, _paired_corpus(volumes, reports_dir, recorder), cfg)

    out_dir = _out_dir(out)
    recorder.add_output(result.bundle.save(out_dir / CHECKPOINT_NAME, state.compression))
    recorder.add_output(write_json(out_dir / "history.json", result.history))
    recorder.add_output(dump_config(cfg, out_dir / "config.toml"))
    if result.history:
        recorder.add_summary(final_loss=result.history[-1].get("total"))
    print_ok(f"Phase {phase} finished after {len(result.history)} steps: {out_dir / CHECKPOINT_NAME}")
    return out_dir


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(dir_okay=False), help='Output 3D checkpoint')
@manifested("transfer")
def transfer(state, recorder, checkpoint, out):
    """Inflate a 2D checkpoint into a 3D one."""
    bundle = transfer_2d_to_3d(_load_checkpoint(checkpoint, recorder))
    recorder.add_output(bundle.save(out, state.compression))
    print_ok(f"3D checkpoint written to {out}")
    return Path(out).parent


# ============================================================================
# DOWNSTREAM
# ============================================================================

@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True))
@click.option('-o', '--out', required=True, type=click.Path(dir_okay=False), help='Feature cache (.fxc)')
@click.option('--runtime-patch', type=int, default=None)
@click.option('--slicewise', is_flag=True, help='Encode every axial slice through the 2D path')
@click.option('--workers', type=click.IntRange(min=1), default=4)
@manifested("embed")
def embed(state, recorder, checkpoint, data_dir, out, runtime_patch, slicewise, workers):
    """Cache frozen-backbone features for every volume."""
    backbone = build_backbone_from_checkpoint(_load_checkpoint(checkpoint, recorder))
    samples = {v.volume_id: normalize_array(v.voxels) for v in _load_volumes(data_dir, recorder)}
    cache = cache_for(backbone, samples, runtime_patch, slicewise, path=None, max_workers=workers)
    recorder.add_output(cache.save(out, state.compression))
    recorder.add_summary(n_samples=len(cache))
    print_ok(f"Features for {len(cache)} volumes written to {out}")
    return Path(out).parent


def _seg_cases(volumes: List[VolumeGrid], labels_dir: str, variant: DecoderVariant,
               recorder: RunRecorder) -> List[SegCase]:
    cases = []
    for vol in volumes:
        labels = _load_labels(labels_dir, vol.volume_id, recorder)
        image = normalize_array(vol.voxels)
        if variant is DecoderVariant.MULTISCALE2D:
            cases.extend(SegCase(image[i], labels[i]) for i in range(image.shape[0]))
        else:
            cases.append(SegCase(image, labels))
    return cases


@cli.command('seg-train')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--images', required=True, type=click.Path(exists=True))
@click.option('--labels', 'labels_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='SegTrainConfig TOML')
@click.option('--variant', type=click.Choice([v.value for v in DecoderVariant]),
              default=DecoderVariant.MULTISCALE2D.value)
@click.option('--patch-size', type=int, default=16)
@click.option('--freeze-backbone', is_flag=True)
@manifested("seg-train")
def seg_train(state, recorder, checkpoint, images, labels_dir, out, config_path, variant, patch_size,
              freeze_backbone):
    """Fine-tune a PatchDecode segmentation model."""
    variant = DecoderVariant(variant)
    cfg = SegTrainConfig()
    if config_path:
        recorder.add_input(config_path)
        cfg = load_config(config_path, SegTrainConfig)
    if state.seed is not None:
        cfg = replace(cfg, seed=state.seed)
    recorder.seed, recorder.config = cfg.seed, cfg
    backbone = build_backbone_from_checkpoint(_load_checkpoint(checkpoint, recorder))
    cases = _seg_cases(_load_volumes(images, recorder), labels_dir, variant, recorder)
    n_classes = max(2, int(max(c.labels.max() for c in cases)) + 1)
    dcfg = DecoderConfig(tuple(backbone.cfg.default_source_blocks()), patch_size, variant, n_classes)
    dcfg.validate()
    torch.manual_seed(cfg.seed)
    model = SegmentationModel(backbone, dcfg, finetune_backbone=not freeze_backbone)
    result = train_seg(model, cases, cfg)

    out_dir = _out_dir(out)
    recorder.add_output(save_seg_model(result.model, out_dir / "seg_model.fxc", state.compression))
    recorder.add_output(write_json(out_dir / "history.json", result.history))
    print_ok(f"Segmentation model ({n_classes} classes) written to {out_dir / 'seg_model.fxc'}")
    return out_dir


@cli.command('seg-eval')
@click.option('--model', 'model_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--images', required=True, type=click.Path(exists=True))
@click.option('--labels', 'labels_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@manifested("seg-eval")
def seg_eval(state, recorder, model_path, images, labels_dir, out):
    """Dice, surface Dice and HD95 of a segmentation model, per case and label."""
    recorder.add_input(model_path)
    model = load_seg_model(model_path)
    per_case: Dict[str, Dict[int, Dict[str, float]]] = {}
    rows = []
    for vol in _load_volumes(images, recorder):
        truth = _load_labels(labels_dir, vol.volume_id, recorder)
        if model.cfg.ndim == 2:
            pred = np.stack([segment(model, s) for s in vol.voxels])
        else:
            pred = segment(model, vol.voxels)
        labels = list(range(1, model.cfg.n_classes))
        metrics = evaluate_segmentation(pred, truth, vol.spacing_mm, labels)
        per_case[vol.volume_id] = metrics
        rows.extend({"case_id": vol.volume_id, "label": lab, **m} for lab, m in metrics.items())

    out_dir = _out_dir(out)
    frame = pd.DataFrame(rows, columns=["case_id", "label", "dice", "sdc", "hd95"])
    frame.to_csv(out_dir / "seg_metrics.csv", index=False)
    summary = {}
    for lab, group in frame.groupby("label"):
        hd, n_inf = finite_mean(group["hd95"])
        summary[int(lab)] = {"dice": float(group["dice"].mean()), "sdc": float(group["sdc"].mean()),
                             "hd95": hd, "hd95_infinite": n_inf}
    recorder.add_output(out_dir / "seg_metrics.csv")
    recorder.add_output(write_json(out_dir / "seg_metrics.json", {"cases": per_case, "summary": summary}))
    print_ok(f"Evaluated {len(per_case)} cases into {out_dir}")
    return out_dir


def _features_for(cache: FeatureCache, ids: List[str]) -> FeatureSet:
    feats = cache.stack(ids)
    shapes = {f.shape for f in feats}
    # uniform single-vector features become one (N, D) matrix
    if len(shapes) == 1 and feats[0].ndim == 1:
        return np.stack(feats)
    return feats


@cli.command()
@click.option('--features', 'features_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--labels', 'labels_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='CSV with case_id,label')
@click.option('--test-labels', 'test_labels_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='ClassifierConfig TOML')
@click.option('--probe', is_flag=True, help='Also run the cross-validated linear probe')
@click.option('--covariate', default=None,
              help='Column of the label CSV used as nuisance covariate for the LDA phenotype analysis')
@manifested("classify")
def classify(state, recorder, features_path, labels_path, test_labels_path, out, config_path, probe, covariate):
    """Train a linear head on cached features."""
    cfg = ClassifierConfig()
    if config_path:
        recorder.add_input(config_path)
        cfg = load_config(config_path, ClassifierConfig)
    if state.seed is not None:
        cfg = replace(cfg, seed=state.seed)
    recorder.seed, recorder.config = cfg.seed, cfg
    recorder.add_input(features_path)
    cache = FeatureCache.load(features_path)
    train = _label_table(labels_path, recorder)
    if covariate is not None and covariate not in train.columns:
        raise ValidationError(f"{labels_path} lacks a {covariate!r} column")
    test_x = test_y = None
    if test_labels_path:
        test = _label_table(test_labels_path, recorder)
        test_x, test_y = _features_for(cache, list(test["case_id"])), test["label"].to_numpy(dtype=np.int64)
    train_x, train_y = _features_for(cache, list(train["case_id"])), train["label"].to_numpy(dtype=np.int64)
    result = linear_classify(train_x, train_y, cfg, test_x, test_y)
    out_dir = _out_dir(out)
    recorder.add_output(write_json(out_dir / "classification.json",
                                   {"metrics": result.metrics, "history": result.history}))
    recorder.add_summary(auc=result.metrics.get("auc"))

    if probe or covariate is not None:
        if not isinstance(train_x, np.ndarray):
            raise ValidationError("Probing needs one feature vector per case")
        if probe:
            probe_result = linear_probe(train_x, train_y, ProbeConfig(seed=cfg.seed))
            recorder.add_output(write_json(out_dir / "probe.json", probe_result.to_dict()))
            recorder.add_summary(probe_macro_auc=probe_result.metrics["macro_auc"].mean)
        if covariate is not None:
            phenotype = lda_phenotype(train_x, train_y, train[covariate].to_numpy(dtype=float),
                                      PhenotypeConfig(seed=cfg.seed))
            recorder.add_output(write_json(out_dir / "phenotype.json", phenotype.to_dict()))
            recorder.add_summary(residual_label_rho=phenotype.residual_label_rho)

    print_ok(f"AUC {result.metrics.get('auc'):.4f}; report in {out_dir}")
    return out_dir


@cli.command('zero-shot')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True))
@click.option('--classes', 'classes_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='One class name per line')
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--labels', 'labels_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='CSV with case_id and one 0/1 column per class')
@click.option('--runtime-patch', type=int, default=None)
@manifested("zero-shot")
def zero_shot(state, recorder, checkpoint, data_dir, classes_path, out, labels_path, runtime_patch):
    """Prompt-pair zero-shot classification with a Phase-3 checkpoint."""
    vlm = _vlm_from_checkpoint(_load_checkpoint(checkpoint, recorder))
    recorder.add_input(classes_path)
    names = load_class_names(classes_path)
    volumes = _load_volumes(data_dir, recorder)
    embs = _embed_volumes(vlm, volumes, runtime_patch)
    max_len = vlm.text_encoder.cfg.max_len_inference
    tau = float(vlm.heads.temperature)
    probs = zero_shot_classify(embs, names, lambda texts: vlm.embed_text(texts, max_len=max_len), tau)

    out_dir = _out_dir(out)
    ids = [v.volume_id for v in volumes]
    frame = pd.DataFrame(probs, columns=names)
    frame.insert(0, "case_id", ids)
    frame.to_csv(out_dir / "probabilities.csv", index=False)
    recorder.add_output(out_dir / "probabilities.csv")
    report: Dict[str, Any] = {"classes": names, "temperature": tau}
    if labels_path:
        table = _label_table(labels_path, recorder).set_index("case_id").loc[ids]
        truth = table[names].to_numpy(dtype=np.int64)
        report["auc"] = {n: auc(probs[:, c], truth[:, c]) for c, n in enumerate(names)}
        report["thresholds"] = {n: vars(t) for n, t in zip(names, select_thresholds(probs, truth))}
    recorder.add_output(write_json(out_dir / "zero_shot.json", report))
    print_ok(f"Zero-shot probabilities for {len(ids)} volumes x {len(names)} classes in {out_dir}")
    return out_dir


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True))
@click.option('--reports', 'reports_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--pool', 'pools', type=click.IntRange(min=1), multiple=True, help='Pool size (repeatable)')
@click.option('--k', 'ks', type=click.IntRange(min=1), multiple=True, help='Recall cut-off (repeatable)')
@click.option('--labels', 'labels_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='CSV with case_id,label for image-to-image retrieval')
@click.option('--runtime-patch', type=int, default=None)
@manifested("retrieve")
def retrieve(state, recorder, checkpoint, data_dir, reports_dir, out, pools, ks, labels_path, runtime_patch):
    """Pooled image-report retrieval recall, optionally label-based image retrieval."""
    vlm = _vlm_from_checkpoint(_load_checkpoint(checkpoint, recorder))
    volumes = _load_volumes(data_dir, recorder)
    pairs = _paired_corpus(volumes, reports_dir, recorder)
    image_embs = _embed_volumes(vlm, volumes, runtime_patch)
    max_len = vlm.text_encoder.cfg.max_len_inference
    with torch.no_grad():
        text_embs = vlm.embed_text([structured_text(r) for _, r in pairs], max_len=max_len).double().numpy()
    pooled = pooled_recall(image_embs, text_embs, pools or POOL_SIZES, ks or POOL_KS)
    report: Dict[str, Any] = {"pooled": {key: vars(r) for key, r in pooled.items()}}
    if labels_path:
        table = _label_table(labels_path, recorder).set_index("case_id")
        ids = [v.volume_id for v in volumes]
        labels = {i: table.loc[i, "label"] for i in ids}
        rankings = retrieve_rankings(image_embs, image_embs, query_ids=ids, gallery_ids=ids)
        report["image_retrieval"] = evaluate_rankings(rankings, [labels[i] for i in ids], labels,
                                                      ks or RECALL_KS).to_dict()
    out_dir = _out_dir(out)
    recorder.add_output(write_json(out_dir / "retrieval.json", report))
    print_ok(f"Retrieval report for {len(volumes)} pairs in {out_dir}")
    return out_dir


# ============================================================================
# REGISTRATION
# ============================================================================

@cli.command()
@click.option('--fixed', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--moving', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--labels-fixed', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--labels-moving', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--report', 'report_path', type=click.Path(dir_okay=False), default=None,
              help='Report path (default: <out>/registration.json)')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='ConvexAdamParams TOML')
@click.option('--reducer', 'reducer_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Pre-fitted PCA reducer (.fxc)')
@click.option('--modality', type=click.Choice([m.value for m in Modality]), default=Modality.CT.value)
@click.option('--runtime-patch', type=int, default=None)
@manifested("register")
def register(state, recorder, fixed, moving, checkpoint, out, labels_fixed, labels_moving, report_path,
             config_path, reducer_path, modality, runtime_patch):
    """Training-free feature registration of a moving volume onto a fixed one."""
    if (labels_fixed is None) != (labels_moving is None):
        raise click.UsageError("--labels-fixed and --labels-moving go together")
    params = ConvexAdamParams()
    if config_path:
        recorder.add_input(config_path)
        params = load_config(config_path, ConvexAdamParams)
    recorder.config = params
    backbone = build_backbone_from_checkpoint(_load_checkpoint(checkpoint, recorder))
    reducer = None
    if reducer_path:
        recorder.add_input(reducer_path)
        reducer = PCAReducer.load(reducer_path)
    recorder.add_inputs([fixed, moving])
    fixed_vol, moving_vol = load_volume(fixed), load_volume(moving)
    if state.verbose:
        print_info(f"Registering {moving_vol.volume_id} onto {fixed_vol.volume_id} {fixed_vol.shape}")
    result = register_pair(fixed_vol.voxels, moving_vol.voxels, backbone, reducer, params,
                           runtime_patch, Modality(modality))

    out_dir = _out_dir(out)
    recorder.add_output(write_ctv_array(out_dir / "displacement.ctv", result.image_field.u,
                                        {"kind": "displacement", "units": "voxels",
                                         "volume_id": fixed_vol.volume_id}))
    warped = fixed_vol.with_voxels(warp(moving_vol.voxels, result.image_field),
                                   volume_id=f"{moving_vol.volume_id}-warped")
    recorder.add_output(save_volume(out_dir / "warped.ctv", warped))
    if reducer_path is None:
        recorder.add_output(result.reducer.save(out_dir / "pca_reducer.fxc", state.compression))
    report = result.to_dict()
    if labels_fixed:
        recorder.add_inputs([labels_fixed, labels_moving])
        lf, _ = read_ctv_array(labels_fixed)
        lm, _ = read_ctv_array(labels_moving)
        report["labels"] = label_overlap(np.rint(lf).astype(np.int64), np.rint(lm).astype(np.int64),
                                         result.image_field, fixed_vol.spacing_mm)
    target = write_json(Path(report_path) if report_path else out_dir / "registration.json", report)
    recorder.add_output(target)
    recorder.add_summary(mean_displacement=report["mean_displacement"])
    print_ok(f"Registered {moving_vol.volume_id} onto {fixed_vol.volume_id}; report in {target}")
    return out_dir


# ============================================================================
# STATISTICS
# ============================================================================

@cli.command()
@click.option('--metric', 'metric_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='CSV with case_id,value')
@click.option('--paired-with', 'paired_paths', type=click.Path(exists=True, dir_okay=False), multiple=True,
              help='Competing method CSV (repeatable; Holm-corrected)')
@click.option('-o', '--out', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--n-resamples', type=click.IntRange(min=100), default=N_RESAMPLES)
@click.option('--alpha', type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=0.05)
@manifested("stats")
def stats(state, recorder, metric_path, paired_paths, out, n_resamples, alpha):
    """BCa confidence interval and paired permutation tests against other methods."""
    seed = state.seed_or(0)
    recorder.seed = seed
    recorder.add_input(metric_path)
    sample = MetricSample.from_csv(metric_path)
    ci = bca_bootstrap(sample.values, n=n_resamples, seed=seed, alpha=alpha)
    report: Dict[str, Any] = {"n_cases": len(sample.case_ids), "ci": ci.to_dict(), "comparisons": {}}
    pvals = []
    for i, path in enumerate(paired_paths):
        recorder.add_input(path)
        x, y = sample.paired_with(MetricSample.from_csv(path))
        if x.size <= MAX_EXACT_PAIRS:
            p = exact_permutation_test(x, y)
        else:
            p = paired_permutation_test(x, y, n=n_resamples, seed=seed + 1 + i)
        diff_ci = bca_bootstrap(x - y, n=n_resamples, seed=seed + 1 + i, alpha=alpha)
        report["comparisons"][str(path)] = {"mean_difference": float(np.mean(x - y)), "p_value": p,
                                            "difference_ci": diff_ci.to_dict()}
        pvals.append(p)
    if pvals:
        holm = holm_bonferroni(pvals, alpha)
        for path, reject, adjusted in zip(paired_paths, holm.reject, holm.adjusted):
            report["comparisons"][str(path)].update(reject=bool(reject), p_holm=float(adjusted))
    out_dir = _out_dir(out)
    recorder.add_output(write_json(out_dir / "stats.json", report))
    print_ok(f"Mean {ci.point:.4f} [{ci.lower:.4f}, {ci.upper:.4f}] over {len(sample.case_ids)} cases")
    return out_dir


if __name__ == '__main__':
    cli()
