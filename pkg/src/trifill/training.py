"""Training, evaluation, and ablation drivers.

One step = a discriminator update on edge maps (hinge loss, spectral-norm
power iterates refreshed during the real pass) followed by a generator
update on the composite objective. Every random draw — batch indices and
mask seeds — derives from (seed, step), so a run is a pure function of its
configs and resuming from a checkpoint rejoins the exact trajectory.
"""

from __future__ import annotations

import dataclasses
import os
import time

import numpy as np

from . import data, losses
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ConfigError, FUSION_VARIANTS, ACB_DEPTHS, ModelConfig,
                     TrainConfig, config_from_mapping, config_to_mapping)
from .losses import LossReport
from .metrics import EvalReport, miou, psnr, psnr_masked, ssim
from .model import EdgeDiscriminator, Generator
from .optim import Adam

LOG_HEADER = "step,total,inpt,edge_bce,edge_adv,seg,disc"


class NumericError(RuntimeError):
    """A loss went non-finite; the run aborts keeping the last checkpoint."""


def _dtype_of(mcfg):
    return np.float64 if mcfg.precision == "float64" else np.float32


class Trainer:
    """Owns the models, optimizers, and step counter."""

    def __init__(self, mcfg, tcfg):
        mcfg.validate()
        tcfg.validate()
        self.mcfg, self.tcfg = mcfg, tcfg
        self.dtype = _dtype_of(mcfg)
        self.gen = Generator(mcfg, seed=tcfg.seed)
        self.disc = None
        self.opt_d = None
        betas = (tcfg.beta1, tcfg.beta2)
        if mcfg.use_edge_branch:
            if mcfg.image_size < 32:
                raise ConfigError(
                    f"image_size {mcfg.image_size} is too small for the edge "
                    f"critic; its five stride-2 layers need at least 32x32")
            self.disc = EdgeDiscriminator(seed=tcfg.seed)
            if mcfg.precision == "float32":
                self.disc.cast(np.float32)
            self.opt_d = Adam(self.disc.named_parameters(), lr=tcfg.lr_d,
                              betas=betas, eps=tcfg.adam_eps)
        self.opt_g = Adam(self.gen.named_parameters(), lr=tcfg.lr_g,
                          betas=betas, eps=tcfg.adam_eps)
        self.weights = (mcfg.loss_weights.scaled_for_biased()
                        if mcfg.biased_prior else mcfg.loss_weights)
        self.step = 0

    # -- deterministic data draws -------------------------------------------

    def batch(self, ds, step):
        rng = np.random.default_rng(np.random.SeedSequence(
            self.tcfg.seed, spawn_key=(step,)))
        n = len(ds)
        if self.tcfg.batch_size >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=self.tcfg.batch_size, replace=False)
        spec = data.MaskSpec.named(self.tcfg.mask_mode,
                                   seed=int(rng.integers(0, 2 ** 31 - 1)))
        return data.load_batch(ds, idx, spec, dtype=self.dtype)

    # -- one optimization step ----------------------------------------------

    def train_step(self, sample):
        image = Tensor(sample.image)
        mask = Tensor(sample.mask)
        corrupted = Tensor(sample.corrupted)
        out = self.gen(corrupted, mask)
        w = self.weights

        d_val = 0.0
        real_edge = None
        if self.mcfg.use_edge_branch:
            real_edge = Tensor(sample.edge)
            self.opt_d.zero_grad()
            d_loss = losses.edge_adv_d(out.edge, real_edge, self.disc, update=True)
            d_loss.backward()
            self.opt_d.step()
            d_val = float(d_loss.data)

        self.opt_g.zero_grad()
        inpt = losses.inpaint_loss(out.image, image, mask, w)
        bce = adv = seg = None
        if self.mcfg.use_edge_branch:
            bce = losses.edge_bce(out.edge, real_edge)
            adv = losses.edge_adv_g(out.edge, self.disc)
        if self.mcfg.use_seg_branch:
            seg = losses.seg_ce(out.seg_logits, sample.seg)
        total = losses.total_loss(inpt, bce, adv, seg, w)
        total.backward()
        # the adversarial term also drops gradients on discriminator params;
        # they are discarded by the next opt_d.zero_grad(), never applied
        self.opt_g.step()
        self.step += 1

        scalar = lambda t: float(t.data) if t is not None else 0.0
        return LossReport(total=float(total.data), inpt=scalar(inpt),
                          edge_bce=scalar(bce), edge_adv=scalar(adv),
                          seg=scalar(seg), disc=d_val)

    # -- checkpoint plumbing --------------------------------------------------

    def state_arrays(self):
        arrays = {"step": np.array([self.step], dtype=np.int64)}
        for name, p in self.gen.named_parameters():
            arrays[f"g.{name}"] = p.data
        for k, v in self.opt_g.state_arrays().items():
            arrays[f"optg.{k}"] = v
        if self.disc is not None:
            for name, p in self.disc.named_parameters():
                arrays[f"d.{name}"] = p.data
            for name, b in self.disc.named_buffers():
                arrays[f"db.{name}"] = b.data
            for k, v in self.opt_d.state_arrays().items():
                arrays[f"optd.{k}"] = v
        return arrays

    def load_arrays(self, arrays):
        def take(prefix, name, like):
            a = arrays.get(prefix + name)
            if a is None:
                raise ValueError(f"checkpoint missing {prefix}{name}")
            if a.shape != like.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {prefix}{name}")
            like.data = a.astype(like.data.dtype, copy=True)

        self.step = int(arrays["step"][0])
        for name, p in self.gen.named_parameters():
            take("g.", name, p)
        self.opt_g.load_state_arrays(
            {k[len("optg."):]: v for k, v in arrays.items() if k.startswith("optg.")})
        if self.disc is not None:
            for name, p in self.disc.named_parameters():
                take("d.", name, p)
            for name, b in self.disc.named_buffers():
                take("db.", name, b)
            self.opt_d.load_state_arrays(
                {k[len("optd."):]: v for k, v in arrays.items() if k.startswith("optd.")})

    def save(self, path):
        meta = {"kind": "train-state"}
        for k, v in config_to_mapping(self.mcfg).items():
            meta[f"model.{k}"] = v
        for k, v in config_to_mapping(self.tcfg).items():
            meta[f"train.{k}"] = v
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def restore(cls, path, tcfg_overrides=None):
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "train-state":
            raise ValueError(f"{path}: not a training checkpoint")
        mcfg = config_from_mapping(ModelConfig, {
            k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")})
        tcfg = config_from_mapping(TrainConfig, {
            k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")})
        if tcfg_overrides:
            tcfg = dataclasses.replace(tcfg, **tcfg_overrides)
        trainer = cls(mcfg, tcfg)
        trainer.load_arrays(arrays)
        return trainer


def _check_dataset(mcfg, ds):
    if ds.height != mcfg.image_size or ds.width != mcfg.image_size:
        raise ConfigError(f"dataset is {ds.height}x{ds.width}, model expects "
                          f"{mcfg.image_size}x{mcfg.image_size}")
    if ds.k_classes != mcfg.k_classes:
        raise ConfigError(f"dataset has {ds.k_classes} classes, model expects "
                          f"{mcfg.k_classes}")


def run_training(mcfg, tcfg, resume=None, echo=None):
    """Train to tcfg.steps, logging CSV and checkpointing on cadence.

    Returns the Trainer. A non-finite loss raises NumericError after the
    offending line is logged; the last on-cadence checkpoint stays intact.
    """
    ds = data.load_dataset(tcfg.data_path)
    if resume:
        trainer = Trainer.restore(resume, tcfg_overrides={
            "steps": tcfg.steps, "out_dir": tcfg.out_dir,
            "data_path": tcfg.data_path})
        tcfg = trainer.tcfg
    else:
        trainer = Trainer(mcfg, tcfg)
    _check_dataset(trainer.mcfg, ds)

    os.makedirs(tcfg.out_dir, exist_ok=True)
    ck_path = os.path.join(tcfg.out_dir, "checkpoint.bin")
    log_path = os.path.join(tcfg.out_dir, "loss_log.csv")
    mode = "a" if (resume and os.path.exists(log_path)) else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write(LOG_HEADER + "\n")
        while trainer.step < tcfg.steps:
            step = trainer.step
            report = trainer.train_step(trainer.batch(ds, step))
            if step % tcfg.log_every == 0 or not report.finite():
                vals = ",".join(f"{v:.17g}" for v in report.values())
                log.write(f"{step},{vals}\n")
                log.flush()
            if echo and (step % max(1, tcfg.log_every * 50) == 0):
                echo(f"step {step}: total {report.total:.5f} disc {report.disc:.5f}")
            if not report.finite():
                raise NumericError(f"non-finite loss at step {step}")
            if trainer.step % tcfg.checkpoint_every == 0 or trainer.step == tcfg.steps:
                trainer.save(ck_path)
    trainer.save(ck_path)
    return trainer


# -- evaluation ----------------------------------------------------------------


def _forward_eval(trainer, sample):
    with no_grad():
        out = trainer.gen(Tensor(sample.corrupted), Tensor(sample.mask))
    comp = out.composite.data
    seg_pred = (np.argmax(out.seg_logits.data, axis=1)
                if out.seg_logits is not None else None)
    return comp, seg_pred


def evaluate(trainer, ds, mask_mode, mask_seed=0, max_samples=None,
             dump_dir=None, dump_count=0, chunk=8):
    """Composite-image PSNR/SSIM and segmentation mIoU for one mask mode."""
    _check_dataset(trainer.mcfg, ds)
    n = len(ds) if max_samples is None else min(len(ds), max_samples)
    spec = data.MaskSpec.named(mask_mode, seed=mask_seed)
    psnrs, holes, ssims = [], [], []
    seg_preds, seg_gts = [], []
    dumped = 0
    for start in range(0, n, chunk):
        idx = range(start, min(n, start + chunk))
        sample = data.load_batch(ds, idx, spec, dtype=trainer.dtype)
        comp, seg_pred = _forward_eval(trainer, sample)
        for i in range(comp.shape[0]):
            img = sample.image[i]
            psnrs.append(psnr(comp[i], img))
            holes.append(psnr_masked(comp[i], img, sample.mask[i]))
            ssims.append(ssim(comp[i], img))
            if dump_dir and dumped < dump_count:
                strip = np.concatenate([sample.corrupted[i], comp[i], img], axis=2)
                data.write_ppm(os.path.join(dump_dir, f"sample_{start + i:03d}.ppm"),
                               strip)
                dumped += 1
        if seg_pred is not None:
            seg_preds.append(seg_pred)
            seg_gts.append(sample.seg)
    if seg_preds:
        overall, per_class = miou(np.concatenate(seg_preds),
                                  np.concatenate(seg_gts), trainer.mcfg.k_classes)
    else:
        overall, per_class = float("nan"), []
    return EvalReport(psnr=float(np.mean(psnrs)), psnr_hole=float(np.mean(holes)),
                      ssim=float(np.mean(ssims)), miou=overall,
                      per_class_iou=list(per_class), samples=n)


def evaluate_bands(trainer, ds, modes=("regular", "easy", "medium", "hard"),
                   mask_seed=0, max_samples=None, dump_dir=None, dump_count=0):
    return {mode: evaluate(trainer, ds, mode, mask_seed=mask_seed,
                           max_samples=max_samples,
                           dump_dir=dump_dir if mode == "regular" else None,
                           dump_count=dump_count)
            for mode in modes}


# -- ablation sweeps -------------------------------------------------------------


#: Fusion rows of the comparison table: (label, fusion, biased). The biased
#: half skips "add" (parameter-free fusion cannot absorb a prior signal) and
#: folds plain concat and the two-conv fuse into one concat row.
TABLE3_ROWS = (
    ("biased-concat", "concat", True),
    ("biased-adain", "adain", True),
    ("biased-spade", "spade", True),
    ("biased-adn", "adn", True),
    ("unbiased-add", "add", False),
    ("unbiased-conv", "conv", False),
    ("unbiased-adain", "adain", False),
    ("unbiased-spade", "spade", False),
    ("unbiased-adn", "adn", False),
)

#: Branch grid rows: (label, use_edge, use_seg).
TABLE4_ROWS = (
    ("no-aux", False, False),
    ("edge-only", True, False),
    ("seg-only", False, True),
    ("both", True, True),
)

ABLATION_AXES = ("fusion", "depth", "branches", "biased")

TABLE_COLUMNS = ("label,fusion,biased,edge,seg,depth,params,steps_per_sec,"
                 "psnr,psnr_hole,ssim,miou")


@dataclasses.dataclass
class AblationRow:
    label: str
    mcfg: ModelConfig
    params: int = 0
    steps_per_sec: float = 0.0
    report: EvalReport = None

    def csv(self):
        m, r = self.mcfg, self.report
        return (f"{self.label},{m.fusion},{str(m.biased_prior).lower()},"
                f"{str(m.use_edge_branch).lower()},{str(m.use_seg_branch).lower()},"
                f"{m.acb_depth},{self.params},{self.steps_per_sec:.3f},"
                f"{r.psnr:.4f},{r.psnr_hole:.4f},{r.ssim:.4f},{r.miou:.4f}")


def _variant_configs(base, axes):
    """(label, ModelConfig) pairs per axis; duplicates share one training run."""
    out = {}

    def add(axis, label, **changes):
        cfg = dataclasses.replace(base, **changes)
        out.setdefault(axis, []).append((label, cfg))

    for axis in axes:
        if axis == "fusion":
            for f in FUSION_VARIANTS:
                add(axis, f"fusion-{f}", fusion=f, biased_prior=False)
        elif axis == "depth":
            for d in ACB_DEPTHS:
                add(axis, f"acb-{d}", acb_depth=d)
        elif axis == "branches":
            for label, edge, seg in TABLE4_ROWS:
                add(axis, label, use_edge_branch=edge, use_seg_branch=seg,
                    biased_prior=False)
        elif axis == "biased":
            for label, fusion, biased in TABLE3_ROWS:
                if biased:
                    add(axis, label, fusion=fusion, biased_prior=True)
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}; "
                              f"expected one of {ABLATION_AXES}")
    return out


def run_ablation(base_mcfg, tcfg, axes=ABLATION_AXES, echo=None):
    """Train every variant with identical seed/steps; returns axis -> rows."""
    ds = data.load_dataset(tcfg.data_path)
    per_axis = _variant_configs(base_mcfg, axes)
    cache = {}

    def run(label, mcfg):
        key = config_to_mapping(mcfg)
        key = tuple(sorted(key.items()))
        if key in cache:
            return dataclasses.replace(cache[key], label=label)
        trainer = Trainer(mcfg, tcfg)
        ds_local = ds
        _check_dataset(mcfg, ds_local)
        t0 = time.time()
        for step in range(tcfg.steps):
            report = trainer.train_step(trainer.batch(ds_local, step))
            if not report.finite():
                raise NumericError(f"non-finite loss in variant {label!r} "
                                   f"at step {step}")
        dt = time.time() - t0
        row = AblationRow(label=label, mcfg=mcfg,
                          params=trainer.gen.param_count(),
                          steps_per_sec=tcfg.steps / dt if dt > 0 else 0.0,
                          report=evaluate(trainer, ds_local, tcfg.mask_mode))
        if echo:
            echo(f"{label}: psnr {row.report.psnr:.2f} "
                 f"({row.steps_per_sec:.2f} steps/s)")
        cache[key] = row
        return row

    return {axis: [run(label, cfg) for label, cfg in variants]
            for axis, variants in per_axis.items()}


def ablation_tables(rows_by_axis):
    """Assemble the comparison tables from per-axis rows.

    fusion+biased rows combine into the 9-row fusion/prior table; depth and
    branches map to their 4-row grids.
    """
    tables = {}
    for axis, rows in rows_by_axis.items():
        tables[axis] = rows
    if "fusion" in rows_by_axis and "biased" in rows_by_axis:
        unbiased = {r.mcfg.fusion: r for r in rows_by_axis["fusion"]}
        merged = list(rows_by_axis["biased"])
        for label, fusion, biased in TABLE3_ROWS:
            if not biased and fusion in unbiased:
                merged.append(dataclasses.replace(unbiased[fusion], label=label))
        tables["fusion_prior"] = merged
    return tables


def write_tables(tables, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, rows in tables.items():
        path = os.path.join(out_dir, f"ablation_{name}.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write(TABLE_COLUMNS + "\n")
            for row in rows:
                f.write(row.csv() + "\n")
        paths[name] = path
    return paths
