"""Dataset generation, training, evaluation and ablation runs on disk.

Every file written here carries the config hash of the run that produced it.
Training and evaluation are deterministic in the config: rerunning a config
reproduces its log, checkpoints and metrics bitwise.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from .autodiff import NonFiniteError, Tensor
from .config import ExperimentConfig, config_hash
from .data import SPLITS, SynthConfig, augment, generate_sample, sample_seed, split_indices
from .diffusion import sample_mask
from .io import Checkpoint, read_checkpoint, read_volb, write_checkpoint, write_volb
from .metrics import CaseResult, evaluate_case, spearman_r
from .optim import OptimState, init_state, warmup_cosine_lr
from .recycling import RECYCLE, STANDARD, TrainConfig, supervised_train_step, train_step
from .schedule import SubSchedule, make_linear_schedule, resample_subsequence, schedule_from_descriptor
from .unet import baseline_apply, init_params, make_denoiser, unet_apply

LOG_COLUMNS = ("step", "lr", "total", "ce", "dice", "l2")
METRIC_COLUMNS = ("case_id", "class", "dice", "hd95", "roi_voxels")
FINAL_CKPT = "final.ckpt"


class ExperimentError(RuntimeError):
    """A run could not complete; the message says why."""


def _data_hash(cfg: SynthConfig) -> str:
    text = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# --- datasets ----------------------------------------------------------------

def gen_data(cfg: ExperimentConfig, out_dir) -> dict:
    """Write every split as VOLB image/mask pairs plus ``manifest.json``."""
    out = Path(out_dir)
    entries = []
    for split, indices in split_indices(cfg.data).items():
        (out / split).mkdir(parents=True, exist_ok=True)
        for idx in indices:
            seed = sample_seed(cfg.data.seed, idx)
            vol, mask = generate_sample(cfg.data, seed)
            image_name = f"{split}/case{idx:04d}_image.volb"
            mask_name = f"{split}/case{idx:04d}_mask.volb"
            write_volb(out / image_name, vol.intensities, vol.spacing)
            write_volb(out / mask_name, mask, vol.spacing)
            entries.append({"index": idx, "split": split, "seed": seed,
                            "image": image_name, "mask": mask_name})
    manifest = {
        "config_hash": config_hash(cfg),
        "data_hash": _data_hash(cfg.data),
        "num_classes": cfg.data.num_classes,
        "shape": list(cfg.data.shape),
        "cases": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


class Dataset:
    """Read access to a generated dataset, with a log of every file read."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no dataset manifest at {path}; run gen-data first")
        self.manifest = json.loads(path.read_text())
        self.reads: list[tuple[str, int]] = []
        self._by_split = {s: [c for c in self.manifest["cases"] if c["split"] == s] for s in SPLITS}

    def check(self, cfg: SynthConfig) -> None:
        if self.manifest["data_hash"] != _data_hash(cfg):
            raise ExperimentError(
                f"dataset at {self.root} was generated with a different data config")

    def indices(self, split: str) -> list[int]:
        if split not in self._by_split:
            raise ValueError(f"unknown split {split!r}")
        return [c["index"] for c in self._by_split[split]]

    def _entry(self, split, idx):
        for c in self._by_split[split]:
            if c["index"] == idx:
                return c
        raise KeyError(f"case {idx} not in split {split}")

    def image(self, split: str, idx: int) -> tuple[np.ndarray, tuple]:
        self.reads.append(("image", idx))
        arr, spacing = read_volb(self.root / self._entry(split, idx)["image"])
        return arr, spacing

    def mask(self, split: str, idx: int) -> np.ndarray:
        self.reads.append(("mask", idx))
        return read_volb(self.root / self._entry(split, idx)["mask"])[0]


# --- training ----------------------------------------------------------------

def inference_schedule(cfg: ExperimentConfig) -> SubSchedule:
    s = cfg.schedule
    return schedule_from_descriptor(s.T, s.beta_start, s.beta_end, s.K)


def training_schedule(cfg: ExperimentConfig) -> SubSchedule:
    """The K-step schedule, or every parent step for the full-T arm."""
    if cfg.train_steps_mode == "full":
        s = cfg.schedule
        return resample_subsequence(make_linear_schedule(s.T, s.beta_start, s.beta_end), s.T)
    return inference_schedule(cfg)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        strategy=RECYCLE if cfg.recycle.enabled else STANDARD,
        loss=cfg.loss, recycle_prob=cfg.recycle.prob, exclude_last=cfg.recycle.exclude_last,
    )


def _dtype(cfg: ExperimentConfig):
    return np.dtype(cfg.unet.dtype)


def _rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


@dataclass
class TrainResult:
    out_dir: Path
    step: int
    finished: bool
    seconds: float
    params: dict = field(repr=False, default_factory=dict)


def _checkpoint(cfg, text, params, opt: OptimState, rng, step) -> Checkpoint:
    s = cfg.schedule
    return Checkpoint(
        config_hash=config_hash(cfg), config_text=text,
        schedule=(s.T, s.beta_start, s.beta_end, s.K), step=step,
        params={k: p.data for k, p in params.items()},
        opt_m=opt.m, opt_v=opt.v, opt_step=opt.step,
        rng_state=rng.bit_generator.state,
    )


def _latest_checkpoint(out: Path) -> Optional[Path]:
    found = sorted(out.glob("step*.ckpt"), key=lambda p: int(p.stem[4:]))
    return found[-1] if found else None


def _read_log(path: Path, upto: int) -> list[list[str]]:
    rows = []
    with path.open() as fh:
        for row in csv.reader(line for line in fh if not line.startswith("#")):
            if row and row[0] != "step" and int(row[0]) <= upto:
                rows.append(row)
    return rows


def _format_float(v) -> str:
    return "" if v is None else repr(float(v))


def train(cfg: ExperimentConfig, data_dir, out_dir, resume: bool = True,
          stop_after: Optional[int] = None, progress: Optional[Callable[[int, dict], None]] = None
          ) -> TrainResult:
    """Train per ``cfg``; write ``train_log.csv`` and checkpoints into ``out_dir``.

    With ``resume`` an existing run in ``out_dir`` continues from its latest
    checkpoint. ``stop_after`` ends the run early (used to test interruption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = config_mod.dumps(cfg)
    h = config_hash(cfg)
    data = Dataset(data_dir)
    data.check(cfg.data)
    train_idx = data.indices("train")
    cases = [(data.image("train", i)[0], data.mask("train", i)) for i in train_idx]
    (out / "config.txt").write_text(text)

    dtype = _dtype(cfg)
    params = {k: Tensor(v.data.astype(dtype)) for k, v in init_params(cfg.unet, cfg.seed).items()}
    opt = init_state(params, cfg.optim)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    rows: list[list[str]] = []
    latest = _latest_checkpoint(out) if resume else None
    if latest is not None:
        ck = read_checkpoint(latest, expected_hash=h)
        params = {k: Tensor(v.astype(dtype)) for k, v in ck.params.items()}
        opt = OptimState(m={k: v.astype(dtype) for k, v in ck.opt_m.items()},
                         v={k: v.astype(dtype) for k, v in ck.opt_v.items()},
                         step=ck.opt_step, config=cfg.optim)
        rng = _rng_from_state(ck.rng_state)
        start = ck.step
        log_path = out / "train_log.csv"
        rows = _read_log(log_path, start) if log_path.exists() else []
        if len(rows) != start:
            raise ExperimentError(f"log in {out} has {len(rows)} rows, checkpoint is at step {start}")
    elif resume is False:
        for old in out.glob("*.ckpt"):
            old.unlink()

    sched = training_schedule(cfg)
    tcfg = train_config(cfg)
    ucfg = cfg.unet
    apply_fn = lambda p, img, x, t: unet_apply(p, ucfg, img, x, t)  # noqa: E731
    predict_fn = lambda p, img: baseline_apply(p, ucfg, img)  # noqa: E731
    warmup = cfg.warmup_steps
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)

    log = (out / "train_log.csv").open("w", newline="")
    log.write(f"# config_hash={h}\n")
    writer = csv.writer(log)
    writer.writerow(LOG_COLUMNS)
    writer.writerows(rows)
    t0 = time.perf_counter()
    step = start
    try:
        for step in range(start + 1, end + 1):
            picks = rng.integers(len(cases), size=cfg.batch_size)
            images, masks = [], []
            for i in picks:
                img, msk = cases[i]
                if cfg.augment:
                    img, msk, _ = augment(img, msk, rng)
                images.append(img)
                masks.append(msk)
            images, masks = np.stack(images), np.stack(masks)
            lr = warmup_cosine_lr(step, warmup, cfg.steps, cfg.optim.lr_peak)
            try:
                if cfg.model == "baseline":
                    res = supervised_train_step(params, predict_fn, images, masks, cfg.loss, opt, lr)
                else:
                    res = train_step(params, apply_fn, images, masks, tcfg, opt, sched, rng, lr,
                                     cfg.unet.num_classes)
            except NonFiniteError as exc:
                raise ExperimentError(f"training diverged at step {step}: {exc}") from exc
            params = res.params
            terms = res.terms
            writer.writerow([step, _format_float(lr)] +
                            [_format_float(terms.get(c)) for c in LOG_COLUMNS[2:]])
            if progress is not None:
                progress(step, terms)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                log.flush()
                write_checkpoint(out / f"step{step}.ckpt", _checkpoint(cfg, text, params, opt, rng, step))
    finally:
        log.close()
    seconds = time.perf_counter() - t0
    run_path = out / "run.json"
    if start and run_path.exists():
        # wall time of earlier segments of a resumed run
        prior = json.loads(run_path.read_text())
        if prior.get("config_hash") == h:
            seconds += prior.get("train_seconds", 0.0)
    finished = step >= cfg.steps
    if finished:
        write_checkpoint(out / FINAL_CKPT, _checkpoint(cfg, text, params, opt, rng, step))
    elif stop_after is not None and step % cfg.checkpoint_every != 0:
        write_checkpoint(out / f"step{step}.ckpt", _checkpoint(cfg, text, params, opt, rng, step))
    run = {"config_hash": h, "step": step, "finished": finished, "train_seconds": seconds}
    run_path.write_text(json.dumps(run, indent=1) + "\n")
    return TrainResult(out, step, finished, seconds, params)


# --- evaluation --------------------------------------------------------------

Predictor = Callable[[np.ndarray, int], np.ndarray]


def load_model(ckpt_path, force: bool = False) -> tuple[ExperimentConfig, dict[str, Tensor]]:
    ck = read_checkpoint(ckpt_path)
    cfg = config_mod.loads(ck.config_text)
    if config_hash(cfg) != ck.config_hash and not force:
        raise ExperimentError(f"{ckpt_path}: embedded config does not match its hash")
    dtype = _dtype(cfg)
    return cfg, {k: Tensor(v.astype(dtype)) for k, v in ck.params.items()}


def make_predictor(cfg: ExperimentConfig, params: dict[str, Tensor]) -> Predictor:
    """``(image [1,D,H,W], case index) -> label mask`` for the configured model."""
    ucfg = cfg.unet
    dtype = _dtype(cfg)
    if cfg.model == "baseline":
        def predict(image, idx):
            with ad.no_grad():
                logits = baseline_apply(params, ucfg, Tensor(image[None].astype(dtype)))
            return np.argmax(logits.data[0], axis=0).astype(np.uint8)
        return predict

    sched = inference_schedule(cfg)
    denoiser = make_denoiser(params, ucfg)

    def predict(image, idx):
        rng = np.random.default_rng([cfg.eval_seed, idx])
        mask, _ = sample_mask(denoiser, Tensor(image[None].astype(dtype)), sched, rng,
                              cfg.parameterization, ucfg.num_classes)
        return mask[0].astype(np.uint8)
    return predict


@dataclass
class EvalSummary:
    config_hash: str
    split: str
    cases: list[CaseResult]
    mean_dice: float
    sd_dice: float
    mean_hd95: float
    sd_hd95: float
    hd95_undefined: int
    roi_size_spearman: float

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash, "split": self.split,
            "mean_dice": self.mean_dice, "sd_dice": self.sd_dice,
            "mean_hd95": _json_num(self.mean_hd95), "sd_hd95": _json_num(self.sd_hd95),
            "hd95_undefined": self.hd95_undefined,
            "roi_size_spearman": _json_num(self.roi_size_spearman),
            "case_ids": [c.case_id for c in self.cases],
            "case_dice": [c.mean_dice for c in self.cases],
            "case_hd95": [_json_num(c.mean_hd95) for c in self.cases],
        }


def _json_num(x: float):
    return None if x is None or math.isnan(x) else x


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def evaluate_predictor(predict: Predictor, data: Dataset, split: str, num_classes: int,
                       h: str) -> EvalSummary:
    """Predict every case from its image, then score against the masks.

    Ground-truth masks are read only after all predictions are made.
    """
    indices = data.indices(split)
    preds, spacings = {}, {}
    for idx in indices:
        image, spacing = data.image(split, idx)
        preds[idx] = predict(image, idx)
        spacings[idx] = spacing
    cases = [evaluate_case(f"case{idx:04d}", preds[idx], data.mask(split, idx), num_classes,
                           spacings[idx]) for idx in indices]
    mean_dice, sd_dice = _mean_sd([c.mean_dice for c in cases])
    mean_hd, sd_hd = _mean_sd([c.mean_hd95 for c in cases])
    sizes = [s for c in cases for s in c.roi_voxels]
    dices = [d for c in cases for d in c.dice]
    rho = spearman_r(sizes, dices) if len(sizes) >= 3 else math.nan
    return EvalSummary(h, split, cases, mean_dice, sd_dice, mean_hd, sd_hd,
                       sum(c.hd95_undefined for c in cases), rho)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def write_metrics(summary: EvalSummary, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"metrics_{summary.split}.csv"
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={summary.config_hash}\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for case in summary.cases:
            for c, (d, hd, n) in enumerate(zip(case.dice, case.hd95, case.roi_voxels), start=1):
                w.writerow([case.case_id, c, repr(d), repr(hd), n])
        w.writerow(["summary", "mean",
                    f"{_fmt(summary.mean_dice)} ± {_fmt(summary.sd_dice)}",
                    f"{_fmt(summary.mean_hd95)} ± {_fmt(summary.sd_hd95)}", ""])
    (out / f"summary_{summary.split}.json").write_text(json.dumps(summary.to_json(), indent=1) + "\n")
    return path


def evaluate(ckpt_path, data_dir, out_dir, split: str = "test", force: bool = False) -> EvalSummary:
    cfg, params = load_model(ckpt_path, force=force)
    data = Dataset(data_dir)
    data.check(cfg.data)
    summary = evaluate_predictor(make_predictor(cfg, params), data, split, cfg.unet.num_classes,
                                 config_hash(cfg))
    write_metrics(summary, out_dir)
    return summary


# --- ablation ----------------------------------------------------------------

REFERENCE_ARM = "proposed"
ARMS: dict[str, dict] = {
    "proposed": {},
    "no_recycling": {"recycle.enabled": False},
    "predict_eps": {"parameterization": "predict_eps"},
    "no_dice": {"loss.use_dice": False},
    "train_T1000": {"train_steps_mode": "full"},
    "non_diffusion": {"model": "baseline"},
}


def arm_config(base: ExperimentConfig, arm: str, seed: int) -> ExperimentConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {', '.join(ARMS)}")
    return config_mod.with_overrides(base, {**ARMS[arm], "seed": seed})


def run_arm(cfg: ExperimentConfig, data_dir, run_dir, log: Callable[[str], None] = print) -> dict:
    """Train (or resume) and evaluate one configuration; reuse finished results."""
    run_dir = Path(run_dir)
    h = config_hash(cfg)
    summary_path = run_dir / "summary_test.json"
    if summary_path.exists():
        done = json.loads(summary_path.read_text())
        if done.get("config_hash") == h:
            log(f"  reusing {run_dir}")
            return done
    res = train(cfg, data_dir, run_dir)
    log(f"  trained {res.step} steps in {res.seconds:.0f} s")
    summary = evaluate(run_dir / FINAL_CKPT, data_dir, run_dir, split="test")
    log(f"  test Dice {summary.mean_dice:.4f} ± {summary.sd_dice:.4f}")
    return summary.to_json()


def ablate(base: ExperimentConfig, data_dir, out_dir, seeds=(0, 1, 2), arms=None,
           log: Callable[[str], None] = print) -> bool:
    """Run the arms over ``seeds`` and write the comparison report.

    Returns False when any arm failed; failed arms are marked in the report.
    """
    from .report import write_report

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arms = list(ARMS) if arms is None else list(arms)
    ok = True
    for arm in arms:
        for seed in seeds:
            cfg = arm_config(base, arm, seed)
            run_dir = out / arm / f"seed{seed}"
            log(f"[{arm} seed {seed}] config {config_hash(cfg)}")
            try:
                run_arm(cfg, data_dir, run_dir, log=log)
            except Exception as exc:  # recorded in the report; other arms keep going
                ok = False
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
                log(f"  FAILED: {exc}")
    write_report(out, arms=arms, seeds=seeds)
    return ok
