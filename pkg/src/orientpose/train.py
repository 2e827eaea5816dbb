"""Two-step training, evaluation sweeps and run-directory artifacts.

Step 1 trains the FCNN on its map losses (plus the optional 3D pose loss)
with renderer-side augmentation and the PC network frozen at its identity
initialisation.  Step 2 fine-tunes the FCNN on translated and occluded
images and trains the PC network on the complemented-pose loss, with the PC
path detached from the FCNN.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import extract as E
from . import grad as G
from . import loss as L
from . import metrics as M
from . import net as N
from . import perturb as P
from . import synthdata as S
from .mapcodec import MapSet, dump_debug_images, encode_maps
from .skeleton import orientations_from_pose

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 1_000_003


class ConfigError(ValueError):
    pass


class DetachmentError(AssertionError):
    """The complemented-pose loss reached an FCNN parameter."""


def default_eval_perturbations() -> list[P.PerturbSpec]:
    specs = [
        P.PerturbSpec("none"),
        P.PerturbSpec("occlusion"),
        P.PerturbSpec("translation", tau=0.25),
        P.PerturbSpec("translation", tau=0.4),
        P.PerturbSpec("erase_rect"),
        P.PerturbSpec("erase_circle"),
        P.PerturbSpec("erase_edge"),
    ]
    grid = [(0.0, 0.0), (0.05, 0.0), (0.1, 0.0), (0.2, 0.0), (0.3, 0.0),
            (0.0, 0.1), (0.2, 0.2)]
    specs += [P.PerturbSpec("bbox_noise", sigma_c=c, sigma_s=s) for c, s in grid]
    return specs


@dataclass(frozen=True)
class Step2Data:
    tau: float = 0.5                      # translation range, fraction of the image side
    occlusion_count: tuple[int, int] = (1, 4)
    occlusion_size: tuple[float, float] = (0.1, 0.3)
    p_translate: float = 0.5
    p_occlude: float = 0.25


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: str | None = None            # existing dataset file; generated when None
    n_train: int = 2000
    n_val: int = 200
    synth: S.SynthConfig = S.SynthConfig()
    fcnn: N.FcnnConfig = N.FcnnConfig()
    loss: L.LossConfig = L.LossConfig()
    batch_size: int = 32
    lr: float = 1e-3
    lr2: float = 1e-4                     # FCNN fine-tuning rate in step 2
    pc_lr: float = 5e-5
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    epochs1: int = 8
    epochs2: int = 6
    augment: S.AugmentRanges = S.AugmentRanges()
    augment_p: float = 0.5                # share of step-1 samples re-rendered per epoch
    step2: Step2Data = Step2Data()
    eval_perturbations: tuple[P.PerturbSpec, ...] = tuple(default_eval_perturbations())
    eval_seeds: int = 5
    eval_seed: int = 7

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1 or self.batch_size < 1:
            raise ConfigError("sample counts and batch size must be positive")
        if min(self.lr, self.lr2, self.pc_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if any(e < 1 for e in self.decay_epochs):
            raise ConfigError("decay epochs count from 1")
        if self.step2.tau < self.augment.shift:
            raise ConfigError("step-2 translation range must cover the step-1 range")
        if self.synth.image_size != self.fcnn.image_size or self.synth.map_size != self.fcnn.map_size:
            raise ConfigError("synth and fcnn image/map sizes disagree")
        if self.loss.stages != self.fcnn.stages:
            raise ConfigError("loss and fcnn stage counts disagree")
        if self.eval_seeds < 1:
            raise ConfigError("eval_seeds must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_perturbations"] = [p.to_dict() for p in self.eval_perturbations]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"synth": S.SynthConfig, "loss": L.LossConfig, "augment": S.AugmentRanges}
        for key, typ in nested.items():
            if key in d:
                sub = dict(d[key])
                if key == "synth" and "pelvis_xy" in sub:
                    sub["pelvis_xy"] = tuple(sub["pelvis_xy"])
                d[key] = typ(**sub)
        if "fcnn" in d:
            d["fcnn"] = N.FcnnConfig.from_dict(d["fcnn"])
        if "step2" in d:
            sub = dict(d["step2"])
            for k in ("occlusion_count", "occlusion_size"):
                if k in sub:
                    sub[k] = tuple(sub[k])
            d["step2"] = Step2Data(**sub)
        if "eval_perturbations" in d:
            d["eval_perturbations"] = tuple(P.PerturbSpec.from_dict(p) for p in d["eval_perturbations"])
        if "decay_epochs" in d:
            d["decay_epochs"] = tuple(d["decay_epochs"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lr_at(cfg: ExperimentConfig, epoch: int, base: float | None = None) -> float:
    """Learning rate for 0-based ``epoch``: decays once each configured epoch is reached."""
    base = cfg.lr if base is None else base
    return base * cfg.decay_factor ** sum(epoch >= e for e in cfg.decay_epochs)


# --------------------------------------------------------------------------- data

def load_data(cfg: ExperimentConfig) -> tuple[list[S.Sample], list[S.Sample]]:
    if cfg.dataset:
        train = S.read_dataset(cfg.dataset)[: cfg.n_train]
    else:
        train = S.generate_dataset(cfg.n_train, cfg.seed, cfg.synth)
    val = S.generate_dataset(cfg.n_val, cfg.seed + VAL_SEED_OFFSET, cfg.synth)
    return train, val


def _maps_for(pose2d_map, pose3d, cfg: S.SynthConfig) -> np.ndarray:
    orients = orientations_from_pose(pose3d).orients
    dims = (cfg.map_size, cfg.map_size)
    return encode_maps(pose2d_map, orients, d=cfg.limb_width, dims=dims).to_array()


def _stack(images, maps, poses, has_3d, dtype=np.float32) -> S.Batch:
    return S.Batch(np.stack(images).transpose(0, 3, 1, 2).astype(dtype) / 255.0,
                   np.stack(maps).astype(dtype), np.stack(poses).astype(np.float64),
                   np.asarray(has_3d, dtype=bool))


def step1_epoch_data(samples: list[S.Sample], cfg: ExperimentConfig, epoch: int,
                     base: S.Batch) -> S.Batch:
    """Re-render a random share of the samples under fresh augmentation.

    The GT maps are re-encoded from the augmented pose, so they stay exact.
    """
    if cfg.augment_p <= 0:
        return base
    out = S.Batch(base.images.copy(), base.maps.copy(), base.pose3d.copy(), base.has_3d)
    seed = cfg.seed * 7919 + 1000 + epoch
    for i, s in enumerate(samples):
        rng = P.item_rng(seed, i)
        if rng.random() >= cfg.augment_p:
            continue
        aug = cfg.augment.sample(rng)
        img, pose, p2 = S.render_pose(s.pose3d, cfg.synth, rng, aug)
        out.images[i] = img.transpose(2, 0, 1) / 255.0
        out.maps[i] = _maps_for(p2, pose, cfg.synth)
        out.pose3d[i] = pose
    return out


def incomplete_sample(s: S.Sample, cfg: ExperimentConfig, rng: np.random.Generator):
    """A translated and/or occluded copy of ``s`` with maps re-encoded for the shift."""
    d = cfg.step2
    img, p2 = s.image, np.asarray(s.pose2d, dtype=np.float64)
    stride = cfg.synth.stride
    if rng.random() < d.p_translate:
        r = P.translate(img, d.tau, rng)
        img = r.image
        dx, dy = r.params["offset"]
        p2 = p2 - np.array([dx, dy]) / stride
    if rng.random() < d.p_occlude:
        img = P.occlude(img, rng, d.occlusion_count, d.occlusion_size).image
    return img, _maps_for(p2, s.pose3d, cfg.synth)


def step2_epoch_data(samples: list[S.Sample], cfg: ExperimentConfig, epoch: int) -> S.Batch:
    seed = cfg.seed * 7919 + 50_000 + epoch
    imgs, maps = [], []
    for i, s in enumerate(samples):
        img, m = incomplete_sample(s, cfg, P.item_rng(seed, i))
        imgs.append(img)
        maps.append(m)
    return _stack(imgs, maps, [s.pose3d for s in samples], [s.has_3d for s in samples])


# --------------------------------------------------------------------------- model

@dataclass
class Trained:
    model: N.Model
    history: list[dict] = field(default_factory=list)


def predict(model: N.Model, images: np.ndarray, batch_size: int = 64
            ) -> tuple[np.ndarray, np.ndarray]:
    """Initial and PC-complemented poses for ``(N, H, W, 3)`` uint8 images."""
    before, after = [], []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size].transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        outs = N.fcnn_forward(x, model.fcnn, model.cfg)
        est = E.decode_tensor(outs[-1])
        comp = N.pc_complement(est, model.pc)
        before.append(est.pose.data.astype(np.float64))
        after.append(comp.pose.data.astype(np.float64))
    return np.concatenate(before), np.concatenate(after)


def mpjpe_of(model: N.Model, samples: list[S.Sample]) -> tuple[float, float]:
    before, after = predict(model, np.stack([s.image for s in samples]))
    gts = np.stack([s.pose3d for s in samples]).astype(np.float64)
    return (float(np.mean([M.mpjpe(p, g) for p, g in zip(before, gts)])),
            float(np.mean([M.mpjpe(p, g) for p, g in zip(after, gts)])))


def _loss_writer(path: Path | None):
    if path is None:
        return None, io.StringIO()
    fh = open(path, "w", newline="")
    fh.write("epoch,step,stage,term,value\n")
    return fh, fh


def train_step1(cfg: ExperimentConfig, train: list[S.Sample], val: list[S.Sample] | None = None,
                model: N.Model | None = None, out_dir: Path | None = None) -> Trained:
    """FCNN training on map losses (and the pose loss when enabled); PC stays frozen."""
    model = model or N.Model.create(cfg.fcnn, cfg.seed)
    pc_before = {k: p.data.copy() for k, p in model.pc.items()}
    opt = G.RmsProp(model.fcnn, lr=cfg.lr)
    base = S.to_batch(train, cfg.synth)
    order_rng = np.random.default_rng(cfg.seed + 1)
    fh, sink = _loss_writer(out_dir / "loss_step1.csv" if out_dir else None)
    history = []
    step = 0
    probe = train[: min(len(train), 200)]
    try:
        for epoch in range(cfg.epochs1):
            t0 = time.perf_counter()
            opt.lr = lr_at(cfg, epoch)
            data = step1_epoch_data(train, cfg, epoch, base)
            perm = order_rng.permutation(len(train))
            sums: dict[str, float] = {}
            for i in range(0, len(perm), cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                with G.Tape() as tape:
                    outs = N.fcnn_forward(data.images[idx], model.fcnn, cfg.fcnn)
                    est = E.decode_tensor(outs[-1])
                    total, parts = L.total_loss(outs, est.pose, None, data.maps[idx],
                                                data.pose3d[idx], data.has_3d[idx], cfg.loss)
                opt.step(tape.backward(total))
                L.write_loss_rows(sink, step, parts, epoch)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                step += 1
            row = {"step": 1, "epoch": epoch, "lr": opt.lr,
                   **{f"loss_{k}": v / len(train) for k, v in sums.items()}}
            row["train_mpjpe"] = mpjpe_of(model, probe)[0]
            if val:
                row["val_mpjpe"] = mpjpe_of(model, val)[0]
            history.append(row)
            log.info("step1 epoch %d lr %.2g loss %.4f train %.1f val %s (%.1fs)", epoch, opt.lr,
                     row["loss_total"], row["train_mpjpe"], f"{row.get('val_mpjpe', float('nan')):.1f}",
                     time.perf_counter() - t0)
    finally:
        if fh:
            fh.close()
    for k, p in model.pc.items():
        if p.data.tobytes() != pc_before[k].tobytes():
            raise AssertionError(f"PC parameter {k} moved during step 1")
    return Trained(model, history)


def assert_detached(grads: G.Gradients, fcnn: dict) -> None:
    for k, p in fcnn.items():
        g = grads.get(p)
        if g is not None and np.any(g):
            raise DetachmentError(f"complemented-pose loss reached FCNN parameter {k}")


def train_step2(cfg: ExperimentConfig, train: list[S.Sample], model: N.Model,
                val: list[S.Sample] | None = None, out_dir: Path | None = None) -> Trained:
    """Fine-tune the FCNN on incomplete images and train the detached PC network."""
    opt_f = G.RmsProp(model.fcnn, lr=cfg.lr2)
    opt_pc = G.RmsProp(model.pc, lr=cfg.pc_lr)
    order_rng = np.random.default_rng(cfg.seed + 2)
    fh, sink = _loss_writer(out_dir / "loss_step2.csv" if out_dir else None)
    history = []
    step = 0
    try:
        for epoch in range(cfg.epochs2):
            t0 = time.perf_counter()
            opt_f.lr = lr_at(cfg, epoch, cfg.lr2)
            opt_pc.lr = lr_at(cfg, epoch, cfg.pc_lr)
            data = step2_epoch_data(train, cfg, epoch)
            perm = order_rng.permutation(len(train))
            sums: dict[str, float] = {}
            for i in range(0, len(perm), cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                has = data.has_3d[idx]
                with G.Tape() as tape:
                    outs = N.fcnn_forward(data.images[idx], model.fcnn, cfg.fcnn)
                    est = E.decode_tensor(outs[-1])
                    total, parts = L.total_loss(outs, est.pose, None, data.maps[idx],
                                                data.pose3d[idx], has, cfg.loss)
                    # same tape, so a missing detach would show up in the check below
                    comp = N.pc_complement(est, model.pc)
                    l_cp = L.pose_term(comp.pose, data.pose3d[idx], has, cfg.loss)
                g_f = tape.backward(total)
                g_pc = tape.backward(l_cp)
                assert_detached(g_pc, model.fcnn)
                snapshot = {k: p.data.tobytes() for k, p in model.fcnn.items()}
                opt_pc.step(g_pc)
                for k, p in model.fcnn.items():
                    if p.data.tobytes() != snapshot[k]:
                        raise DetachmentError(f"PC update changed FCNN parameter {k}")
                opt_f.step(g_f)
                parts["cp3d"] = l_cp.item() / cfg.loss.pose_scale
                L.write_loss_rows(sink, step, parts, epoch)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                step += 1
            row = {"step": 2, "epoch": epoch, "lr": opt_f.lr,
                   **{f"loss_{k}": v / len(train) for k, v in sums.items()}}
            if val:
                row["val_mpjpe"], row["val_mpjpe_pc"] = mpjpe_of(model, val)
            history.append(row)
            log.info("step2 epoch %d loss %.4f cp3d %.1f (%.1fs)", epoch, row["loss_total"],
                     row["loss_cp3d"], time.perf_counter() - t0)
    finally:
        if fh:
            fh.close()
    return Trained(model, history)


# --------------------------------------------------------------------------- evaluation

@dataclass
class SweepRow:
    condition: str
    stage: str                 # "before_pc" or "after_pc"
    report: M.EvalReport
    per_seed: list[float]


def _mean_report(reports: list[M.EvalReport]) -> M.EvalReport:
    return M.EvalReport(
        mpjpe=float(np.mean([r.mpjpe for r in reports])),
        pa_mpjpe=float(np.mean([r.pa_mpjpe for r in reports])),
        pck150=float(np.mean([r.pck150 for r in reports])),
        auc=float(np.mean([r.auc for r in reports])),
        per_joint=np.mean([r.per_joint for r in reports], axis=0),
    )


def perturbed_images(samples: list[S.Sample], spec: P.PerturbSpec, seed: int) -> np.ndarray:
    return np.stack([P.apply(spec, s.image, P.item_rng(seed, i))[0] for i, s in enumerate(samples)])


def evaluate(model: N.Model, samples: list[S.Sample], spec: P.PerturbSpec, seed: int
             ) -> tuple[M.EvalReport, M.EvalReport]:
    """Before-PC and after-PC reports for one perturbation draw."""
    gts = np.stack([s.pose3d for s in samples]).astype(np.float64)
    before, after = predict(model, perturbed_images(samples, spec, seed))
    return M.evaluate(before, gts), M.evaluate(after, gts)


def eval_sweep(model: N.Model, samples: list[S.Sample], specs, n_seeds: int = 5,
               seed: int = 7) -> list[SweepRow]:
    """Every condition averaged over ``n_seeds`` perturbation draws.

    Draw ``r`` uses seed ``seed + r + spec.seed`` for every condition, so
    conditions differing only in strength share their random numbers.
    """
    specs = list(specs)
    if not specs or specs[0].kind != "none":
        specs = [P.PerturbSpec("none")] + [s for s in specs if s.kind != "none"]
    rows = []
    for spec in specs:
        draws = [evaluate(model, samples, spec, seed + r + spec.seed) for r in range(n_seeds)]
        for k, stage in enumerate(("before_pc", "after_pc")):
            reps = [d[k] for d in draws]
            rows.append(SweepRow(spec.name, stage, _mean_report(reps), [r.mpjpe for r in reps]))
    return rows


def write_sweep(out_dir: Path, rows: list[SweepRow]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    triples = [(r.condition, r.stage, r.report) for r in rows]
    csv_path = out_dir / "eval.csv"
    M.write_report_csv(csv_path, triples)
    seeds_path = out_dir / "eval_seeds.csv"
    with open(seeds_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "stage", "seed_index", "mpjpe"])
        for r in rows:
            for i, v in enumerate(r.per_seed):
                w.writerow([r.condition, r.stage, i, f"{v:.6f}"])
    table_path = out_dir / "eval_table.txt"
    table_path.write_text("\n\n".join(
        f"{metric}\n" + M.format_table(triples, metric) for metric in ("mpjpe", "pa_mpjpe", "pck150", "auc")
    ) + "\n")
    return [csv_path, seeds_path, table_path]


# --------------------------------------------------------------------------- artifacts

def save_model(model: N.Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    G.save_checkpoint(path, model.all_params())
    path.with_name(path.name + ".fcnn.json").write_text(model.cfg.to_json() + "\n")
    return path


def load_model(path) -> N.Model:
    path = Path(path)
    cfg = N.FcnnConfig.from_dict(json.loads(path.with_name(path.name + ".fcnn.json").read_text()))
    arrays = G.load_checkpoint(path)
    model = N.Model(cfg, {}, {})
    for k, v in arrays.items():
        t = G.Tensor(v, requires_grad=True)
        if k.startswith("fcnn."):
            model.fcnn[k[5:]] = t
        else:
            model.pc[k] = t
    expect = N.Model.create(cfg)
    if set(model.fcnn) != set(expect.fcnn) or set(model.pc) != set(expect.pc):
        raise ValueError(f"{path}: parameter names do not match the architecture")
    return model


def write_history(path, history: list[dict]) -> Path:
    keys: list[str] = []
    for row in history:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return Path(path)


def write_manifest(run_dir, cfg: ExperimentConfig | None, command: str) -> Path:
    """List every file under ``run_dir`` with its SHA-256, plus the config."""
    run_dir = Path(run_dir)
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(run_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    man = {"package": "orientpose", "version": __version__, "command": command,
           "config": cfg.to_dict() if cfg else None, "files": files}
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def render_overlays(model: N.Model, samples: list[S.Sample], out_dir, cfg: S.SynthConfig,
                    count: int = 4) -> list[Path]:
    """Input image with GT (green) and predicted (red) joints, plus predicted map channels."""
    from PIL import Image, ImageDraw

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    scale = 4
    for i, s in enumerate(samples[:count]):
        x = s.image[None].transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        maps = N.fcnn_forward(x, model.fcnn, model.cfg)[-1].data[0]
        est = E.decode_tensor(G.Tensor(maps[None].astype(np.float64)))
        pred = est.pose.data[0]
        img = Image.fromarray(s.image).resize((cfg.image_size * scale,) * 2, Image.NEAREST)
        draw = ImageDraw.Draw(img)
        gt2 = S.map_to_image(s.pose2d, cfg.stride)
        pr2 = S.project(pred, cfg.camera) + (gt2[0] - S.project(s.pose3d, cfg.camera)[0])
        for pts, colour in ((gt2, (0, 255, 0)), (pr2, (255, 0, 0))):
            for px, py in pts:
                cx, cy = (px + 0.5) * scale, (py + 0.5) * scale
                draw.ellipse([cx - 3, cy - 3, cx + 3, cy + 3], outline=colour)
        p = out_dir / f"sample{i:02d}_overlay.png"
        img.save(p)
        written.append(p)
        written += dump_debug_images(MapSet.from_array(maps), out_dir / f"sample{i:02d}_maps")
    return written


@dataclass
class RunResult:
    model: N.Model
    history: list[dict]
    rows: list[SweepRow] | None = None


def run_experiment(cfg: ExperimentConfig, run_dir, steps=(1, 2), sweep: bool = True,
                   model: N.Model | None = None) -> RunResult:
    """Train the requested steps, sweep, and write everything under ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json() + "\n")
    train, val = load_data(cfg)
    history: list[dict] = []
    if 1 in steps:
        res = train_step1(cfg, train, val, model, run_dir)
        model = res.model
        history += res.history
        save_model(model, run_dir / "step1.ckpt")
        write_history(run_dir / "history_step1.csv", res.history)
    if 2 in steps:
        if model is None:
            raise ConfigError("step 2 needs a step-1 model")
        res = train_step2(cfg, train, model, val, run_dir)
        history += res.history
        save_model(model, run_dir / "step2.ckpt")
        write_history(run_dir / "history_step2.csv", res.history)
    rows = None
    if sweep and model is not None:
        rows = eval_sweep(model, val, cfg.eval_perturbations, cfg.eval_seeds, cfg.eval_seed)
        write_sweep(run_dir, rows)
    write_manifest(run_dir, cfg, f"train steps={list(steps)}")
    return RunResult(model, history, rows)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
