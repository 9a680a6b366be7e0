"""Data generation, search, training and evaluation for both networks.

Every source of randomness is a named sub-stream of one root seed, so each
stage is reproducible on its own.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import checkpoint
from .autodiff import Tensor, backward, no_record, record
from .bilevel import (AdamState, DivergenceError, NonFiniteGradient, SearchConfig, StepRecord,
                      adam_step, eval_loss, search_loop)
from .metrics import EvalReport, intensity_error, mae_light, mae_normal
from .networks import (LIGHT_LAYOUT, NORMAL_LAYOUT, LightNet, LightNetConfig, NormalNet,
                       NormalNetConfig, auxiliary_train_loss, encode_lights, light_loss,
                       normal_loss, normal_net_input, normalize_images, predict_lights)
from .scene import (NUM_DIHEDRAL, Dataset, NoiseSpec, PSObservation, dihedral,
                    generate_blob_scene, render, sample_upper_hemisphere, write_scene)
from .search_space import ArchParams, Genotype, discretize, parse_genotype, serialize_genotype

log = logging.getLogger(__name__)

NETWORKS = ("light", "normal")
SPLITS = ("search-train", "search-val", "train", "val", "test")


class OutputExists(ValueError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose under the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(name.encode())))


def prepare_output(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise OutputExists(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_config(path: Path, command: str, config: dict) -> None:
    payload = {"command": command, **config}
    (Path(path) / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True,
                                                       default=str) + "\n")


# ------------------------------------------------------------------ data

@dataclass
class DataConfig:
    seed: int = 0
    scenes: int = 60
    resolution: int = 32
    lights: int = 8
    test_lights: int = 96
    blobs: tuple[int, int] = (1, 3)
    noise: float = 0.0
    search_fraction: float = 0.2
    search_val_fraction: float = 0.2
    train_fraction: float = 0.4
    val_fraction: float = 0.05

    def split_counts(self) -> dict[str, int]:
        search = round(self.scenes * self.search_fraction)
        search_val = round(search * self.search_val_fraction)
        train = round(self.scenes * self.train_fraction)
        val = round(self.scenes * self.val_fraction)
        counts = {"search-train": search - search_val, "search-val": search_val,
                  "train": train, "val": val, "test": self.scenes - search - train - val}
        if min(counts.values()) < 1:
            raise ValueError(f"{self.scenes} scenes leave an empty split: {counts}")
        return counts


def generate_dataset(out: Path, cfg: DataConfig, force: bool = False) -> Path:
    if cfg.resolution < 8 or cfg.lights < 1 or cfg.test_lights < 1:
        raise ValueError("resolution must be >= 8 and light counts >= 1")
    lo, hi = cfg.blobs
    if not 1 <= lo <= hi:
        raise ValueError(f"bad blob count range {cfg.blobs}")
    counts = cfg.split_counts()
    out = prepare_output(out, force)
    splits: dict[str, list[str]] = {}
    index = 0
    for split in SPLITS:
        ids = []
        for _ in range(counts[split]):
            scene_id = f"s{index:04d}"
            rng = stream(cfg.seed, f"data/{scene_id}")
            scene = generate_blob_scene(cfg.resolution, int(rng.integers(lo, hi + 1)), rng)
            lights = sample_upper_hemisphere(cfg.test_lights if split == "test" else cfg.lights, rng)
            obs = render(scene, lights, NoiseSpec(cfg.noise), rng)
            write_scene(out / "scenes" / scene_id, obs, {"split": split, "id": scene_id})
            ids.append(scene_id)
            index += 1
        splits[split] = ids
    manifest = {"format": "psnas-dataset", "version": 1, "splits": splits,
                "resolution": cfg.resolution}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_config(out, "gen-data", asdict(cfg))
    log.info("wrote %d scenes to %s (%s)", index, out, counts)
    return out


# ----------------------------------------------------------------- tasks

@dataclass
class LightBatch:
    images: np.ndarray  # [B*n,1,H,W]
    masks: np.ndarray  # [B,H,W]
    targets: tuple[np.ndarray, np.ndarray, np.ndarray]
    set_size: int


@dataclass
class NormalBatch:
    inputs: np.ndarray  # [B*n,6,H,W]
    normals: np.ndarray  # [B,3,H,W]
    masks: np.ndarray
    set_size: int


def _set_size(scenes: Sequence[PSObservation]) -> int:
    sizes = {o.num_images for o in scenes}
    if len(sizes) != 1:
        raise ValueError(f"scenes in a batch must share the image count, got {sorted(sizes)}")
    return sizes.pop()


def _require_truth(obs: PSObservation) -> None:
    if obs.lights is None or obs.scene is None:
        raise ValueError("training scenes need ground-truth lights and normals")


class LightTask:
    name = "light"
    layout = LIGHT_LAYOUT

    @staticmethod
    def build(genotype: Genotype | None, channels: int, rng, dtype=np.float32) -> LightNet:
        return LightNet(LightNetConfig(channels=channels), genotype, rng=rng, dtype=dtype)

    @staticmethod
    def batch(scenes: Sequence[PSObservation], dtype=np.float32) -> LightBatch:
        for o in scenes:
            _require_truth(o)
        targets = [encode_lights(o.lights) for o in scenes]
        return LightBatch(np.concatenate([o.images for o in scenes]).astype(dtype),
                          np.stack([o.mask for o in scenes]),
                          tuple(np.concatenate(t) for t in zip(*targets)), _set_size(scenes))

    @staticmethod
    def loss(net, b: LightBatch, alpha=None, train: bool = True):
        return light_loss(net(Tensor(b.images), b.masks, b.set_size, alpha), b.targets)


class NormalTask:
    name = "normal"
    layout = NORMAL_LAYOUT

    def __init__(self, lambda_aux: float = 0.4):
        self.lambda_aux = lambda_aux

    @staticmethod
    def build(genotype: Genotype | None, channels: int, rng, dtype=np.float32) -> NormalNet:
        return NormalNet(NormalNetConfig(channels=channels), genotype, rng=rng, dtype=dtype)

    @staticmethod
    def batch(scenes: Sequence[PSObservation], dtype=np.float32) -> NormalBatch:
        inputs = []
        for o in scenes:
            _require_truth(o)
            imgs = normalize_images(o.images, o.mask, o.lights.intensities)
            inputs.append(normal_net_input(imgs.astype(dtype), o.lights.directions.astype(dtype)))
        return NormalBatch(np.concatenate(inputs), np.stack([o.scene.normals for o in scenes]),
                           np.stack([o.mask for o in scenes]), _set_size(scenes))

    def loss(self, net, b: NormalBatch, alpha=None, train: bool = True):
        x = Tensor(b.inputs)
        if train and not net.searchable:
            pred, aux = net(x, b.set_size, alpha, with_aux=True)
            return auxiliary_train_loss(pred, aux, b.normals, b.masks, self.lambda_aux)
        return normal_loss(net(x, b.set_size, alpha), b.normals, b.masks)


def make_task(name: str, lambda_aux: float = 0.4):
    if name == "light":
        return LightTask()
    if name == "normal":
        return NormalTask(lambda_aux)
    raise ValueError(f"network must be one of {NETWORKS}, got {name!r}")


def chunks(items: Sequence, size: int) -> list[list]:
    if size < 1:
        raise ValueError("batch size must be >= 1")
    return [list(items[i:i + size]) for i in range(0, len(items), size)]


# ---------------------------------------------------------------- search

class SupernetProblem:
    """Adapter exposing a supernet and its task to the bilevel optimizer."""

    def __init__(self, task, net, alpha: ArchParams):
        self.task, self.net, self.alpha = task, net, alpha

    def weight_params(self):
        return self.net.parameters()

    def arch_params(self):
        return self.alpha.tensors()

    def buffers(self):
        return [b for _, b in self.net.named_buffers()]

    def loss(self, batch):
        return self.task.loss(self.net, batch, self.alpha, train=False)


@dataclass
class SearchRunConfig:
    network: str = "light"
    seed: int = 0
    epochs: int = 3
    batch_size: int = 4
    order: str = "second"
    xi: float | None = None
    fd_scale: float = 0.01
    channels: int = 8
    exclude_zero: bool = True

    def search_config(self) -> SearchConfig:
        return SearchConfig(epochs=self.epochs, order=self.order, xi=self.xi,
                            fd_scale=self.fd_scale)


def run_search(data_dir: Path, out: Path, cfg: SearchRunConfig, force: bool = False) -> Genotype:
    task = make_task(cfg.network)
    scfg = cfg.search_config()
    ds = Dataset.open(data_dir)
    train_scenes = ds.load_split("search-train")
    val_scenes = ds.load_split("search-val")
    out = prepare_output(out, force)
    write_config(out, "search", {**asdict(cfg), "data": str(data_dir),
                                 "effective_xi": scfg.effective_xi, "optimizer": asdict(scfg)})
    init = stream(cfg.seed, f"init/search/{cfg.network}")
    net = task.build(None, cfg.channels, init)
    alpha = ArchParams.initial(init)
    problem = SupernetProblem(task, net, alpha)
    val_batches = [task.batch(c) for c in chunks(val_scenes, cfg.batch_size)]

    def train_batches(epoch):
        order = stream(cfg.seed, f"batching/search/{cfg.network}/{epoch}").permutation(len(train_scenes))
        return [task.batch([train_scenes[i] for i in c]) for c in chunks(order, cfg.batch_size)]

    rows: list[StepRecord] = []
    initial_val = eval_loss(problem, val_batches)
    log.info("%s search: initial validation loss %.4f", cfg.network, initial_val)
    start = time.perf_counter()

    def on_step(r: StepRecord):
        rows.append(r)
        log.info("%s search epoch %d step %d: L_train %.4f L_val %.4f", cfg.network, r.epoch,
                 r.step, r.train_loss, r.val_loss)

    def save_state(path: Path, step: int, arrays: dict[str, np.ndarray] | None = None):
        arrays = arrays or {**{f"w.{n}": p.data for n, p in net.named_parameters()},
                            **{f"b.{n}": b for n, b in net.named_buffers()},
                            "alpha.normal": alpha.normal.data, "alpha.reduction": alpha.reduction.data}
        checkpoint.save(path, arrays, {"network": cfg.network, "step": step, "seed": cfg.seed})

    try:
        search_loop(problem, train_batches, lambda e: val_batches, scfg, on_step=on_step,
                    on_epoch=lambda e: save_state(out / "search.ckpt", len(rows)))
    except DivergenceError as exc:
        _write_search_log(out, rows)
        if exc.last_good is not None:
            names = [n for n, _ in net.named_parameters()]
            arrays = {f"w.{n}": a for n, a in zip(names, exc.last_good["weights"])}
            arrays.update({"alpha.normal": exc.last_good["arch"][0],
                           "alpha.reduction": exc.last_good["arch"][1]})
            save_state(out / "last_good.ckpt", len(rows), arrays)
        raise
    _write_search_log(out, rows)
    final_val = eval_loss(problem, val_batches)
    genotype = discretize(alpha, cfg.exclude_zero, channels=cfg.channels, layout=task.layout)
    (out / "genotype.txt").write_text(serialize_genotype(genotype))
    summary = {"initial_val_loss": initial_val, "final_val_loss": final_val, "steps": len(rows),
               "seconds": time.perf_counter() - start}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("%s search done: validation loss %.4f -> %.4f", cfg.network, initial_val, final_val)
    return genotype


def _write_search_log(out: Path, rows: list[StepRecord]) -> None:
    with open(out / "search_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "L_train", "L_val"])
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.train_loss), repr(r.val_loss)])


# ----------------------------------------------------------------- train

@dataclass
class TrainRunConfig:
    network: str = "light"
    seed: int = 0
    epochs: int | None = None  # None: 6 for the light net, 3 for the normal net
    batch_size: int | None = None  # None: 4 for the light net, 1 for the normal net
    lr: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weight_decay: float = 3e-4
    lambda_aux: float = 0.4
    augment: bool = False

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 6 if self.network == "light" else 3

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 4 if self.network == "light" else 1


def save_network(path: Path, net, network: str, genotype: Genotype, meta: dict[str, Any]) -> None:
    metadata = {"network": network, "genotype": serialize_genotype(genotype),
                "net_config": net.config.to_dict(), **meta}
    checkpoint.save(path, net.state_dict(), metadata)


def load_network(path: Path, expect: str | None = None):
    arrays, meta = checkpoint.load(path)
    network = meta.get("network")
    if network not in NETWORKS:
        raise checkpoint.CheckpointError(f"{path}: not a network checkpoint")
    if expect is not None and network != expect:
        raise checkpoint.CheckpointError(f"{path} holds the {network} network, expected {expect}")
    genotype = parse_genotype(meta["genotype"])
    if network == "light":
        net = LightNet(LightNetConfig(**meta["net_config"]), genotype, rng=np.random.default_rng(0))
    else:
        net = NormalNet(NormalNetConfig(**meta["net_config"]), genotype, rng=np.random.default_rng(0))
    net.load_state_dict(arrays)
    net.eval()
    return net, meta


def mean_loss(task, net, batches) -> float:
    """Eval-mode mean of the plain task loss over batches."""
    net.eval()
    with no_record():
        values = [float(task.loss(net, b, train=False).data) for b in batches]
    net.train()
    return float(np.mean(values))


def run_train(data_dir: Path, genotype_path: Path, out: Path, cfg: TrainRunConfig,
              force: bool = False) -> dict[str, Any]:
    task = make_task(cfg.network, cfg.lambda_aux)
    text = Path(genotype_path).read_text() if Path(genotype_path).is_file() else None
    if text is None:
        raise ValueError(f"genotype file {genotype_path} does not exist")
    genotype = parse_genotype(text)
    if genotype.layout and tuple(genotype.layout) != task.layout:
        raise ValueError(f"genotype layout {genotype.layout} is not a {cfg.network} network layout")
    ds = Dataset.open(data_dir)
    train_scenes = ds.load_split("train")
    val_batches = [task.batch(c) for c in chunks(ds.load_split("val"), cfg.resolved_batch_size)]
    out = prepare_output(out, force)
    write_config(out, "train", {**asdict(cfg), "epochs": cfg.resolved_epochs,
                                "batch_size": cfg.resolved_batch_size,
                                "data": str(data_dir), "genotype": str(genotype_path)})
    (out / "genotype.txt").write_text(text)
    net = task.build(genotype, genotype.channels, stream(cfg.seed, f"init/train/{cfg.network}"))
    params = net.parameters()
    state = AdamState(cfg.lr, tuple(cfg.betas), cfg.weight_decay)

    train_eval = [task.batch(c) for c in chunks(train_scenes, cfg.resolved_batch_size)]
    initial_train = mean_loss(task, net, train_eval)
    best_val = mean_loss(task, net, val_batches)
    log.info("%s train: initial train loss %.4f, validation loss %.4f", cfg.network,
             initial_train, best_val)
    save_network(out / "best.ckpt", net, cfg.network, genotype,
                 {"epoch": -1, "step": 0, "seed": cfg.seed, "val_loss": best_val})
    rows, step = [], 0
    for epoch in range(cfg.resolved_epochs):
        order = stream(cfg.seed, f"batching/train/{cfg.network}/{epoch}").permutation(len(train_scenes))
        aug = stream(cfg.seed, f"augment/{cfg.network}/{epoch}")
        for c in chunks(order, cfg.resolved_batch_size):
            scenes = [train_scenes[i] for i in c]
            if cfg.augment:
                scenes = [dihedral(o, int(k)) for o, k in zip(scenes, aug.integers(0, NUM_DIHEDRAL, len(c)))]
            batch = task.batch(scenes)
            with record():
                loss = task.loss(net, batch)
                backward(loss)
            value = float(loss.data)
            if not np.isfinite(value) or value > 1e4:
                raise DivergenceError(f"training loss {value} at step {step}")
            try:
                # parameters the loss never touched (the auxiliary head) count as zero gradient
                adam_step(params, [np.zeros_like(p.data) if p.grad is None else p.grad
                                   for p in params], state)
            except NonFiniteGradient as exc:
                raise DivergenceError(f"step {step}: {exc}") from exc
            for p in params:
                p.grad = None
            rows.append((epoch, step, value))
            step += 1
        val = mean_loss(task, net, val_batches)
        log.info("%s train epoch %d: last batch loss %.4f, validation loss %.4f", cfg.network,
                 epoch, rows[-1][2], val)
        rows.append((epoch, "val", val))
        meta = {"epoch": epoch, "step": step, "seed": cfg.seed, "val_loss": val}
        save_network(out / "last.ckpt", net, cfg.network, genotype, meta)
        if val < best_val:
            best_val = val
            save_network(out / "best.ckpt", net, cfg.network, genotype, meta)
    with open(out / "train_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "loss"])
        w.writerows([(e, s, repr(v)) for e, s, v in rows])
    summary = {"initial_train_loss": initial_train, "final_train_loss": mean_loss(task, net, train_eval),
               "best_val_loss": best_val, "steps": step}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# ------------------------------------------------------------- inference

@dataclass
class SceneResult:
    light: Any  # LightEstimate
    normals: np.ndarray  # [3,H,W]
    mask: np.ndarray


def infer_scene(light_net: LightNet, normal_net: NormalNet, obs: PSObservation,
                gt_lights: bool = False) -> SceneResult:
    """Two-stage inference: estimate lights, then normals from images plus lights."""
    light_net.eval()
    normal_net.eval()
    images = obs.images.astype(np.float32)
    with no_record():
        est = predict_lights(light_net, images, obs.mask)
        if gt_lights:
            if obs.lights is None:
                raise ValueError("ground-truth lights requested but the scene has none")
            dirs, e = obs.lights.directions, obs.lights.intensities
        else:
            dirs, e = est.directions, est.intensity
        inputs = normal_net_input(normalize_images(images, obs.mask, e), dirs.astype(np.float32))
        normals = normal_net(Tensor(inputs), obs.num_images).data[0]
    return SceneResult(est, normals, obs.mask)


def evaluate(light_net, normal_net, scenes: Sequence[PSObservation], ids: Sequence[str],
             num_images: int | None = None, gt_lights: bool = False) -> EvalReport:
    per_object, lights, errs, normals, pixels = {}, [], [], [], 0
    k_used = None
    for scene_id, obs in zip(ids, scenes):
        if obs.lights is None or obs.scene is None:
            raise ValueError(f"{scene_id}: evaluation needs ground truth")
        k = obs.num_images if num_images is None else num_images
        if not 1 <= k <= obs.num_images:
            raise ValueError(f"{scene_id}: asked for {k} images, scene has {obs.num_images}")
        obs = obs.subset(slice(0, k))
        res = infer_scene(light_net, normal_net, obs, gt_lights)
        row = {"MAE_light": mae_light(res.light.directions, obs.lights.directions),
               "E_err": intensity_error(res.light.intensity, obs.lights.intensities),
               "MAE_normal": mae_normal(res.normals, obs.scene.normals, obs.mask)}
        per_object[scene_id] = row
        lights.append(row["MAE_light"])
        errs.append(row["E_err"])
        normals.append(row["MAE_normal"])
        pixels += int(obs.mask.sum())
        k_used = k
    if not per_object:
        raise ValueError("no scenes to evaluate")
    report = EvalReport(float(np.mean(lights)), float(np.mean(errs)), float(np.mean(normals)),
                        k_used, pixels, per_object)
    report.validate()
    return report


def run_eval(light_ckpt: Path, normal_ckpt: Path, data_dir: Path, out: Path,
             num_images: int | None = None, gt_lights: bool = False, split: str = "test",
             force: bool = False) -> EvalReport:
    light_net, _ = load_network(light_ckpt, "light")
    normal_net, _ = load_network(normal_ckpt, "normal")
    ds = Dataset.open(data_dir)
    ids = ds.scene_ids(split)
    scenes = [ds.load(i) for i in ids]
    if num_images is not None and num_images > min(o.num_images for o in scenes):
        raise ValueError(f"--num-images {num_images} exceeds the images available "
                         f"({min(o.num_images for o in scenes)})")
    out = prepare_output(out, force)
    write_config(out, "eval", {"light_ckpt": str(light_ckpt), "normal_ckpt": str(normal_ckpt),
                               "data": str(data_dir), "num_images": num_images,
                               "gt_lights": gt_lights, "split": split})
    report = evaluate(light_net, normal_net, scenes, ids, num_images, gt_lights)
    (out / "report.txt").write_text(report.to_text())
    return report


def run_infer(light_ckpt: Path, normal_ckpt: Path, images_dir: Path, out: Path,
              force: bool = False) -> SceneResult:
    from .scene import read_scene

    light_net, _ = load_network(light_ckpt, "light")
    normal_net, _ = load_network(normal_ckpt, "normal")
    obs = read_scene(images_dir)
    out = prepare_output(out, force)
    write_config(out, "infer", {"light_ckpt": str(light_ckpt), "normal_ckpt": str(normal_ckpt),
                                "images": str(images_dir)})
    res = infer_scene(light_net, normal_net, obs)
    (out / "lights.txt").write_text(res.light.to_text())
    np.ascontiguousarray(res.normals, dtype="<f4").tofile(out / "normals.f32")
    np.ascontiguousarray(res.mask, dtype="<f4").tofile(out / "mask.f32")
    meta = {"format": "psnas-normals", "version": 1, "dtype": "<f4",
            "arrays": {"normals": list(res.normals.shape), "mask": list(res.mask.shape)}}
    (out / "normals.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return res
