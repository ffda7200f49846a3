"""Training harness: FP32 pretraining, QAT fine-tuning, evaluation, sweeps.

Every run is fully determined by its RunConfig: seeds drive dataset
generation, weight init, and batch order, so reruns reproduce every
emitted number bit-exactly. Run outputs land in a per-run directory named
by the config hash: config.json, record.json, weights.bin, report CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ShapeScene, dataset_id, generate_dataset
from .detector import (DetectorNet, GroundTruth, cell_centers, assign_targets,
                       decode, iou_tensor, FIRST_LAYER, HEAD_OUTPUT_LAYERS,
                       NUM_CLASSES, GRID_CELLS)
from .evaluation import APResult, HarmonyReport, harmony_report, map_coco
from .losses import (LossConfig, LossMode, LossBreakdown, PositiveBatch,
                     focal_cls_loss, giou_loss, hqod_total)
from .quantize import (BitPolicy, QuantMode, QuantizedConv, MIN_STEP,
                       FULL_PRECISION_BITS)

VAL_SEED_OFFSET = 10_000


@dataclass
class RunConfig:
    seed: int = 0
    train_size: int = 2000
    val_size: int = 500
    fp32_epochs: int = 30
    qat_epochs: int = 20
    batch_size: int = 16
    fp32_lr: float = 1e-3
    qat_lr: float = 1e-4
    step_lr_scale: float = 0.1   # quantizer steps learn 10x slower than weights
    optimizer: str = "adam"
    bit_width: int = 32
    quant_mode: str = "LSQ"
    loss_mode: str = "BASELINE"
    gamma: float = 0.8
    sigma: float = 1.5
    out_dir: str = "runs"

    def loss_config(self) -> LossConfig:
        return LossConfig(mode=LossMode(self.loss_mode),
                          gamma=self.gamma, sigma=self.sigma)

    def bit_policy(self) -> BitPolicy:
        overrides = {}
        if self.bit_width != FULL_PRECISION_BITS:
            overrides = {FIRST_LAYER: 8, **{n: 8 for n in HEAD_OUTPUT_LAYERS}}
        return BitPolicy(global_bits=self.bit_width, overrides=overrides,
                         mode=QuantMode(self.quant_mode))

    def validate(self):
        if self.train_size <= 0 or self.val_size <= 0 or self.batch_size <= 0:
            raise ValueError("dataset and batch sizes must be positive")
        if self.bit_width not in (2, 3, 4, 8, FULL_PRECISION_BITS):
            raise ValueError(f"unsupported bit width {self.bit_width}")
        QuantMode(self.quant_mode)
        LossMode(self.loss_mode)
        if self.fp32_lr <= 0 or self.qat_lr <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


CONFIG_KEYS = set(RunConfig().to_dict())


def parse_config_file(path) -> dict:
    """Flat key = value text config; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
    return values


def run_config_from_file(path) -> RunConfig:
    raw = parse_config_file(path)
    cfg = RunConfig()
    for key, val in raw.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            parsed = val.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            parsed = int(val)
        elif isinstance(current, float):
            parsed = float(val)
        else:
            parsed = val
        setattr(cfg, key, parsed)
    cfg.validate()
    return cfg


# -- optimizer ----------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- batch loss construction ---------------------------------------------------


def batch_loss(net: DetectorNet, scenes: Sequence[ShapeScene],
               loss_cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Forward a batch of scenes and assemble the mode-selected objective."""
    images = np.stack([s.image for s in scenes])[:, None]
    cls_logits, offsets = net.forward(images)
    scores = cls_logits.sigmoid()
    b = len(scenes)
    hw = GRID_CELLS * GRID_CELLS
    centers = cell_centers()

    targets = np.zeros((b, hw, NUM_CLASSES))
    pos_rows: list[int] = []      # flattened b*hw indices of positive cells
    pos_cls: list[int] = []
    gt_boxes: list[np.ndarray] = []
    pos_mask = np.zeros((b, hw), dtype=bool)
    for n, scene in enumerate(scenes):
        pos, gt_idx, _neg = assign_targets(scene.gts)
        for cell, gi in zip(pos, gt_idx):
            gt = scene.gts[gi]
            targets[n, cell, gt.class_id] = 1.0
            pos_rows.append(n * hw + cell)
            pos_cls.append(gt.class_id)
            gt_boxes.append(gt.box.as_array())
            pos_mask[n, cell] = True

    p_count = len(pos_rows)
    n_count = b * hw - p_count

    # elementwise focal loss, then split the per-cell sums into pos/neg parts
    flat_scores = scores.reshape(b * hw, NUM_CLASSES)
    flat_targets = targets.reshape(b * hw, NUM_CLASSES)
    per_elem = _focal_elementwise(flat_scores, flat_targets,
                                  loss_cfg.focal_gamma, loss_cfg.focal_alpha,
                                  loss_cfg.eps)
    per_cell = per_elem.sum(axes=1)
    neg_rows = np.nonzero(~pos_mask.reshape(-1))[0]
    neg_cls_loss = per_cell.take(neg_rows).sum() if n_count else None

    if p_count:
        pos_rows_a = np.asarray(pos_rows, dtype=np.intp)
        cls_pos = per_cell.take(pos_rows_a)
        p = flat_scores.reshape(b * hw * NUM_CLASSES).take(
            pos_rows_a * NUM_CLASSES + np.asarray(pos_cls, dtype=np.intp))
        off = offsets.reshape(b * hw, 4).take(pos_rows_a, axis=0)
        l = off.take([0], axis=1).reshape(p_count)
        t = off.take([1], axis=1).reshape(p_count)
        r = off.take([2], axis=1).reshape(p_count)
        bt = off.take([3], axis=1).reshape(p_count)
        pos_centers = centers[pos_rows_a % hw]
        px1, py1, px2, py2 = decode(pos_centers, l, t, r, bt)
        gt_arr = np.stack(gt_boxes)
        u = iou_tensor(px1, py1, px2, py2, gt_arr).clamp(loss_cfg.eps, 1.0)
        reg = giou_loss(px1, py1, px2, py2, gt_arr)
        batch = PositiveBatch(p=p, u=u, cls_loss=cls_pos, reg_loss=reg,
                              neg_cls_loss=neg_cls_loss,
                              positives=p_count, negatives=n_count)
    else:
        batch = PositiveBatch(p=None, u=None, cls_loss=None, reg_loss=None,
                              neg_cls_loss=neg_cls_loss,
                              positives=0, negatives=n_count)
    return hqod_total(batch, loss_cfg)


def _focal_elementwise(scores: Tensor, targets: np.ndarray,
                       gamma: float, alpha: float, eps: float) -> Tensor:
    s = scores.clamp(eps, 1.0 - eps)
    t = Tensor(targets)
    pos = ad.power(1.0 - s, gamma) * s.log() * (-alpha)
    neg = ad.power(s, gamma) * (1.0 - s).log() * (-(1.0 - alpha))
    return t * pos + (1.0 - t) * neg


# -- weight serialization -------------------------------------------------------

_MAGIC = b"HQW1"
_MODE_TAGS = {QuantMode.FIXED: 0, QuantMode.LSQ: 1, QuantMode.TQT: 2}
_TAG_MODES = {v: k for k, v in _MODE_TAGS.items()}


def save_weights(net: DetectorNet, path):
    """Flat binary container: named float64 arrays, then per-wrapped-layer
    quantizer records (bits, signedness, mode, raw step parameters)."""
    entries = []
    for name, layer in net.layers.items():
        entries.append((f"{name}.weight", layer.weight.values))
        entries.append((f"{name}.bias", layer.bias.values))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", arr.ndim, 0))  # dtype tag 0 = float64
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        wrapped = net.quant_params_map()
        f.write(struct.pack("<I", len(wrapped)))
        for name, w in wrapped.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            for qp in (w.weight_qp, w.act_qp):
                f.write(struct.pack("<BBB", qp.bits, int(qp.signed), _MODE_TAGS[qp.mode]))
                f.write(struct.pack("<d?", float(qp.param.values), qp.initialized))


def load_weights(path) -> tuple[dict[str, np.ndarray], dict[str, dict]]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a weight container")
        (n_entries,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            ndim, dtype_tag = struct.unpack("<BB", f.read(2))
            if dtype_tag != 0:
                raise ValueError(f"unknown dtype tag {dtype_tag}")
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
        (n_q,) = struct.unpack("<I", f.read(4))
        quant: dict[str, dict] = {}
        for _ in range(n_q):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            rec = {}
            for key in ("weight", "act"):
                bits, signed, mode_tag = struct.unpack("<BBB", f.read(3))
                param, initialized = struct.unpack("<d?", f.read(9))
                rec[key] = {"bits": bits, "signed": bool(signed),
                            "mode": _TAG_MODES[mode_tag].value,
                            "param": param, "initialized": initialized}
            quant[name] = rec
    return arrays, quant


def apply_weight_arrays(net: DetectorNet, arrays: dict[str, np.ndarray]):
    for name, layer in net.layers.items():
        layer.weight.values = arrays[f"{name}.weight"].copy()
        layer.bias.values = arrays[f"{name}.bias"].copy()


def restore_quant_state(net: DetectorNet, quant: dict[str, dict]):
    for name, rec in quant.items():
        wrapper = net.wrapped.get(name)
        if wrapper is None:
            raise ValueError(f"weight file quantizes unknown/unwrapped layer {name!r}")
        for qp, key in ((wrapper.weight_qp, "weight"), (wrapper.act_qp, "act")):
            info = rec[key]
            if qp.bits != info["bits"] or qp.signed != info["signed"]:
                raise ValueError(f"quantizer mismatch for layer {name!r}")
            qp.param.values = np.asarray(info["param"], dtype=np.float64)
            qp.initialized = info["initialized"]


# -- bit policy application -----------------------------------------------------


def apply_bit_policy(net: DetectorNet, policy: BitPolicy) -> DetectorNet:
    """Wrap every conv layer with fake quantizers per the policy.

    Width 32 leaves the network untouched. Activation quantizers are
    unsigned after a ReLU and signed otherwise (the stem sees raw [0,1]
    images, which are also non-negative, so only the stem input and
    post-ReLU features end up unsigned).
    """
    for name in policy.overrides:
        if name not in net.layers:
            raise ValueError(f"bit policy overrides unknown layer {name!r}")
    if policy.global_bits == FULL_PRECISION_BITS:
        net.wrapped = {}
        return net
    layer_order = list(net.layers)
    for i, name in enumerate(layer_order):
        bits = policy.bits_for(name)
        # the input to a layer is non-negative when it is the image itself
        # or the previous layer in its branch applied a ReLU
        if name == FIRST_LAYER:
            act_signed = False
        else:
            prev = layer_order[i - 1]
            if name == "reg_conv":
                prev = "block3"  # both heads branch off the trunk
            act_signed = not net.relu_after[prev]
        net.wrapped[name] = QuantizedConv(net.layers[name], bits=bits,
                                          mode=policy.mode, act_signed=act_signed)
    return net


# -- run records ----------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    phase: str                      # "fp32" or "qat"
    epoch_losses: list[dict] = field(default_factory=list)
    ap: Optional[dict] = None
    harmony: Optional[dict] = None
    wall_time_s: float = 0.0
    step_collapse_warnings: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def _atomic_write_json(obj: dict, path: Path):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=1)
    os.replace(tmp, path)


def run_dir_for(config: RunConfig) -> Path:
    return Path(config.out_dir) / config.hash()


def load_cached_record(config: RunConfig) -> Optional[RunRecord]:
    rdir = run_dir_for(config)
    rec_path = rdir / "record.json"
    if rec_path.exists() and (rdir / "weights.bin").exists():
        with open(rec_path) as f:
            return RunRecord.from_dict(json.load(f))
    return None


# -- training loops --------------------------------------------------------------


def _train_loop(net: DetectorNet, scenes: Sequence[ShapeScene], config: RunConfig,
                loss_cfg: LossConfig, epochs: int, lr: float,
                data_rng: np.random.Generator) -> tuple[list[dict], int]:
    weight_opt = Adam(net.parameters(), lr=lr)
    quant_params = net.quant_parameters()
    quant_opt = Adam(quant_params, lr=lr * config.step_lr_scale) if quant_params else None
    quant_map = net.quant_params_map()
    epoch_losses = []
    collapse_warnings = 0
    n = len(scenes)
    for epoch in range(epochs):
        order = data_rng.permutation(n)
        sums = np.zeros(5)
        batches = 0
        for start in range(0, n, config.batch_size):
            batch = [scenes[i] for i in order[start:start + config.batch_size]]
            loss, breakdown = batch_loss(net, batch, loss_cfg)
            if not math.isfinite(breakdown.total):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch {batches} (components: {breakdown.to_dict()})")
            weight_opt.zero_grad()
            if quant_opt:
                quant_opt.zero_grad()
            loss.backward()
            weight_opt.step()
            if quant_opt:
                quant_opt.step()
                for wrapper in quant_map.values():
                    for qp in (wrapper.weight_qp, wrapper.act_qp):
                        if qp.mode == QuantMode.LSQ and float(qp.param.values) < MIN_STEP:
                            collapse_warnings += 1
                        qp.clamp_step()
            sums += [breakdown.total, breakdown.cls_component, breakdown.reg_component,
                     breakdown.tcorr_component, breakdown.hiou_component]
            batches += 1
        means = sums / max(batches, 1)
        epoch_losses.append({"epoch": epoch, "total": means[0], "cls": means[1],
                             "reg": means[2], "tcorr": means[3], "hiou": means[4]})
    return epoch_losses, collapse_warnings


def evaluate(net: DetectorNet, scenes: Sequence[ShapeScene],
             dataset_name: str = "") -> tuple[APResult, HarmonyReport]:
    """Inference + NMS over a dataset, then mAP and the harmony report."""
    all_dets = []
    all_gts = []
    batch = 32
    for start in range(0, len(scenes), batch):
        chunk = scenes[start:start + batch]
        images = np.stack([s.image for s in chunk])[:, None]
        all_dets.extend(net.predict(images))
        all_gts.extend(s.gts for s in chunk)
    ap = map_coco(all_dets, all_gts)
    report = harmony_report(all_dets, all_gts, dataset_id=dataset_name)
    return ap, report


def _finalize_run(net: DetectorNet, config: RunConfig, record: RunRecord,
                  val_scenes: Sequence[ShapeScene], val_name: str,
                  started: float) -> RunRecord:
    ap, report = evaluate(net, val_scenes, dataset_name=val_name)
    record.ap = ap.to_dict()
    record.harmony = report.to_dict()
    record.wall_time_s = time.time() - started
    rdir = run_dir_for(config)
    rdir.mkdir(parents=True, exist_ok=True)
    save_weights(net, rdir / "weights.bin")
    _atomic_write_json(config.to_dict(), rdir / "config.json")
    _atomic_write_json(record.to_dict(), rdir / "record.json")
    return record


def train_fp32(config: RunConfig, use_cache: bool = True) -> RunRecord:
    """Full-precision pretraining with the BASELINE loss."""
    config.validate()
    if config.bit_width != FULL_PRECISION_BITS:
        raise ValueError("train_fp32 requires bit_width == 32")
    if use_cache:
        cached = load_cached_record(config)
        if cached is not None:
            return cached
    started = time.time()
    train_scenes = generate_dataset(config.seed, config.train_size)
    val_scenes = generate_dataset(config.seed + VAL_SEED_OFFSET, config.val_size)
    init_ss, data_ss = np.random.SeedSequence(config.seed).spawn(2)
    net = DetectorNet(rng=np.random.default_rng(init_ss))
    loss_cfg = LossConfig(mode=LossMode.BASELINE, gamma=config.gamma, sigma=config.sigma)
    epoch_losses, _ = _train_loop(net, train_scenes, config, loss_cfg,
                                  config.fp32_epochs, config.fp32_lr,
                                  np.random.default_rng(data_ss))
    record = RunRecord(config=config.to_dict(), config_hash=config.hash(),
                       phase="fp32", epoch_losses=epoch_losses)
    return _finalize_run(net, config, record,
                         val_scenes, dataset_id(config.seed + VAL_SEED_OFFSET, config.val_size),
                         started)


def train_qat(config: RunConfig, init_weights, use_cache: bool = True) -> RunRecord:
    """QAT fine-tuning from FP32 weights under the configured bit policy and
    loss mode. init_weights is a weights.bin path from train_fp32."""
    config.validate()
    if config.bit_width == FULL_PRECISION_BITS:
        raise ValueError("train_qat requires a quantized bit width")
    if use_cache:
        cached = load_cached_record(config)
        if cached is not None:
            return cached
    started = time.time()
    arrays, _ = load_weights(init_weights)
    train_scenes = generate_dataset(config.seed, config.train_size)
    val_scenes = generate_dataset(config.seed + VAL_SEED_OFFSET, config.val_size)
    init_ss, data_ss = np.random.SeedSequence(config.seed).spawn(2)
    net = DetectorNet(rng=np.random.default_rng(init_ss))
    apply_weight_arrays(net, arrays)
    apply_bit_policy(net, config.bit_policy())
    loss_cfg = config.loss_config()
    epoch_losses, collapses = _train_loop(net, train_scenes, config, loss_cfg,
                                          config.qat_epochs, config.qat_lr,
                                          np.random.default_rng(data_ss))
    record = RunRecord(config=config.to_dict(), config_hash=config.hash(),
                       phase="qat", epoch_losses=epoch_losses,
                       step_collapse_warnings=collapses)
    return _finalize_run(net, config, record,
                         val_scenes, dataset_id(config.seed + VAL_SEED_OFFSET, config.val_size),
                         started)


def load_net_from_run(config: RunConfig) -> DetectorNet:
    rdir = run_dir_for(config)
    arrays, quant = load_weights(rdir / "weights.bin")
    net = DetectorNet(rng=np.random.default_rng(config.seed))
    apply_weight_arrays(net, arrays)
    if config.bit_width != FULL_PRECISION_BITS:
        apply_bit_policy(net, config.bit_policy())
        restore_quant_state(net, quant)
    return net


# -- sweeps ----------------------------------------------------------------------


@dataclass
class SweepConfig:
    base: RunConfig
    bit_widths: list[int] = field(default_factory=lambda: [32, 4, 2])
    quant_modes: list[str] = field(default_factory=lambda: ["LSQ"])
    loss_modes: list[str] = field(default_factory=lambda: ["BASELINE", "TCORR", "HQOD"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


def sweep_config_from_file(path) -> SweepConfig:
    raw = parse_config_file(path)
    list_keys = {"bit_widths", "quant_modes", "loss_modes", "seeds"}
    base_raw = {k: v for k, v in raw.items() if k not in list_keys}
    cfg = RunConfig()
    for key, val in base_raw.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        setattr(cfg, key, type(current)(val) if not isinstance(current, str) else val)
    sweep = SweepConfig(base=cfg)
    if "bit_widths" in raw:
        sweep.bit_widths = [int(s) for s in raw["bit_widths"].split(",")]
    if "quant_modes" in raw:
        sweep.quant_modes = [s.strip() for s in raw["quant_modes"].split(",")]
    if "loss_modes" in raw:
        sweep.loss_modes = [s.strip() for s in raw["loss_modes"].split(",")]
    if "seeds" in raw:
        sweep.seeds = [int(s) for s in raw["seeds"].split(",")]
    return sweep


def _fp32_config(base: RunConfig, seed: int) -> RunConfig:
    cfg = RunConfig(**base.to_dict())
    cfg.seed = seed
    cfg.bit_width = FULL_PRECISION_BITS
    cfg.quant_mode = "LSQ"
    cfg.loss_mode = "BASELINE"
    return cfg


def qat_config(base: RunConfig, seed: int, bit_width: int,
               quant_mode: str, loss_mode: str) -> RunConfig:
    cfg = RunConfig(**base.to_dict())
    cfg.seed = seed
    cfg.bit_width = bit_width
    cfg.quant_mode = quant_mode
    cfg.loss_mode = loss_mode
    return cfg


def ensure_fp32(base: RunConfig, seed: int, use_cache: bool = True) -> tuple[RunConfig, RunRecord]:
    cfg = _fp32_config(base, seed)
    return cfg, train_fp32(cfg, use_cache=use_cache)


def sweep(sweep_cfg: SweepConfig, use_cache: bool = True) -> list[dict]:
    """Run every (bit width x quant mode x loss mode x seed) cell; FP32 cells
    collapse over quant/loss modes. Failures are recorded and the sweep
    continues. Returns one row dict per cell."""
    rows: list[dict] = []
    for seed in sweep_cfg.seeds:
        fp32_cfg = None
        try:
            fp32_cfg, fp32_rec = ensure_fp32(sweep_cfg.base, seed, use_cache)
            if FULL_PRECISION_BITS in sweep_cfg.bit_widths:
                rows.append(_sweep_row(fp32_cfg, fp32_rec))
        except Exception as exc:  # noqa: BLE001 - sweep must continue
            rows.append({"config_hash": "", "seed": seed, "bit_width": FULL_PRECISION_BITS,
                         "error": str(exc)})
        for bw in sweep_cfg.bit_widths:
            if bw == FULL_PRECISION_BITS:
                continue
            for qmode in sweep_cfg.quant_modes:
                for lmode in sweep_cfg.loss_modes:
                    cfg = qat_config(sweep_cfg.base, seed, bw, qmode, lmode)
                    try:
                        if fp32_cfg is None:
                            raise RuntimeError("missing FP32 initialization run")
                        weights = run_dir_for(fp32_cfg) / "weights.bin"
                        rec = train_qat(cfg, weights, use_cache=use_cache)
                        rows.append(_sweep_row(cfg, rec))
                    except Exception as exc:  # noqa: BLE001
                        rows.append({"config_hash": cfg.hash(), "seed": seed,
                                     "bit_width": bw, "quant_mode": qmode,
                                     "loss_mode": lmode, "error": str(exc)})
    return rows


SWEEP_COLUMNS = (["config_hash", "seed", "bit_width", "quant_mode", "loss_mode",
                  "mAP", "AP50", "AP75", "tp_count", "mean_gap"]
                 + [f"gap_bin_{i}" for i in range(10)]
                 + [f"iou_interval_{i}" for i in range(5)]
                 + ["error"])


def _sweep_row(cfg: RunConfig, rec: RunRecord) -> dict:
    harmony = rec.harmony or {}
    row = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "bit_width": cfg.bit_width,
        "quant_mode": cfg.quant_mode,
        "loss_mode": cfg.loss_mode,
        "mAP": rec.ap["mAP"],
        "AP50": rec.ap["AP50"],
        "AP75": rec.ap["AP75"],
        "tp_count": harmony.get("tp_count", 0),
        "mean_gap": harmony.get("mean_gap"),
        "error": "",
    }
    for i, v in enumerate(harmony.get("gap_histogram", [0.0] * 10)):
        row[f"gap_bin_{i}"] = v
    for i, v in enumerate(harmony.get("iou_interval_counts", [0] * 5)):
        row[f"iou_interval_{i}"] = v
    return row


def write_sweep_csv(rows: Sequence[dict], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def export_plot_data(records: Sequence[tuple[RunConfig, RunRecord]], out_dir):
    """Dump the raw data behind the diagnostic figures as CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "tp_scatter.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "p", "u"])
        for cfg, rec in records:
            for p, u in (rec.harmony or {}).get("joint_samples", []):
                w.writerow([cfg.hash(), f"{p:.6f}", f"{u:.6f}"])
    with open(out / "gap_hist.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "bin_low", "bin_high", "count", "proportion"])
        for cfg, rec in records:
            h = rec.harmony or {}
            for i, (c, prop) in enumerate(zip(h.get("gap_counts", []),
                                              h.get("gap_histogram", []))):
                w.writerow([cfg.hash(), f"{i/10:.1f}", f"{(i+1)/10:.1f}", c, f"{prop:.6f}"])
    with open(out / "iou_intervals.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "interval_low", "interval_high", "count"])
        bounds = [(0.5, 0.6), (0.6, 0.7), (0.7, 0.8), (0.8, 0.9), (0.9, 1.0)]
        for cfg, rec in records:
            h = rec.harmony or {}
            for (lo, hi), c in zip(bounds, h.get("iou_interval_counts", [])):
                w.writerow([cfg.hash(), lo, hi, c])
    rows = [_sweep_row(cfg, rec) for cfg, rec in records]
    write_sweep_csv(rows, out / "ablation_table.csv")
