"""End-to-end model, inference and training loop.

A window of T frames runs through the cost volume per frame, the three
token streams, the fusion stack and one decoder pass over the whole window.
Configuration is a tree of dataclasses serialized as JSON; unknown keys are
rejected on load.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamW, ParamStore, Tape, load_checkpoint, ops, save_checkpoint
from .cost_volume import (
    CostVolumeConfig, absolute_inputs, anchor_costs, build_absolute_costs, build_relative_metadata,
    feature_stack, sweep_geometry,
)
from .decoder import DecoderConfig, decode
from .fusion import CueTokens, FusionConfig, encode_mono, patchify_cost_volume, tcc_stack
from .geometry import CameraView, make_hypotheses
from .objectives import DepthMap, LossBreakdown, aggregate, compute_losses, image_metrics, tae
from .prompt import (
    Availability, PromptCorruption, SparsePrompt, downsample_nearest_valid, encode_prompt,
    normalize_to_logit, sample_prompt_availability,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_hidden: int = 128
    hypotheses: int = 32
    bands: int = 6
    feature_channels: tuple[int, int] = (16, 32)
    mono_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    prompt_widths: tuple[int, int, int, int] = (8, 16, 32, 32)
    decoder_widths: tuple[int, int, int, int] = (32, 16, 8, 8)
    rel_hidden: int = 64
    abs_hidden: int = 32
    head_hidden: int = 32
    rel_feature_dim: int = 16
    abs_feature_dim: int = 16
    spatial_radius: int = 2
    temporal_radius: int = 1
    temporal: bool = True
    log_abs_costs: bool = False


@dataclass
class TrainConfig:
    steps: int = 2000
    window: int = 4
    # parameter groups: "matching" = feature extractor and cost-volume MLPs,
    # "fusion" = patchifier, prompt encoder, fusion stack and decoder,
    # "reference" = monocular image encoder
    lr_matching: float = 1e-3
    lr_fusion: float = 1e-3
    lr_reference: float = 1e-3
    matching_hold_fraction: float = 0.1
    matching_drop_factor: float = 0.1
    final_lr_factor: float = 1e-3
    weight_decay: float = 1e-4
    alpha: float = 1.0
    beta: float = 1.0
    tau_temp: float = 0.05
    modality_dropout: float = 0.5
    dropout_streams: tuple[str, ...] = ("metric", "mono")
    sample_availability: bool = True
    checkpoint_every: int = 500


@dataclass
class PipelineConfig:
    d_min: float = 1.0
    d_max: float = 20.0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corruption: PromptCorruption = field(default_factory=PromptCorruption)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m, t = self.model, self.train
        if not 0 < self.d_min < self.d_max:
            raise ConfigError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if m.dim % m.heads or m.decoder_widths[0] % m.heads:
            raise ConfigError("token widths must be divisible by the head count")
        if m.layers < 1 or m.hypotheses < 2 or m.bands < 1:
            raise ConfigError("layers >= 1, hypotheses >= 2 and bands >= 1 required")
        if t.steps < 0 or t.window < 1:
            raise ConfigError("steps >= 0 and window >= 1 required")
        if not 0 <= t.modality_dropout <= 1:
            raise ConfigError("modality_dropout must lie in [0, 1]")
        unknown = set(t.dropout_streams) - {"metric", "mono"}
        if unknown:
            raise ConfigError(f"unknown dropout streams {sorted(unknown)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from None
        return cls.from_dict(data)


def _build(kind, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(kind)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(kind(), name) if kind is not PipelineConfig else getattr(_DEFAULTS, name)
        if value is None and "None" in str(fields[name].type):
            kwargs[name] = None
        elif dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, (int, float)) and default is not None:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            if isinstance(default, int) and not isinstance(default, bool) and not float(value).is_integer():
                raise ConfigError(f"{where}.{name}: expected an integer")
            kwargs[name] = type(default)(value)
        else:
            kwargs[name] = value
    try:
        return kind(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_DEFAULTS = PipelineConfig.__new__(PipelineConfig)
for _f in dataclasses.fields(PipelineConfig):
    setattr(_DEFAULTS, _f.name, _f.default if _f.default is not dataclasses.MISSING else _f.default_factory())


def param_group(name: str) -> str:
    if name.startswith(("feat.", "pacv.")):
        return "matching"
    if name.startswith("mono."):
        return "reference"
    return "fusion"


def learning_rates(cfg: TrainConfig, step: int, total: int | None = None) -> dict[str, float]:
    """Hold-then-drop for the matching group, linear decay for the other two."""
    total = max(total or cfg.steps, 1)
    frac = min(step / total, 1.0)
    decay = 1.0 - (1.0 - cfg.final_lr_factor) * frac
    hold = step < cfg.matching_hold_fraction * total
    return {"matching": cfg.lr_matching * (1.0 if hold else cfg.matching_drop_factor),
            "fusion": cfg.lr_fusion * decay,
            "reference": cfg.lr_reference * decay}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    depths: list                    # four (T, h, w) depth tensors, fine to coarse
    logits: list
    volume: np.ndarray | None = None   # anchored cost volumes (T, 𝒟, H/4, W/4)


def _with_availability(bundle, availability: Availability | None):
    prompts = list(bundle.prompts)
    if availability is Availability.REFERENCE_ONLY:
        prompts[1:] = [SparsePrompt.empty(*p.mask.shape) for p in prompts[1:]]
    elif availability is Availability.SOURCES_ONLY:
        prompts[0] = SparsePrompt.empty(*prompts[0].mask.shape)
    elif availability == "none":
        prompts = [SparsePrompt.empty(*p.mask.shape) for p in prompts]
    return prompts


class Model:
    def __init__(self, cfg: PipelineConfig, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store or ParamStore(cfg.seed)
        self.hyp = make_hypotheses(cfg.d_min, cfg.d_max, cfg.model.hypotheses)
        m = cfg.model
        self.cv_cfg = CostVolumeConfig(m.rel_feature_dim, m.abs_feature_dim, m.rel_hidden, m.abs_hidden,
                                       m.head_hidden, tuple(m.feature_channels), m.log_abs_costs)
        self.fusion_cfg = FusionConfig(m.dim, m.layers, m.heads, m.ffn_hidden, m.spatial_radius,
                                       m.temporal_radius, True, tuple(m.mono_channels))
        self.dec_cfg = DecoderConfig(tuple(m.decoder_widths), m.heads, 2, m.bands, m.temporal)
        self._geoms: dict = {}

    def _geometry(self, ref: CameraView, src: CameraView, grid):
        key = (ref.intrinsics, ref.pose.rotation.tobytes(), ref.pose.translation.tobytes(),
               src.intrinsics, src.pose.rotation.tobytes(), src.pose.translation.tobytes(), grid)
        g = self._geoms.get(key)
        if g is None:
            g = self._geoms[key] = sweep_geometry(ref, src, self.hyp, grid)
        return g

    def forward(self, bundles: Sequence, availability: Sequence | None = None,
                drop: Sequence[str] = ()) -> ForwardOutput:
        """Depth predictions for a window of frame bundles.

        ``availability`` optionally gives one prompt-availability case per
        frame; ``drop`` names token streams to zero ("metric", "mono").
        """
        if not bundles:
            raise ValueError("need at least one frame")
        m, store, hyp = self.cfg.model, self.store, self.hyp
        t = len(bundles)
        availability = list(availability) if availability is not None else [None] * t
        views, index = [], {}
        for b in bundles:
            if not b.sources:
                raise ValueError(f"frame {b.index}: no source views")
            for v in [b.reference] + list(b.sources):
                if id(v) not in index:
                    index[id(v)] = len(views)
                    views.append(v)
        f4, f8 = feature_stack(views, store, tuple(m.feature_channels))
        _, _, h4, w4 = f4.shape
        nsrc = max(len(b.sources) for b in bundles)
        metas, abs_in, vmask = [], [], []
        prompts_all = []
        for k, b in enumerate(bundles):
            try:
                prompts = _with_availability(b, availability[k])
                prompts_all.append(prompts)
                ref_f = ops.getitem(f4, index[id(b.reference)])
                src_f = [ops.getitem(f4, index[id(s)]) for s in b.sources]
                geoms = [self._geometry(b.reference, s, (h4, w4)) for s in b.sources]
                meta = build_relative_metadata(ref_f, src_f, geoms, hyp)
                quarter = [downsample_nearest_valid(p, p.mask.shape[0] // h4) for p in prompts]
                costs, flags = build_absolute_costs(quarter, hyp, geoms, m.log_abs_costs)
                ab = absolute_inputs(costs, flags, hyp)
            except Exception as exc:
                raise type(exc)(f"frame {b.index}: {exc}") from exc
            pad = nsrc - len(b.sources)
            mask = np.ones((hyp.count, nsrc, h4 * w4), bool)
            if pad:
                dsz, _, n, c = meta.shape
                meta = ops.concat([meta, np.zeros((dsz, pad, n, c))], axis=1)
                ab = np.concatenate([ab, np.broadcast_to(ab[:, :1] * 0 - 1, (dsz, pad, n, 4))], axis=1)
                mask[:, len(b.sources):] = False
            metas.append(meta)
            abs_in.append(ab)
            vmask.append(mask)
        cv = anchor_costs(ops.concat(metas, axis=0), np.concatenate(abs_in, axis=0), store, hyp,
                          self.cv_cfg, view_mask=np.concatenate(vmask, axis=0))
        volume = ops.reshape(cv.anchored, (t, hyp.count, h4, w4))
        cv_tok = patchify_cost_volume(volume, store, m.dim)
        refs = [b.reference for b in bundles]
        mono = encode_mono(refs, store, m.dim, tuple(m.mono_channels))
        logit_prompts = [normalize_to_logit(p[0], self.cfg.d_min, self.cfg.d_max) for p in prompts_all]
        metric = encode_prompt(logit_prompts, store, m.dim, tuple(m.prompt_widths))
        metric_tok, metric_mask = metric.tokens, metric.token_mask
        if "metric" in drop:
            metric_tok, metric_mask = ops.mul(metric_tok, 0.0), np.zeros_like(metric_mask)
        if "mono" in drop:
            mono = ops.mul(mono, 0.0)
        grid = metric.grid
        tokens = CueTokens(cv_tok, mono, metric_tok, metric_mask, grid)
        fused = tcc_stack(tokens, store, self.fusion_cfg)
        ref_idx = [index[id(v)] for v in refs]
        skips = (ops.getitem(f8, ref_idx), ops.getitem(f4, ref_idx))
        out = decode(fused, grid, skips, refs, store, self.cfg.d_max, self.dec_cfg)
        return ForwardOutput(out.depths(self.cfg.d_min, self.cfg.d_max), out.scales, volume.data)

    def initialize(self, bundles: Sequence) -> None:
        """Run one forward so every parameter exists before optimization or loading."""
        self.forward(bundles[: self.cfg.train.window])

    # checkpoints -----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return self.store.state()

    def save(self, path, optimizer: AdamW | None = None, step: int = 0) -> None:
        state = self.state()
        if optimizer is not None:
            state.update(optimizer.state())
        state["__meta__/step"] = np.array([float(step)])
        save_checkpoint(path, state)

    def load(self, path, optimizer: AdamW | None = None) -> int:
        state = load_checkpoint(path)
        params = {k: v for k, v in state.items() if not k.startswith("__")}
        self.store.load_state(params)
        if optimizer is not None:
            optimizer.load_state(state)
        return int(state.get("__meta__/step", np.zeros(1))[0])


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def infer_sequence(bundles: Sequence, model: Model, window: int | None = None,
                   availability=None, drop: Sequence[str] = (), all_scales: bool = False):
    """Metric depth for every frame, decoded in consecutive windows.

    ``availability`` is one case for all frames (or None for all prompts).
    Returns a list of DepthMap, or with ``all_scales`` a list of four-scale
    lists of arrays.
    """
    if not bundles:
        raise ValueError("need at least one frame")
    window = window or model.cfg.train.window
    out = []
    for start in range(0, len(bundles), window):
        chunk = bundles[start:start + window]
        res = model.forward(chunk, [availability] * len(chunk), drop)
        for k in range(len(chunk)):
            if all_scales:
                out.append([d.data[k].copy() for d in res.depths])
            else:
                values = res.depths[0].data[k].copy()
                out.append(DepthMap(values, np.isfinite(values)))
    return out


def evaluate(preds: Sequence, bundles: Sequence, jobs: int = 1):
    """Per-image metrics and TAE of predicted depth maps against bundle ground truth."""
    arrays = [p.values if isinstance(p, DepthMap) else np.asarray(p) for p in preds]
    items = [(a, b.depth, f"frame_{b.index:04d}") for a, b in zip(arrays, bundles)]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as ex:
            per = list(ex.map(lambda it: image_metrics(*it), items))
    else:
        per = [image_metrics(*it) for it in items]
    tae_value = None
    if len(bundles) >= 2:
        tae_value = tae(arrays, [b.reference.pose for b in bundles], bundles[0].reference.intrinsics)
    return aggregate(per, tae_value)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


CURVE_FIELDS = ["step", "total", "depth", "grad", "normals", "temporal",
                "lr_matching", "lr_fusion", "lr_reference", "availability", "dropped"]


@dataclass
class TrainResult:
    model: Model
    curve: list
    checkpoint: Path | None
    seconds: float


def _step_plan(cfg: PipelineConfig, step: int, sequences: Sequence):
    """Deterministic choices for one step: sequence, window, availability, dropped streams."""
    rng = np.random.default_rng([cfg.seed, step])
    tc = cfg.train
    s = int(rng.integers(len(sequences)))
    seq = sequences[s]
    w = min(tc.window, len(seq))
    start = int(rng.integers(len(seq) - w + 1))
    avail = [sample_prompt_availability(rng) if tc.sample_availability else Availability.BOTH
             for _ in range(w)]
    drop = [name for name in tc.dropout_streams if rng.random() < tc.modality_dropout]
    return seq[start:start + w], avail, drop


def loss_for(model: Model, bundles: Sequence, availability=None, drop=()) -> LossBreakdown:
    tc = model.cfg.train
    out = model.forward(bundles, availability, drop)
    gt = np.stack([b.depth.values for b in bundles])
    valid = np.stack([b.depth.valid for b in bundles])
    return compute_losses(out.depths, gt, valid, bundles[0].reference.intrinsics,
                          tc.alpha, tc.beta, tc.tau_temp)


def train(cfg: PipelineConfig, sequences: Sequence[Sequence], out_dir=None, resume=None,
          steps: int | None = None, model: Model | None = None, progress=None) -> TrainResult:
    """Optimize the total loss; writes ``loss.csv`` and checkpoints into ``out_dir``.

    ``steps`` overrides the number of steps to run (the schedule still spans
    ``cfg.train.steps``).  With ``resume`` the run continues from a checkpoint.
    """
    tc = cfg.train
    if not sequences or not all(sequences):
        raise ValueError("need at least one non-empty sequence")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
    model = model or Model(cfg)
    model.initialize(sequences[0])
    opt = AdamW(weight_decay=tc.weight_decay)
    start = 0
    if resume is not None:
        start = model.load(resume, opt)
    end = tc.steps if steps is None else min(tc.steps, start + steps)
    curve = []
    csv_path = out / "loss.csv" if out is not None else None
    if csv_path is not None and (resume is None or not csv_path.exists()):
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CURVE_FIELDS)
    ckpt = None
    t0 = time.perf_counter()
    for step in range(start, end):
        bundles, avail, drop = _step_plan(cfg, step, sequences)
        lrs = learning_rates(tc, step)
        model.store.zero_grad()
        with Tape() as tape:
            losses = loss_for(model, bundles, avail, drop)
        vals = losses.as_floats()
        if not all(math.isfinite(v) for v in vals.values()):
            if out is not None:
                ckpt = out / "last_good.ckpt"
                model.save(ckpt, opt, step)
                (out / "diagnostic.json").write_text(json.dumps(
                    {"step": step, "losses": {k: repr(v) for k, v in vals.items()},
                     "availability": [str(a.value) for a in avail], "dropped": drop}, indent=1))
            raise TrainingError(f"non-finite loss at step {step}: {vals}")
        tape.backward(losses.total)
        opt.step(model.store, lambda name: lrs[param_group(name)])
        row = {"step": step, **{k: vals[k] for k in ("total", "depth", "grad", "normals", "temporal")},
               **{f"lr_{k}": v for k, v in lrs.items()},
               "availability": "|".join(a.value for a in avail), "dropped": "|".join(drop) or "-"}
        curve.append(row)
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in CURVE_FIELDS])
        if progress is not None:
            progress(row)
        done = step + 1
        if out is not None and tc.checkpoint_every and done % tc.checkpoint_every == 0:
            ckpt = out / f"step_{done:06d}.ckpt"
            model.save(ckpt, opt, done)
    if out is not None:
        ckpt = out / "final.ckpt"
        model.save(ckpt, opt, end)
    return TrainResult(model, curve, ckpt, time.perf_counter() - t0)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("total", "depth", "grad", "normals", "temporal", "lr_matching", "lr_fusion", "lr_reference"):
            r[k] = float(r[k])
        r["step"] = int(r["step"])
    return rows


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def overfit_config(seed: int = 0, steps: int = 2000) -> PipelineConfig:
    """Desk model for the single-scene overfit run.

    Token width, depth and hypothesis count are the desk defaults; the
    cost-volume MLPs are narrowed so that the run fits its time budget on
    one core.
    """
    model = ModelConfig(rel_hidden=16, abs_hidden=16, head_hidden=16, rel_feature_dim=8, abs_feature_dim=8)
    train_cfg = TrainConfig(steps=steps, window=4, checkpoint_every=0)
    return PipelineConfig(d_min=1.0, d_max=20.0, seed=seed, model=model, train=train_cfg,
                          corruption=PromptCorruption(beams=16))


def overfit_scene(seed: int = 0, corruption: PromptCorruption | None = None,
                  d_min: float = 1.0, d_max: float = 20.0):
    """The 64×48, four-frame translating scene used by the overfit run (two sources per frame)."""
    from .synthdata import default_scene
    return default_scene(64, 48, frames=4, seed=seed, d_min=d_min, d_max=d_max, num_sources=2,
                         corruption=corruption or PromptCorruption(beams=16))


def window_losses(model: Model, bundles: Sequence, availability=None, drop=()) -> dict[str, float]:
    """Loss terms of one forward pass without recording a tape."""
    return loss_for(model, bundles, availability, drop).as_floats()


def run_overfit(out_dir=None, seed: int = 0, steps: int = 2000, progress=None) -> dict:
    """Train the desk model on one scene and report accuracy and temporal loss before and after."""
    from .synthdata import render, save_sequence
    t0 = time.perf_counter()
    cfg = overfit_config(seed, steps)
    spec = overfit_scene(seed, cfg.corruption, cfg.d_min, cfg.d_max)
    bundles = render(spec)
    model = Model(cfg)
    full = [Availability.BOTH] * len(bundles)
    before = window_losses(model, bundles, full)
    absrel_before = evaluate(infer_sequence(bundles, model), bundles).mean["absrel"]
    result = train(cfg, [bundles], out_dir=out_dir, model=model, progress=progress)
    after = window_losses(model, bundles, full)
    report = evaluate(infer_sequence(bundles, model), bundles)
    curve = result.curve
    tail = curve[-20:]
    out = {
        "steps": steps, "seed": seed,
        "absrel_initial": absrel_before, "absrel_final": report.mean["absrel"],
        "mae_final": report.mean["mae"], "tau_final": report.mean["tau"], "tae_final": report.tae,
        "temporal_initial": before["temporal"], "temporal_final": after["temporal"],
        "temporal_ratio": before["temporal"] / max(after["temporal"], 1e-300),
        "curve_temporal_step0": curve[0]["temporal"] if curve else math.nan,
        "curve_temporal_last20": float(np.mean([r["temporal"] for r in tail])) if tail else math.nan,
        "train_seconds": result.seconds, "total_seconds": time.perf_counter() - t0,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_sequence(bundles, out_dir / "scene", spec)
        (out_dir / "report.json").write_text(json.dumps(out, indent=2))
    return out


SWEEP_AXES = {
    "beams": ("beams", int),
    "occlusion": ("occlusion_from_bottom", float),
    "dropout": ("dropout_fraction", float),
}


def sweep(model: Model, bundles: Sequence, axis: str, levels: Sequence, base: PromptCorruption | None = None,
          seed: int = 0) -> list[dict]:
    """AbsRel (and MAE, inlier ratio) across prompt corruption levels along one axis."""
    from .synthdata import reprompt
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    fname, kind = SWEEP_AXES[axis]
    base = base or model.cfg.corruption
    rows = []
    for level in levels:
        corr = dataclasses.replace(base, **{fname: kind(level)})
        prompted = reprompt(bundles, corr, seed, model.cfg.d_min, model.cfg.d_max)
        rep = evaluate(infer_sequence(prompted, model), prompted)
        rows.append({"axis": axis, "level": kind(level), **rep.mean})
    return rows
