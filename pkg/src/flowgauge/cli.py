"""Command-line interface: ``flowgauge synth|track|compare|calibrate-scale``.

Exit codes: 0 success, 2 invalid input, 3 pipeline or numerical failure,
4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as fio
from . import klt, matching, pipeline, signals, synthetic
from .calibration import CameraModel, estimate_scale_factor
from .errors import FlowGaugeError, PipelineError
from .flow import EnergyParams

EXIT_OK, EXIT_VALIDATION, EXIT_PIPELINE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("flowgauge")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    frames_glob: str = "frame_*.png"
    camera: CameraModel | None = None
    crop: tuple | None = None
    mask: object = None  # path to a mask image, list of [x, y] crop points, or None for the whole crop
    method: str = "deepflow"
    energy: EnergyParams = field(default_factory=EnergyParams)
    filter: pipeline.FilterConfig = field(default_factory=pipeline.FilterConfig)
    matching: matching.MatchingConfig = field(
        default_factory=lambda: matching.MatchingConfig(search_radius=pipeline.DEFAULT_SEARCH_RADIUS, subpixel=True))
    axis: str = "horizontal"
    output_dir: str = "out"
    workers: int | None = None
    frame_rate: float = 60.0
    reference_update_interval: int | None = None
    presmooth_sigma: float = pipeline.DEFAULT_PRESMOOTH

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        d = dict(d)
        try:
            if "frames_glob" in d:
                d["frames_glob"] = str(_resolve(base, d["frames_glob"]))
            if isinstance(d.get("camera"), str):
                cam_path = _resolve(base, d["camera"])
                if not cam_path.exists():
                    raise ConfigError(f"camera: file {cam_path} does not exist")
                d["camera"] = CameraModel.load(cam_path)
            elif isinstance(d.get("camera"), dict):
                d["camera"] = CameraModel.from_dict(d["camera"])
            if isinstance(d.get("mask"), str):
                mask_path = _resolve(base, d["mask"])
                if not mask_path.exists():
                    raise ConfigError(f"mask: file {mask_path} does not exist")
                d["mask"] = str(mask_path)
            if d.get("crop") is not None:
                d["crop"] = tuple(int(c) for c in d["crop"])
            if "energy" in d:
                d["energy"] = EnergyParams(**d["energy"])
            if "filter" in d:
                d["filter"] = pipeline.FilterConfig(**d["filter"])
            if "matching" in d:
                d["matching"] = matching.MatchingConfig(**d["matching"])
            if "output_dir" in d:
                d["output_dir"] = str(_resolve(base, d["output_dir"]))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.method not in ("deepflow", "klt"):
            raise ConfigError(f"method must be 'deepflow' or 'klt', got {self.method!r}")
        pipeline.Axis.parse(self.axis)
        if self.workers is not None and self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.frame_rate > 0:
            raise ConfigError("frame_rate must be positive")


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_config(path) -> RunConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw, path.parent)


def _build_mask(cfg: RunConfig, frame_shape) -> pipeline.POIMask:
    h, w = frame_shape
    crop = cfg.crop or (0, 0, w, h)
    if cfg.mask is None:
        return pipeline.POIMask.full(crop)
    if isinstance(cfg.mask, str):
        m = fio.read_mask(cfg.mask)
        if m.shape == (h, w) and (crop[2], crop[3]) != (w, h):
            x, y, cw, ch = crop
            m = m[y:y + ch, x:x + cw]
        return pipeline.POIMask(crop, m)
    return pipeline.POIMask.from_points(crop, [tuple(p) for p in cfg.mask])


def _klt_matrix(frames, mask: pipeline.POIMask, cfg: RunConfig) -> pipeline.DisplacementMatrix:
    crops = [mask.apply(f) for f in frames]
    history = klt.track_sequence_klt(crops)
    if not history[0].points:
        raise ValueError("no trackable features in the crop")
    return klt.integrate_displacement(history, cfg.axis, cfg.frame_rate)


def run_track(cfg: RunConfig, workers: int | None = None) -> pipeline.DisplacementResult:
    log.info("method %s, frames %s", cfg.method, cfg.frames_glob)
    frames = fio.read_frames(cfg.frames_glob)
    shape = frames[0].shape if frames else (0, 0)
    camera = cfg.camera or CameraModel.identity(max(shape[1], 1), max(shape[0], 1))
    if not frames:
        raise PipelineError("track_sequence", f"no frames match {cfg.frames_glob}")
    mask = _build_mask(cfg, shape)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.method == "deepflow":
        res = pipeline.run_pipeline(frames, mask, camera, cfg.energy, cfg.filter, cfg.matching, cfg.axis,
                                    cfg.frame_rate, workers, cfg.reference_update_interval,
                                    cfg.presmooth_sigma)
    else:
        try:
            if len(frames) < 2:
                raise ValueError("fewer than 2 frames")
            raw = _klt_matrix(frames, mask, cfg)
        except (FlowGaugeError, ValueError, ArithmeticError) as exc:
            raise PipelineError("track_sequence", str(exc)) from exc
        res = pipeline.post_process(raw, camera, cfg.filter)
    pipeline.write_matrix_csv(out / "displacement_matrix.csv", res.diagnostics["raw"])
    pipeline.write_result(out / "result.csv", res, {"method": cfg.method, "axis": cfg.axis})
    return res


def cmd_synth(args) -> int:
    spec = synthetic.SceneSpec.load(args.spec)
    frames, truth = synthetic.render_sequence(spec, args.seed)
    synthetic.write_sequence(args.out_dir, frames, truth, args.format)
    print(f"wrote {len(frames)} frames ({spec.duration:g} s at {spec.frame_rate:g} fps) to {args.out_dir}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    for name in ("frames_glob", "method", "axis", "output_dir", "frame_rate"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate()
    if args.workers is not None:
        workers = args.workers
    elif os.environ.get("FLOWGAUGE_WORKERS"):
        workers = int(os.environ["FLOWGAUGE_WORKERS"])
    else:
        workers = cfg.workers
    workers = pipeline.resolve_workers(workers)
    res = run_track(cfg, workers)
    print(f"{cfg.method}: {len(res.series_px)} frames, {res.retained_pois} POIs retained -> {cfg.output_dir}")
    return EXIT_OK


def _read_columns(path) -> dict:
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(names) or "time_s" not in names:
        raise ConfigError(f"{path}: expected a CSV with a time_s column")
    return {n: data[:, k] for k, n in enumerate(names)}


def _pick(cols: dict, order, path):
    for name in order:
        if name in cols:
            return name
    raise ConfigError(f"{path}: no displacement column among {sorted(cols)}")


def cmd_compare(args) -> int:
    ca, cb = _read_columns(args.result_a), _read_columns(args.result_b)
    # a truth file is in pixels, so any comparison against one happens in pixels
    order = ("disp_px", "dx_px") if "dx_px" in ca or "dx_px" in cb else ("disp_mm", "disp_px", "dx_px")
    na, nb = _pick(ca, order, args.result_a), _pick(cb, order, args.result_b)
    ta, tb = ca["time_s"], cb["time_s"]
    if ta[-1] < tb[0] or tb[-1] < ta[0]:
        raise ConfigError(f"time ranges do not overlap: [{ta[0]:g}, {ta[-1]:g}] vs [{tb[0]:g}, {tb[-1]:g}] s")
    va, vb = ca[na], cb[nb]
    if not args.keep_offset:
        va, vb = va - va.mean(), vb - vb.mean()
    unit = signals.Unit.MM if na == "disp_mm" else signals.Unit.PX

    def rate(t):
        return 1.0 / float(np.median(np.diff(t))) if len(t) > 1 else 1.0

    a = signals.TimeSeries(va, rate(ta), unit)
    b = signals.TimeSeries(vb, rate(tb), unit)
    a_al, b_al, lag = signals.align(a, b, args.lag_window)
    metrics = signals.error_metrics(a_al, b_al)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    signals.write_metrics_json(out / "metrics.json", metrics)
    if args.psd:
        b_rs = signals.resample(b, a.sample_rate)
        seg = min(args.segment, len(a), len(b_rs))
        signals.write_spectrum_csv(out / "psd_a.csv", signals.psd(a, seg))
        signals.write_spectrum_csv(out / "psd_b.csv", signals.psd(b_rs, seg))
    print(f"lag {lag} samples; rmse {metrics.rmse:.6f} {unit.value}; "
          f"max error {metrics.max_error_pct:.2f}%; rmse/max {metrics.rmse_over_max_pct:.2f}%")
    return EXIT_OK


def cmd_calibrate_scale(args) -> int:
    scale = estimate_scale_factor(args.known_mm, args.measured_px)
    if args.camera_in:
        cam = CameraModel.load(args.camera_in).with_scale(scale)
    else:
        cam = CameraModel(fx=1.0, fy=1.0, cx=0.0, cy=0.0, scale_mm_per_px=scale)
    cam.save(args.camera_out)
    print(f"scale_mm_per_px = {scale:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowgauge", description="Target-free displacement measurement from video frames.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic beam sequence")
    s.add_argument("spec", help="scene spec JSON")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("png", "pgm"), default="png")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("track", help="measure displacement from numbered frames")
    t.add_argument("config", nargs="?", help="run config JSON")
    t.add_argument("--frames-glob", dest="frames_glob")
    t.add_argument("--method", choices=("deepflow", "klt"))
    t.add_argument("--axis", choices=("horizontal", "vertical", "magnitude"))
    t.add_argument("--output-dir", dest="output_dir")
    t.add_argument("--frame-rate", dest="frame_rate", type=float)
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_track)

    c = sub.add_parser("compare", help="error metrics (and spectra) of two displacement series")
    c.add_argument("result_a", help="measured series: result.csv")
    c.add_argument("result_b", help="reference series: result.csv or truth.csv")
    c.add_argument("--output-dir", dest="output_dir", default=".")
    c.add_argument("--psd", action="store_true", help="also write Welch spectra")
    c.add_argument("--segment", type=int, default=256, help="Welch segment length in samples")
    c.add_argument("--lag-window", dest="lag_window", type=float, default=2.0, help="seconds")
    c.add_argument("--keep-offset", dest="keep_offset", action="store_true",
                   help="do not subtract each series' mean before comparing")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("calibrate-scale", help="set mm-per-pixel from a feature of known size")
    k.add_argument("known_mm", type=float)
    k.add_argument("measured_px", type=float)
    k.add_argument("--camera-in", dest="camera_in")
    k.add_argument("--camera-out", dest="camera_out", required=True)
    k.set_defaults(func=cmd_calibrate_scale)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FlowGaugeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
