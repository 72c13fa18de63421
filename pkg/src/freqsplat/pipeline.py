"""Run orchestration: config handling, scene initialization, the staged
optimization loop, and the analysis/eval commands behind the CLI.

Config files are INI-style key/value sections; any key can be overridden by
an environment variable named FREQSPLAT_<SECTION>__<KEY> (uppercase).
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as fio
from . import plots
from .distillation import Adam, hybrid_step, scene_score_provider
from .errors import ConfigError, InvalidParameterError
from .evaluation import (
    ALIGNMENT,
    CD_CONVENTION,
    PointCloud,
    align_normalize,
    chamfer_distance,
    f_score,
    psnr,
    sample_points,
    ssim,
)
from .frequency import adaptive_cutoff, amplitude, dft2, radial_energy_profile
from .priors import NoiseSchedule, SyntheticGaussianProvider, fixture_provider, remote_provider
from .renderer import RenderSettings, rasterize
from .scene import Camera, GaussianCloud, ImageBuffer, MaskedImage, orbit_cameras

ENV_PREFIX = "FREQSPLAT_"

DEFAULT_CONFIG = {
    "run": {
        "seed": "0",
        "output_dir": "out",
        "oracle_mode": "false",
    },
    "views": {
        "reference": "",
        "reference_azimuth": "0.0",
        "reference_elevation": "0.0",
        "reference_distance": "1.5",
        "aux_dir": "",
        "aux_elevation": "20.0",
    },
    "init": {
        "source": "random",
        "count": "4096",
        "bbox_min": "-0.5",
        "bbox_max": "0.5",
    },
    "render": {
        "width": "64",
        "height": "64",
        "fov_y": "49.1",
        "background": "1.0 1.0 1.0",
        "tile_size": "64",
        "n_threads": "1",
    },
    "optimize": {
        "total_iterations": "500",
        "stage_split": "0.6",
        "lr_position_initial": "1e-4",
        "lr_position_final": "2e-5",
        "lr_scale": "5e-3",
        "lr_rotation": "1e-3",
        "lr_color": "1e-2",
        "lr_opacity": "5e-2",
        "lambda_lf": "1.0",
        "lambda_hf": "1.0",
        "lambda_ref": "1000.0",
        "lambda_aux": "0.0",
        "sds_elevation_min": "-30.0",
        "sds_elevation_max": "30.0",
    },
    "frequency": {
        "energy_fraction": "0.85",
        "mask_softness": "2.0",
        "cutoff_source": "render",
        "residual_mode": "filtered",
    },
    "priors": {
        "provider_3d": "",
        "provider_2d": "",
        "guidance_2d": "7.5",
        "guidance_3d": "5.0",
        "schedule_steps": "1000",
        "beta_start": "8.5e-4",
        "beta_end": "1.2e-2",
        "weight_mode": "one_minus_alpha_bar",
        "t_min": "0.02",
        "t_max_start": "0.98",
        "t_max_end": "0.5",
        "latent_downsample": "1",
        "hf_conditioning": "text",
        "text_embedding": "0 0 0 0",
    },
}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- file <- FREQSPLAT_* env vars <- explicit overrides."""
    config = {section: dict(values) for section, values in DEFAULT_CONFIG.items()}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in config:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in config[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                config[section][key] = value
    for env_key, value in os.environ.items():
        if not env_key.startswith(ENV_PREFIX):
            continue
        rest = env_key[len(ENV_PREFIX):]
        if "__" not in rest:
            continue
        section, key = rest.split("__", 1)
        section, key = section.lower(), key.lower()
        if section in config and key in config[section]:
            config[section][key] = value
    for section, values in (overrides or {}).items():
        config.setdefault(section, {}).update({k: str(v) for k, v in values.items()})
    return config


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class OptimizationPlan:
    """Resolved experiment schedule; every field mirrors a config key."""

    total_iterations: int = 500
    stage_split: float = 0.6
    lr_position_initial: float = 1e-4
    lr_position_final: float = 2e-5
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 1e-2
    lr_opacity: float = 5e-2
    lambda_lf: float = 1.0
    lambda_hf: float = 1.0
    lambda_ref: float = 1000.0
    lambda_aux: float = 0.0
    guidance_2d: float = 7.5
    guidance_3d: float = 5.0
    energy_fraction: float = 0.85
    mask_softness: float = 2.0
    cutoff_source: str = "render"
    residual_mode: str = "filtered"
    render_width: int = 64
    render_height: int = 64
    fov_y: float = 49.1
    background: tuple = (1.0, 1.0, 1.0)
    tile_size: int = 64
    n_threads: int = 1
    seed: int = 0
    oracle_mode: bool = False
    sds_elevation_range: tuple = (-30.0, 30.0)
    t_min: float = 0.02
    t_max_start: float = 0.98
    t_max_end: float = 0.5
    latent_downsample: int = 1
    hf_conditioning: str = "text"
    text_embedding: tuple = (0.0, 0.0, 0.0, 0.0)
    schedule_steps: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    weight_mode: str = "one_minus_alpha_bar"

    def __post_init__(self):
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if not 0.0 <= self.stage_split <= 1.0:
            raise ConfigError("stage_split must lie in [0, 1]")
        if self.residual_mode not in ("filtered", "amplitude"):
            raise ConfigError(f"unknown residual_mode {self.residual_mode!r}")
        if self.cutoff_source not in ("render", "prediction"):
            raise ConfigError(f"unknown cutoff_source {self.cutoff_source!r}")
        if self.hf_conditioning not in ("text", "view"):
            raise ConfigError(f"unknown hf_conditioning {self.hf_conditioning!r}")

    @classmethod
    def from_config(cls, config: dict) -> "OptimizationPlan":
        opt, freq, render = config["optimize"], config["frequency"], config["render"]
        pri, run = config["priors"], config["run"]
        try:
            return cls(
                total_iterations=int(opt["total_iterations"]),
                stage_split=float(opt["stage_split"]),
                lr_position_initial=float(opt["lr_position_initial"]),
                lr_position_final=float(opt["lr_position_final"]),
                lr_scale=float(opt["lr_scale"]),
                lr_rotation=float(opt["lr_rotation"]),
                lr_color=float(opt["lr_color"]),
                lr_opacity=float(opt["lr_opacity"]),
                lambda_lf=float(opt["lambda_lf"]),
                lambda_hf=float(opt["lambda_hf"]),
                lambda_ref=float(opt["lambda_ref"]),
                lambda_aux=float(opt["lambda_aux"]),
                guidance_2d=float(pri["guidance_2d"]),
                guidance_3d=float(pri["guidance_3d"]),
                energy_fraction=float(freq["energy_fraction"]),
                mask_softness=float(freq["mask_softness"]),
                cutoff_source=freq["cutoff_source"],
                residual_mode=freq["residual_mode"],
                render_width=int(render["width"]),
                render_height=int(render["height"]),
                fov_y=float(render["fov_y"]),
                background=_floats(render["background"]),
                tile_size=int(render["tile_size"]),
                n_threads=int(render["n_threads"]),
                seed=int(run["seed"]),
                oracle_mode=_bool(run["oracle_mode"]),
                sds_elevation_range=(
                    float(opt["sds_elevation_min"]),
                    float(opt["sds_elevation_max"]),
                ),
                t_min=float(pri["t_min"]),
                t_max_start=float(pri["t_max_start"]),
                t_max_end=float(pri["t_max_end"]),
                latent_downsample=int(pri["latent_downsample"]),
                hf_conditioning=pri["hf_conditioning"],
                text_embedding=_floats(pri["text_embedding"]),
                schedule_steps=int(pri["schedule_steps"]),
                beta_start=float(pri["beta_start"]),
                beta_end=float(pri["beta_end"]),
                weight_mode=pri["weight_mode"],
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad configuration value: {exc}") from exc

    def render_settings(self) -> RenderSettings:
        if self.oracle_mode:
            return RenderSettings(early_out=None, n_threads=1, tile_size=self.tile_size)
        return RenderSettings(tile_size=self.tile_size, n_threads=self.n_threads)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear_beta(
            self.schedule_steps, self.beta_start, self.beta_end, self.weight_mode
        )

    def stage_for(self, iteration: int) -> int:
        return 1 if iteration < round(self.stage_split * self.total_iterations) else 2


@dataclass
class ViewSet:
    """Reference view plus optional auxiliary views at fixed elevation."""

    reference: MaskedImage
    reference_camera: Camera
    aux: list = field(default_factory=list)


def masked_image_from_file(path) -> MaskedImage:
    """PNG with either an alpha channel as mask or an all-ones fallback."""
    img = fio.load_png(path)
    sidecar = Path(path).with_name(Path(path).stem + "_mask.png")
    if img.channels == 4:
        rgb = ImageBuffer(img.data[:, :, :3])
        mask = ImageBuffer(img.data[:, :, 3:4])
    elif sidecar.exists():
        rgb = ImageBuffer(img.data[:, :, :3])
        mask = ImageBuffer(fio.load_png(sidecar).data[:, :, :1])
    else:
        rgb = ImageBuffer(img.data[:, :, :3] if img.channels >= 3 else
                          np.repeat(img.data, 3, axis=2))
        mask = ImageBuffer(np.ones((img.height, img.width, 1)))
    return MaskedImage(rgb, mask)


def load_view_set(config: dict) -> ViewSet:
    views = config["views"]
    if not views["reference"]:
        raise ConfigError("[views] reference image path is required")
    reference = masked_image_from_file(views["reference"])
    ref_cam = Camera(
        azimuth=float(views["reference_azimuth"]),
        elevation=float(views["reference_elevation"]),
        distance=float(views["reference_distance"]),
        fov_y=float(config["render"]["fov_y"]),
        width=reference.image.width,
        height=reference.image.height,
    )
    aux = []
    aux_dir = views["aux_dir"]
    if aux_dir:
        paths = sorted(Path(aux_dir).glob("*.png"))
        paths = [p for p in paths if not p.stem.endswith("_mask")]
        n = len(paths)
        for i, p in enumerate(paths):
            # Zero123++-like layout: fixed elevation, uniform azimuths
            cam = Camera(
                azimuth=360.0 * i / max(n, 1),
                elevation=float(views["aux_elevation"]),
                distance=float(views["reference_distance"]),
                fov_y=float(config["render"]["fov_y"]),
                width=reference.image.width,
                height=reference.image.height,
            )
            aux.append((masked_image_from_file(p), cam))
    return ViewSet(reference, ref_cam, aux)


def init_gaussians(source: str, count: int, bbox: tuple[float, float],
                   rng: np.random.Generator) -> GaussianCloud:
    """Coarse cloud from a point file or uniform random positions in the bbox."""
    lo, hi = float(bbox[0]), float(bbox[1])
    if hi <= lo:
        raise InvalidParameterError("bbox upper bound must exceed lower bound")
    colors = None
    if source == "random":
        if count < 1:
            raise InvalidParameterError("random init needs count >= 1")
        positions = rng.uniform(lo, hi, size=(count, 3))
    else:
        positions, colors = fio.load_point_ply(source)
        if len(positions) == 0:
            raise InvalidParameterError(f"{source} contains no points")
    k = len(positions)
    diagonal = math.sqrt(3.0) * (hi - lo)
    scale = 2.0 * diagonal / k ** (1.0 / 3.0)
    if colors is None:
        colors = np.full((k, 3), 0.5)
    cloud = GaussianCloud.from_values(
        positions=positions,
        scales=np.full((k, 3), scale),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (k, 1)),
        colors=np.clip(colors, 0.0, 1.0),
        opacities=np.full(k, 0.5),
    )
    cloud.opacity_logits[:] = 0.1
    return cloud


class _ZeroProvider:
    def predict(self, request):
        return np.zeros_like(np.asarray(request.latent, dtype=np.float64))


def make_provider(spec: str, plan: OptimizationPlan, sched: NoiseSchedule,
                  ref_cam: Camera):
    """Provider factory for config strings:

    echo | synthetic:<latent.npy> | scene:<cloud.ply> | fixture:<archive.npz>
    | remote:<host:port>
    """
    if not spec:
        raise ConfigError("provider spec is empty; set [priors] provider_2d/provider_3d")
    kind, _, arg = spec.partition(":")
    if kind == "echo":
        return _ZeroProvider()
    if kind == "synthetic":
        target = np.load(arg)
        return SyntheticGaussianProvider(sched, target=np.asarray(target, dtype=np.float64))
    if kind == "scene":
        gt = fio.load_gaussian_ply(arg)
        return scene_score_provider(
            gt, sched, ref_cam, plan.render_width, plan.render_height,
            fov_y=plan.fov_y, background=tuple(plan.background),
            settings=plan.render_settings(),
            latent_downsample=plan.latent_downsample,
        )
    if kind == "fixture":
        return fixture_provider(arg)
    if kind == "remote":
        return remote_provider(arg)
    raise ConfigError(f"unknown provider spec {spec!r}")


def run_optimization(cloud: GaussianCloud, plan: OptimizationPlan, providers: dict,
                     views: ViewSet, rng: np.random.Generator,
                     sched: NoiseSchedule | None = None) -> list[dict]:
    """The staged loop; zero iterations leaves the cloud untouched."""
    sched = sched or plan.schedule()
    opt = Adam.for_cloud(cloud)
    metrics = []
    for iteration in range(plan.total_iterations):
        stage = plan.stage_for(iteration)
        metrics.append(
            hybrid_step(cloud, plan, stage, providers, views, rng, opt, iteration, sched)
        )
    return metrics


def _write_metrics_csv(metrics: list[dict], path) -> None:
    fields = ["iteration", "stage", "timestep", "sds_residual_norm", "cutoff_radius",
              "ref_loss", "aux_loss", "psnr_ref", "lr_position", "degenerate_render"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)


def _write_resolved_config(config: dict, path) -> None:
    parser = configparser.ConfigParser()
    for section, values in config.items():
        parser[section] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as f:
        parser.write(f)


def run_generate(config: dict, providers: dict | None = None) -> dict:
    """Full generation run; returns paths of everything written."""
    plan = OptimizationPlan.from_config(config)
    out_dir = Path(config["run"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(plan.seed)
    sched = plan.schedule()

    views = load_view_set(config)
    init_cfg = config["init"]
    cloud = init_gaussians(
        init_cfg["source"], int(init_cfg["count"]),
        (float(init_cfg["bbox_min"]), float(init_cfg["bbox_max"])), rng,
    )

    if providers is None:
        providers = {}
        if plan.lambda_lf != 0.0:
            providers["3d"] = make_provider(
                config["priors"]["provider_3d"], plan, sched, views.reference_camera
            )
        if plan.lambda_hf != 0.0:
            providers["2d"] = make_provider(
                config["priors"]["provider_2d"], plan, sched, views.reference_camera
            )

    metrics = run_optimization(cloud, plan, providers, views, rng, sched)

    paths = {"output_dir": str(out_dir)}
    ply_path = out_dir / "cloud.ply"
    fio.save_gaussian_ply(ply_path, cloud)
    paths["cloud"] = str(ply_path)

    render_dir = out_dir / "renders"
    render_dir.mkdir(exist_ok=True)
    settings = plan.render_settings()
    cams = orbit_cameras(
        7, (-30.0, 0.0, 30.0), views.reference_camera.distance, plan.fov_y,
        plan.render_width, plan.render_height, views.reference_camera.look_at,
    )
    for i, cam in enumerate(cams):
        out = rasterize(cloud, cam, tuple(plan.background), settings)
        fio.save_png(render_dir / f"orbit_{i:03d}.png", out.color)
    paths["renders"] = str(render_dir)

    metrics_path = out_dir / "metrics.csv"
    _write_metrics_csv(metrics, metrics_path)
    paths["metrics"] = str(metrics_path)
    if metrics:
        plots.save_training_curves(metrics, out_dir / "train_curves.png")
        paths["curves"] = str(out_dir / "train_curves.png")

    resolved = out_dir / "resolved_config.ini"
    _write_resolved_config(config, resolved)
    paths["config"] = str(resolved)
    return paths


def run_analyze_spectrum(in_dir, out_dir, energy_fractions=(0.5, 0.85, 0.99),
                         grid_points: int = 128) -> dict:
    """Per-image amplitude heat maps and radial cumulative-energy profiles,
    plus a folder summary of cutoffs and the mean profile."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    images = sorted(p for p in in_dir.glob("*.png"))
    if not images:
        raise InvalidParameterError(f"no PNG images found in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    grid = np.linspace(0.0, 1.0, grid_points)
    profiles, cutoffs = {}, {}
    for path in images:
        img = fio.load_png(path)
        rgb = img.data[:, :, :3] if img.channels >= 3 else img.data
        spec = dft2(rgb)
        amp = amplitude(spec).mean(axis=2)
        plots.save_amplitude_heatmap(
            np.log1p(amp), out_dir / f"{path.stem}_amplitude.png", title=path.stem
        )
        radii, cum = radial_energy_profile(spec)
        prof = np.interp(grid, radii, cum)
        profiles[path.stem] = prof
        cutoffs[path.stem] = {
            frac: adaptive_cutoff(spec, frac) for frac in energy_fractions
        }
        with open(out_dir / f"{path.stem}_profile.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["radius", "cumulative_energy"])
            writer.writerows(zip(radii, cum))

    mean_profile = np.mean(np.stack(list(profiles.values())), axis=0)
    plots.save_energy_profiles(grid, profiles, mean_profile, out_dir / "profiles.png", cutoffs)
    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image"] + [f"cutoff@{frac}" for frac in energy_fractions])
        for name, cuts in cutoffs.items():
            writer.writerow([name] + [f"{cuts[frac]:.6f}" for frac in energy_fractions])
    return {"cutoffs": cutoffs, "profiles": profiles, "summary": str(summary_path)}


def _gather_images(path: Path) -> list[Path]:
    return sorted(p for p in path.glob("*.png") if not p.stem.endswith("_mask"))


def _points_from_source(path: Path, n_points: int, rng) -> PointCloud | None:
    ply = None
    if path.suffix == ".ply":
        ply = path
    elif path.is_dir():
        candidates = sorted(path.glob("*.ply"))
        ply = candidates[0] if candidates else None
    if ply is None:
        return None
    try:
        cloud = fio.load_gaussian_ply(ply)
        return sample_points(cloud, n_points, rng)
    except InvalidParameterError:
        positions, _ = fio.load_point_ply(ply)
        return PointCloud(positions)


def run_eval(pred, gt, out_dir, threshold: float = 0.2, n_points: int = 16384,
             seed: int = 0) -> dict:
    """PSNR/SSIM over paired renders and CD/F-score over sampled points.

    `pred` and `gt` each name a directory of renders, a splat PLY, or a
    directory containing both.
    """
    pred, gt = Path(pred), Path(gt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    report: dict = {
        "cd_convention": CD_CONVENTION,
        "alignment": ALIGNMENT,
        "threshold": threshold,
    }

    rows = []
    if pred.is_dir() and gt.is_dir():
        pred_images = _gather_images(pred)
        gt_images = _gather_images(gt)
        if pred_images or gt_images:
            if len(pred_images) != len(gt_images):
                raise InvalidParameterError(
                    f"view count mismatch: {len(pred_images)} vs {len(gt_images)}"
                )
            for pp, gp in zip(pred_images, gt_images):
                a = fio.load_png(pp).data[:, :, :3]
                b = fio.load_png(gp).data[:, :, :3]
                rows.append({
                    "view_id": pp.stem,
                    "psnr_db": psnr(a, b),
                    "ssim": ssim(a, b),
                })
            report["views"] = rows
            report["mean_psnr_db"] = float(np.mean([r["psnr_db"] for r in rows]))
            report["mean_ssim"] = float(np.mean([r["ssim"] for r in rows]))
            with open(out_dir / "views.csv", "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=["view_id", "psnr_db", "ssim"])
                writer.writeheader()
                writer.writerows(rows)
            plots.save_view_metrics(rows, out_dir / "views.png")

    pred_points = _points_from_source(pred, n_points, rng)
    gt_points = _points_from_source(gt, n_points, rng)
    if pred_points is not None and gt_points is not None:
        aligned = align_normalize(pred_points, gt_points)
        cd = chamfer_distance(aligned.points, gt_points)
        fs = f_score(aligned.points, gt_points, threshold)
        geometry = {
            "cd": cd,
            "fscore": fs,
            "threshold": threshold,
            "n_points": n_points,
            "alignment": ALIGNMENT,
        }
        report["geometry"] = geometry
        with open(out_dir / "geometry.csv", "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["cd", "fscore", "threshold", "n_points", "alignment"]
            )
            writer.writeheader()
            writer.writerow(geometry)

    if "views" not in report and "geometry" not in report:
        raise InvalidParameterError("nothing to evaluate: no paired renders or PLYs found")
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2)
    return report
