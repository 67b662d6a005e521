"""Command-line front end for the text-to-LiDAR pipeline.

Verbs: synth, annotate, train, sample, control-train, upsample, downsample,
eval, project. Exit code 0 on success, 1 on validation errors (bad flags,
bad paths, malformed inputs), 2 on runtime failures. Every verb routes all
randomness through --seed and writes a manifest of its resolved options, so
reruns with identical flags overwrite outputs with identical bytes. A JSON
--config file overrides flags; T2LDM_THREADS caps torch worker threads.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .annotate import AnnotationRules, annotate_scene, read_sidecar, write_sidecar
from .evalmetrics import detect_objects, report
from .rangemap import (SensorConfig, denormalize, normalize, project,
                       read_point_cloud, unproject, write_point_cloud,
                       write_range_image)
from .schedule import cosine_schedule, sample_loop
from .synthscene import generate_scene, randomize_spec
from .textenc import HashTextEncoder, read_prompts, write_prompts

VERBS = ("synth", "annotate", "train", "sample", "control-train",
         "upsample", "downsample", "eval", "project")


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag errors as exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _thread_cap() -> int | None:
    raw = os.environ.get("T2LDM_THREADS")
    if raw is None or raw == "":
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"T2LDM_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ValueError("T2LDM_THREADS must be >= 1")
    return cap


def _limit_torch_threads() -> None:
    cap = _thread_cap()
    if cap is not None:
        import torch
        torch.set_num_threads(cap)


def _apply_config_file(args: argparse.Namespace) -> None:
    """Merge a flat JSON config over the parsed flags (file wins)."""
    if getattr(args, "config", None) is None:
        return
    path = Path(args.config)
    if not path.is_file():
        raise ValueError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"config file is not valid JSON: {err}")
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    for key, value in data.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest) or dest in ("handler", "config", "verb"):
            raise ValueError(f"unknown config key {key!r}")
        setattr(args, dest, value)


def _manifest_path(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    if out.suffix:
        return out.with_name(out.name + ".manifest.json")
    return out / "manifest.json"


def _write_manifest(args: argparse.Namespace) -> None:
    resolved = {}
    for key, value in sorted(vars(args).items()):
        if key in ("handler", "config"):
            continue
        resolved[key] = str(value) if isinstance(value, Path) else value
    path = _manifest_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved, sort_keys=True, indent=2) + "\n")


def _sensor_from_args(args: argparse.Namespace) -> SensorConfig:
    return SensorConfig(height=args.height, width=args.width,
                        fov_up_deg=args.fov_up, fov_down_deg=args.fov_down,
                        depth_min=args.depth_min, depth_max=args.depth_max)


def _sensor_from_dict(data: dict) -> SensorConfig:
    return SensorConfig(**data)


def _require_dir(path, label: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise ValueError(f"{label} directory not found: {path}")
    return path


def _require_file(path, label: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"{label} file not found: {path}")
    return path


def _cloud_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("*.bin"))
    if not files:
        raise ValueError(f"no .bin point clouds in {directory}")
    return files


def _image_from_cloud(cloud: np.ndarray, sensor: SensorConfig) -> np.ndarray:
    """(2, H, W) float32 normalized range map of one cloud."""
    norm = normalize(project(cloud, sensor), sensor)
    return np.moveaxis(norm.data.astype(np.float32), -1, 0)


def _cloud_from_image(data: np.ndarray, sensor: SensorConfig) -> np.ndarray:
    """Inverse of _image_from_cloud for one (2, H, W) sample."""
    image = denormalize(np.moveaxis(np.asarray(data), 0, -1), sensor)
    return unproject(image, sensor)


def _check_grid(sensor: SensorConfig) -> None:
    # the four-stage network pools height by 4 and width by 8 overall
    if sensor.height % 4 or sensor.width % 8:
        raise ValueError("height must divide by 4 and width by 8 "
                         f"(got {sensor.height}x{sensor.width})")


def _save_bev_png(path, points: np.ndarray, bev_range: float = 50.0) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5.0, 5.0), dpi=110)
    if len(points):
        order = np.argsort(points[:, 2], kind="stable")
        ax.scatter(points[order, 0], points[order, 1], c=points[order, 2],
                   s=1.2, cmap="viridis", linewidths=0)
    ax.set_xlim(-bev_range, bev_range)
    ax.set_ylim(-bev_range, bev_range)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _save_range_png(path, image, sensor: SensorConfig) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(2, 1, figsize=(10.0, 3.2), dpi=110, sharex=True)
    depth = np.where(image.valid, image.depth, np.nan)
    inten = np.where(image.valid, image.intensity, np.nan)
    axes[0].imshow(depth, aspect="auto", interpolation="nearest",
                   cmap="turbo", vmin=0.0, vmax=sensor.depth_max)
    axes[0].set_ylabel("depth")
    axes[1].imshow(inten, aspect="auto", interpolation="nearest",
                   cmap="gray", vmin=0.0, vmax=1.0)
    axes[1].set_ylabel("intensity")
    axes[1].set_xlabel("azimuth bin")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _load_scene_images(scenes_dir: Path, sensor: SensorConfig,
                       with_prompts: bool):
    """Project every scene to a training image; optionally embed its prompt."""
    files = _cloud_files(scenes_dir)
    encoder = HashTextEncoder() if with_prompts else None
    images, embeddings, records = [], [], []
    for path in files:
        cloud = read_point_cloud(path)
        images.append(_image_from_cloud(cloud, sensor))
        sidecar = path.with_suffix(".jsonl")
        rec = None
        if sidecar.is_file():
            _, _, rec = read_sidecar(sidecar)
        records.append(rec)
        if with_prompts:
            if rec is None or "prompt" not in rec:
                raise ValueError(f"missing sidecar prompt for {path.name}; "
                                 "rerun synth or pass --unconditional")
            embeddings.append(encoder.encode(rec["prompt"]))
    images = np.stack(images)
    return files, images, (embeddings if with_prompts else None), records


def cmd_synth(args) -> int:
    sensor = _sensor_from_args(args)
    if args.scenes < 1:
        raise ValueError("--scenes must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rules = AnnotationRules()
    rng = np.random.default_rng(args.seed)
    for i in range(args.scenes):
        spec = randomize_spec(rng)
        scene_seed = int(rng.integers(0, 2 ** 31 - 1))
        rec = generate_scene(sensor, spec, scene_seed)
        prompt, parts = annotate_scene(rec.boxes, rec.meta, rules, args.template)
        stem = f"scene_{i:04d}"
        write_point_cloud(out / f"{stem}.bin", rec.points)
        np.save(out / f"{stem}.labels.npy", rec.labels)
        write_sidecar(out / f"{stem}.jsonl", rec.boxes, rec.meta,
                      extra={"id": stem, "prompt": prompt, "parts": parts,
                             "label_names": list(rec.label_names)})
        print(f"{stem}: {rec.points.shape[0]} points, {len(rec.boxes)} boxes")
    _write_manifest(args)
    return 0


def cmd_annotate(args) -> int:
    scenes = _require_dir(args.scenes, "scenes")
    sidecars = [p for p in sorted(scenes.glob("*.jsonl"))
                if p.name != "prompts.jsonl"]
    if not sidecars:
        raise ValueError(f"no sidecar .jsonl files in {scenes}")
    rules = AnnotationRules()
    records = []
    for path in sidecars:
        boxes, meta, rec = read_sidecar(path)
        prompt, parts = annotate_scene(boxes, meta, rules, args.template)
        records.append({"id": rec.get("id", path.stem), "prompt": prompt,
                        "parts": parts})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_prompts(out, records)
    print(f"annotated {len(records)} scenes -> {out}")
    _write_manifest(args)
    return 0


def cmd_project(args) -> int:
    sensor = _sensor_from_args(args)
    cloud = read_point_cloud(_require_file(args.infile, "input"))
    image = project(cloud, sensor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_range_image(out, image)
    _save_range_png(out.with_suffix(".png"), image, sensor)
    kept = int(image.valid.sum())
    print(f"projected {cloud.shape[0]} points -> {kept} valid pixels "
          f"({sensor.height}x{sensor.width})")
    _write_manifest(args)
    return 0


def cmd_train(args) -> int:
    import torch
    from .checkpoint import module_arrays, save_checkpoint
    from .network import DenoisingNetwork, GuidanceNetwork, UNetConfig
    from .training import Batcher, TrainConfig, run_training

    _limit_torch_threads()
    sensor = _sensor_from_args(args)
    _check_grid(sensor)
    scenes = _require_dir(args.scenes, "scenes")
    _, images, embeddings, _ = _load_scene_images(
        scenes, sensor, with_prompts=not args.unconditional)
    batcher = Batcher(images, embeddings)

    ucfg = UNetConfig(base_channels=args.base_channels,
                      fov_up_deg=sensor.fov_up_deg,
                      fov_down_deg=sensor.fov_down_deg)
    tcfg = TrainConfig(total_steps=args.steps,
                       gn_active_steps=args.gn_active_steps
                       if args.gn_active_steps is not None else args.steps,
                       snr_gamma=args.snr_gamma,
                       cfg_dropout=args.cfg_dropout,
                       ema_decay=args.ema_decay,
                       learning_rate=args.lr,
                       batch_size=args.batch,
                       scrg=args.scrg)
    schedule = cosine_schedule(args.diffusion_steps)

    torch.manual_seed(args.seed)
    dn = DenoisingNetwork(ucfg)
    gn = GuidanceNetwork(ucfg) if args.scrg else None
    log_stream = None
    if args.log is not None:
        Path(args.log).parent.mkdir(parents=True, exist_ok=True)
        log_stream = open(args.log, "w")
    try:
        history = run_training(dn, gn, batcher, schedule, tcfg, args.seed,
                               log_stream=log_stream,
                               progress_every=args.progress_every)
    finally:
        if log_stream is not None:
            log_stream.close()
    trainer = history["trainer"]

    tensors = module_arrays(dn, "dn.")
    tensors.update(trainer.ema.arrays("ema."))
    config = {"unet": ucfg.to_dict(), "train": tcfg.to_dict(),
              "sensor": asdict(sensor), "diffusion_steps": args.diffusion_steps}
    tail = history["loss_denoise"][-min(50, len(history["loss_denoise"])):]
    extra = {"final_loss_denoise": float(np.mean(tail)),
             "scenes": len(batcher)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, tensors, config, extra)
    print(f"trained {args.steps} steps on {len(batcher)} scenes, "
          f"final denoise loss {extra['final_loss_denoise']:.4f} -> {out}")
    _write_manifest(args)
    return 0


def _load_denoiser(path, use_ema: bool):
    from .checkpoint import load_checkpoint, load_into
    from .network import DenoisingNetwork, UNetConfig

    tensors, config, extra = load_checkpoint(_require_file(path, "checkpoint"))
    ucfg = UNetConfig.from_dict(config["unet"])
    dn = DenoisingNetwork(ucfg)
    prefix = "ema." if use_ema and any(k.startswith("ema.") for k in tensors) else "dn."
    load_into(dn, tensors, prefix)
    dn.eval()
    sensor = _sensor_from_dict(config["sensor"])
    return dn, sensor, config, extra


def _text_model(dn):
    """sample_loop adapter: condition is a (n, 768) embedding or None."""
    import torch

    def model(x, t, condition):
        xt = torch.as_tensor(np.asarray(x, dtype=np.float32))
        with torch.no_grad():
            if condition is None:
                text = dn.null_context(xt.shape[0])
            else:
                emb = torch.as_tensor(np.asarray(condition, dtype=np.float32))
                text = emb[None].expand(xt.shape[0], -1, -1)
            v, _ = dn(xt, int(t), text=text)
        return v.numpy()

    return model


def cmd_sample(args) -> int:
    import torch

    _limit_torch_threads()
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    dn, sensor, config, _ = _load_denoiser(args.ckpt, args.ema)
    schedule = cosine_schedule(config["diffusion_steps"])
    condition = None
    if args.prompt is not None:
        condition = HashTextEncoder().encode(args.prompt)
    model = _text_model(dn)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(args.seed)
    records = []
    for i in range(args.n):
        shape = (1, 2, sensor.height, sensor.width)
        x = sample_loop(model, shape, schedule, args.seed + i,
                        condition=condition, cfg_scale=args.cfg_scale)
        image = denormalize(np.moveaxis(x[0], 0, -1), sensor)
        cloud = unproject(image, sensor)
        stem = f"sample_{i:03d}"
        write_point_cloud(out / f"{stem}.bin", cloud)
        _save_bev_png(out / f"{stem}_bev.png", cloud)
        _save_range_png(out / f"{stem}_range.png", image, sensor)
        records.append({"id": stem, "prompt": args.prompt or ""})
        print(f"{stem}: {cloud.shape[0]} points")
    if args.prompt is not None:
        write_prompts(out / "prompts.jsonl", records)
    _write_manifest(args)
    return 0


def cmd_control_train(args) -> int:
    import torch
    from .controlnet import (ControlNet, ControlTrainer,
                             make_semantic_condition, make_sparse_condition,
                             save_control_checkpoint)
    from .training import TrainConfig

    _limit_torch_threads()
    dn, sensor, config, _ = _load_denoiser(args.ckpt, use_ema=False)
    scenes = _require_dir(args.scenes, "scenes")
    files, images, _, records = _load_scene_images(scenes, sensor,
                                                   with_prompts=False)
    conditions = []
    for path, rec in zip(files, records):
        cloud = read_point_cloud(path)
        if args.mode == "sparse":
            cond = make_sparse_condition(cloud, args.rate, sensor)
        else:
            labels_path = path.parent / (path.stem + ".labels.npy")
            if not labels_path.is_file():
                raise ValueError(f"missing {labels_path.name}; semantic mode "
                                 "needs the synth label files")
            labels = np.load(labels_path)
            if rec is None or "label_names" not in rec:
                raise ValueError(f"sidecar of {path.name} lacks label_names")
            cond = make_semantic_condition(cloud, labels,
                                           len(rec["label_names"]), sensor)
        conditions.append(cond.data)
    cond_bank = torch.as_tensor(np.stack(conditions))
    image_bank = torch.as_tensor(images)

    torch.manual_seed(args.seed)
    control = ControlNet(dn, cond_bank.shape[1],
                         feed_noisy_input=args.noisy_input)
    tcfg = TrainConfig(total_steps=args.steps, gn_active_steps=args.steps,
                       learning_rate=args.lr, batch_size=args.batch,
                       scrg=False, weight_decay=args.weight_decay)
    schedule = cosine_schedule(config["diffusion_steps"])
    trainer = ControlTrainer(control, schedule, tcfg, args.seed)
    data_rng = np.random.default_rng(args.seed + 1)
    losses = []
    for step in range(args.steps):
        idx = torch.as_tensor(data_rng.integers(0, len(files), size=args.batch))
        rep = trainer.train_step(image_bank[idx], cond_bank[idx])
        losses.append(rep["loss_denoise"])
        if args.progress_every and (step + 1) % args.progress_every == 0:
            print(f"step {step + 1}/{args.steps} "
                  f"denoise {rep['loss_denoise']:.4f}", flush=True)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tail = losses[-min(50, len(losses)):]
    save_control_checkpoint(out, control,
                            extra={"mode": args.mode, "steps": args.steps,
                                   "final_loss_denoise": float(np.mean(tail))})
    print(f"control-trained {args.steps} steps ({args.mode}), "
          f"final denoise loss {float(np.mean(tail)):.4f} -> {out}")
    _write_manifest(args)
    return 0


def cmd_upsample(args) -> int:
    import torch
    from .controlnet import load_control_checkpoint, make_sparse_condition

    _limit_torch_threads()
    dn, sensor, config, _ = _load_denoiser(args.dn, use_ema=False)
    control, _ = load_control_checkpoint(_require_file(args.ckpt, "checkpoint"), dn)
    control.eval()
    schedule = cosine_schedule(config["diffusion_steps"])
    files = _cloud_files(_require_dir(args.infile, "input"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(files):
        cloud = read_point_cloud(path)
        cond = make_sparse_condition(cloud, args.rate, sensor)
        cond_t = cond.tensor()

        def model(x, t, condition):
            xt = torch.as_tensor(np.asarray(x, dtype=np.float32))
            with torch.no_grad():
                v = control(xt, int(t), cond_t.expand(xt.shape[0], -1, -1, -1))
            return v.numpy()

        shape = (1, 2, sensor.height, sensor.width)
        x = sample_loop(model, shape, schedule, args.seed + i)
        image = denormalize(np.moveaxis(x[0], 0, -1), sensor)
        dense = unproject(image, sensor)
        write_point_cloud(out / path.name, dense)
        _save_bev_png(out / (path.stem + "_bev.png"), dense)
        print(f"{path.name}: {cloud.shape[0]} -> {dense.shape[0]} points")
    _write_manifest(args)
    return 0


def cmd_downsample(args) -> int:
    sensor = _sensor_from_args(args)
    if args.rate is None and args.rows is None:
        raise ValueError("need --rate and/or --rows")
    if args.rate is not None and args.rate < 1:
        raise ValueError("--rate must be >= 1")
    if args.rows is not None and not 1 <= args.rows <= sensor.height:
        raise ValueError(f"--rows must lie in [1, {sensor.height}]")
    files = _cloud_files(_require_dir(args.infile, "input"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in files:
        cloud = read_point_cloud(path)
        if args.rows is not None:
            image = project(cloud, sensor)
            keep = np.round(np.linspace(0, sensor.height - 1,
                                        args.rows)).astype(int)
            mask = np.zeros(sensor.height, dtype=bool)
            mask[keep] = True
            image.valid &= mask[:, None]
            cloud = unproject(image, sensor)
        if args.rate is not None and len(cloud):
            from .controlnet import farthest_point_sample
            count = math.ceil(cloud.shape[0] / args.rate)
            idx = np.sort(farthest_point_sample(cloud[:, :3], count))
            cloud = cloud[idx]
        write_point_cloud(out / path.name, cloud)
        print(f"{path.name}: {cloud.shape[0]} points kept")
    _write_manifest(args)
    return 0


def cmd_eval(args) -> int:
    gen_files = _cloud_files(_require_dir(args.gen, "generated"))
    ref_files = _cloud_files(_require_dir(args.ref, "reference"))
    gen_clouds = [read_point_cloud(p) for p in gen_files]
    ref_clouds = [read_point_cloud(p) for p in ref_files]
    prompt_records = detections = None
    if args.prompts is not None:
        prompt_records = read_prompts(_require_file(args.prompts, "prompts"))
        if len(prompt_records) != len(gen_clouds):
            raise ValueError(f"{len(prompt_records)} prompt records for "
                             f"{len(gen_clouds)} generated clouds")
        detections = [detect_objects(c) for c in gen_clouds]
    result = report(gen_clouds, ref_clouds, prompt_records, detections,
                    grid_size=args.grid_size, bev_range=args.bev_range)
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(text, end="")
    _write_manifest(args)
    return 0


def _add_common(parser) -> None:
    parser.add_argument("--seed", type=int, default=0,
                        help="base seed for all randomness in this run")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of flag overrides (file wins)")


def _add_sensor(parser) -> None:
    parser.add_argument("--height", type=int, default=32)
    parser.add_argument("--width", type=int, default=1024)
    parser.add_argument("--fov-up", type=float, default=2.0)
    parser.add_argument("--fov-down", type=float, default=-25.0)
    parser.add_argument("--depth-min", type=float, default=0.5)
    parser.add_argument("--depth-max", type=float, default=63.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="t2ldm",
                     description="Desk-scale text-to-LiDAR diffusion pipeline.")
    sub = parser.add_subparsers(dest="verb", metavar="|".join(VERBS))

    p = sub.add_parser("synth", help="generate a procedural scene corpus")
    _add_common(p)
    _add_sensor(p)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--template", default="qua_loc_ori_wea_tim")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("annotate", help="caption scene sidecars into prompts")
    _add_common(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--template", default="qua_loc_ori_wea_tim")
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser("train", help="train the diffusion model on scenes")
    _add_common(p)
    _add_sensor(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--base-channels", type=int, default=64)
    p.add_argument("--diffusion-steps", type=int, default=64)
    p.add_argument("--gn-active-steps", type=int, default=None)
    p.add_argument("--snr-gamma", type=float, default=5.0)
    p.add_argument("--cfg-dropout", type=float, default=0.1)
    p.add_argument("--ema-decay", type=float, default=0.9997)
    p.add_argument("--scrg", action=argparse.BooleanOptionalAction,
                   default=True, help="representation guidance on/off")
    p.add_argument("--unconditional", action="store_true",
                   help="ignore sidecar prompts")
    p.add_argument("--log", type=Path, default=None, help="CSV loss log")
    p.add_argument("--progress-every", type=int, default=0)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="draw point clouds from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--prompt", default=None)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True,
                   help="sample the EMA weights (default) or the raw ones")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("control-train",
                       help="train a condition branch on a frozen denoiser")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True,
                   help="denoiser checkpoint to freeze")
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("sparse", "semantic"), default="sparse")
    p.add_argument("--rate", type=int, default=4,
                   help="sparse mode: farthest-point keep ratio")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--noisy-input", action="store_true",
                   help="also feed the noisy image to the condition branch")
    p.add_argument("--progress-every", type=int, default=0)
    p.set_defaults(handler=cmd_control_train)

    p = sub.add_parser("upsample",
                       help="densify sparse clouds with a control checkpoint")
    _add_common(p)
    p.add_argument("--dn", type=Path, required=True,
                   help="denoiser checkpoint the control branch was trained on")
    p.add_argument("--ckpt", type=Path, required=True,
                   help="control checkpoint")
    p.add_argument("--in", dest="infile", type=Path, required=True,
                   help="directory of sparse input clouds")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rate", type=int, default=1,
                   help="extra thinning applied before conditioning")
    p.set_defaults(handler=cmd_upsample)

    p = sub.add_parser("downsample", help="thin clouds by beam rows or ratio")
    _add_common(p)
    _add_sensor(p)
    p.add_argument("--in", dest="infile", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rate", type=int, default=None,
                   help="keep ceil(N / rate) farthest points")
    p.add_argument("--rows", type=int, default=None,
                   help="keep this many evenly spaced beam rows")
    p.set_defaults(handler=cmd_downsample)

    p = sub.add_parser("eval", help="score generated clouds against references")
    _add_common(p)
    p.add_argument("--gen", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--prompts", type=Path, default=None,
                   help="prompt JSONL for text-box recall")
    p.add_argument("--out", type=Path, default=Path("report.json"))
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--bev-range", type=float, default=50.0)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("project", help="project one cloud to a range image")
    _add_common(p)
    _add_sensor(p)
    p.add_argument("--in", dest="infile", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True,
                   help="output range-image path (.rmg; a .png lands beside it)")
    p.set_defaults(handler=cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    if getattr(args, "verb", None) is None:
        parser.print_usage(sys.stderr)
        print("error: a verb is required", file=sys.stderr)
        return 1
    try:
        _apply_config_file(args)
        _thread_cap()
        return int(args.handler(args) or 0)
    except (ValueError, FileNotFoundError, NotADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
