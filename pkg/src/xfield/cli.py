"""Command-line entry points.

Subcommands cover the full workflow: ``synth`` writes a synthetic dataset,
``train`` fits a model to a manifest, ``eval`` scores held-out views and
renders report figures, ``render``/``effect`` write single PNGs, and
``serve`` starts the HTTP render service.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, figures, metrics
from .data import GENERATORS, Observation, load_manifest, load_observations, save_image
from .modelio import export_checkpoint, export_model, import_checkpoint, model_header
from .render import ModelRuntime
from .training import AdamState, TrainConfig, train, write_loss_log


def _parse_coord_arg(text: str) -> np.ndarray:
    try:
        return np.array([float(p) for p in text.split(",")], dtype=np.float64)
    except ValueError:
        raise SystemExit(f"error: malformed coordinate {text!r} (want comma-separated numbers)")


def cmd_synth(args) -> int:
    kind = args.generator
    if kind == "translate1d":
        scene = data.synth_translate(size=args.size, total_shift_px=args.shift,
                                     n_frames=args.frames, seed=args.seed)
    elif kind == "lightfield_plane":
        rows, _, cols = args.grid.partition("x")
        scene = data.synth_lightfield_plane(size=args.size, disparity_px=args.disparity,
                                            grid=(int(rows), int(cols)), seed=args.seed)
    else:
        scene = data.synth_shadow_sweep(size=args.size, n_lights=args.lights,
                                        travel_px=args.travel, seed=args.seed)
    manifest_path = scene.save(args.out)
    print(f"wrote {len(scene.images)} frames + {manifest_path}")
    return 0


def _split_indices(manifest, protocol: str | None):
    if protocol:
        return data.holdout_split(manifest, protocol)
    if manifest.heldout:
        return data.holdout_split(manifest, "explicit")
    return list(range(len(manifest.images))), []


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    observations = load_observations(manifest, base_dir)
    train_idx, _ = _split_indices(manifest, args.protocol)
    train_obs = [observations[i] for i in train_idx]

    config = TrainConfig(learning_rate=args.lr, steps=args.steps, seed=args.seed,
                         k=args.k, delight=args.delight, flow_factor=args.flow_factor,
                         sigma=args.sigma, checkpoint_interval=args.checkpoint_interval)

    params = state = None
    start_step = 0
    history: list[float] = []
    if args.resume:
        params, _, adam_m, adam_v, start_step, history = import_checkpoint(args.resume)
        state = AdamState(m=adam_m, v=adam_v, t=start_step)
        print(f"resuming from step {start_step}")

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)

    def header_for(p):
        return model_header(p, manifest, base_dir, train_idx, config.to_json())

    def on_checkpoint(step, p, s, losses):
        if config.checkpoint_interval and step % config.checkpoint_interval == 0 and step != config.steps:
            ckpt_path = f"{args.out}.step{step:06d}.ckpt"
            export_checkpoint(p, header_for(p), s.m, s.v, step, losses, ckpt_path)
            print(f"checkpoint: {ckpt_path} (loss {losses[-1]:.5f})")

    params, losses = train(train_obs, manifest.dims, config, params=params, state=state,
                           start_step=start_step, loss_history=history,
                           on_checkpoint=on_checkpoint)
    export_model(params, header_for(params), args.out)
    log_path = args.out + ".loss.csv"
    write_loss_log(log_path, losses)
    print(f"trained {config.steps} steps; final loss {losses[-1]:.5f}")
    print(f"model: {args.out}\nloss log: {log_path}")
    return 0


def cmd_eval(args) -> int:
    runtime = ModelRuntime.load(args.model)
    manifest = load_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    observations = load_observations(manifest, base_dir)
    _, held_idx = _split_indices(manifest, args.protocol)
    if not held_idx:
        print("error: protocol holds out no images; nothing to evaluate", file=sys.stderr)
        return 2
    for obs in observations:
        obs.path = manifest.images[obs.index].path

    report = metrics.evaluate(lambda c: runtime.render_frame(c), observations, held_idx)
    os.makedirs(args.out, exist_ok=True)
    report.write(os.path.join(args.out, "report.json"), os.path.join(args.out, "report.csv"))
    figures.save_metric_bars(report, os.path.join(args.out, "metrics.png"))

    # epipolar sweep along the first dimension through the center of the rest
    sweep = []
    coords = np.linspace(0.0, 1.0, args.sweep)
    for value in coords:
        c = np.full(runtime.n_d, 0.5)
        c[0] = value
        sweep.append(runtime.render_frame(c))
    row = runtime.resolution[0] // 2
    slice_img = metrics.epipolar_slice(sweep, row)
    figures.save_epipolar_figure(slice_img, os.path.join(args.out, "epipolar.png"), coord_labels=coords)
    save_image(os.path.join(args.out, "epipolar_raw.png"), slice_img)

    loss_csv = args.model + ".loss.csv"
    if os.path.exists(loss_csv):
        losses = [float(line.split(",")[1]) for line in open(loss_csv).read().splitlines()[1:]]
        figures.save_loss_curve(losses, os.path.join(args.out, "loss.png"))

    agg = report.to_json()["aggregate"]
    print(f"mean mse {agg['mean_mse']:.3e}  mean psnr {agg['mean_psnr_db']}  mean ssim {agg['mean_ssim']:.4f}")
    print(f"report written to {args.out}")
    return 0


def cmd_render(args) -> int:
    runtime = ModelRuntime.load(args.model)
    coord = _parse_coord_arg(args.coord)
    if coord.shape[0] != runtime.n_d:
        print(f"error: coordinate has {coord.shape[0]} components, model wants {runtime.n_d}",
              file=sys.stderr)
        return 2
    img = runtime.render_frame(coord, width=args.width, height=args.height)
    save_image(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_effect(args) -> int:
    runtime = ModelRuntime.load(args.model)
    coord = _parse_coord_arg(args.coord)
    if coord.shape[0] != runtime.n_d:
        print(f"error: coordinate has {coord.shape[0]} components, model wants {runtime.n_d}",
              file=sys.stderr)
        return 2
    img = runtime.render_effect(coord, args.axis, args.radius, args.n,
                                width=args.width, height=args.height)
    save_image(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    runtime = ModelRuntime.load(args.model)
    server = serve(runtime, bind=args.bind, static_dir=args.static, verbose=True)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}/ (ctrl-c to stop)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xfield",
                                     description="train, evaluate and serve image-set interpolation models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("generator", choices=sorted(GENERATORS))
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=3, help="translate1d frame count")
    p.add_argument("--shift", type=float, default=8.0, help="translate1d total shift in px")
    p.add_argument("--grid", default="3x3", help="lightfield_plane grid, e.g. 3x3")
    p.add_argument("--disparity", type=float, default=4.0, help="lightfield_plane disparity px")
    p.add_argument("--lights", type=int, default=7, help="shadow_sweep light count")
    p.add_argument("--travel", type=float, default=16.0, help="shadow_sweep travel px")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model to a dataset")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--k", type=int, default=None, help="neighbor count (default: policy)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delight", action="store_true", help="enable shading/albedo splitting")
    p.add_argument("--flow-factor", type=int, default=1, choices=(1, 2, 4))
    p.add_argument("--sigma", type=float, default=10.0)
    p.add_argument("--protocol", choices=data.PROTOCOLS, default=None,
                   help="train only on the split's training side")
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint file to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score held-out images and render report figures")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("--protocol", choices=data.PROTOCOLS, default="explicit")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--sweep", type=int, default=17, help="epipolar sweep sample count")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one coordinate to PNG")
    p.add_argument("model")
    p.add_argument("--coord", required=True, help="comma-separated normalized coords")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("effect", help="render an averaged effect frame to PNG")
    p.add_argument("model")
    p.add_argument("--coord", required=True)
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.set_defaults(func=cmd_effect)

    p = sub.add_parser("serve", help="start the HTTP render service")
    p.add_argument("model")
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.add_argument("--static", default=None, help="viewer asset directory")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
