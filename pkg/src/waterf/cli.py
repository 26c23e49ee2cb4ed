"""waterf command line.

Experiments are described by a JSON config (``--config``); ``--set key=value``
overrides single entries, with dotted keys reaching into nested sections
(``--set pipeline.msg_len=16``). Exit codes: 0 success, 1 runtime failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

EXPERIMENTS = ("capacity", "invisibility", "robustness", "transform", "subband", "identification")


class UsageError(Exception):
    """Bad arguments or config; exit code 2."""


@dataclass
class ExperimentConfig:
    pipeline: dict = field(default_factory=dict)
    experiment: str = "capacity"
    attacks: list | None = None
    lengths: list = field(default_factory=lambda: [4, 8, 16])
    num_messages: int = 20
    output_dir: str | None = None

    def validate(self):
        from .attacks import AttackSpec
        from .evalbench import PipelineConfig

        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"experiment: must be one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        try:
            pipe = PipelineConfig.from_json(self.pipeline)
            attacks = [AttackSpec.from_json(a) for a in self.attacks] if self.attacks is not None else None
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"config: {exc}") from None
        if self.num_messages < 1:
            raise UsageError("num_messages: must be >= 1")
        return pipe, attacks


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = json.loads(json.dumps(data))
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(path: str | None, overrides: list[str], known: set | None = None) -> dict:
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
    data = apply_overrides(data, overrides)
    if known is not None:
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"config: unknown keys {sorted(unknown)}")
    return data


def _guard_output(path: str, force: bool):
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _read_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise UsageError(f"image not found: {path}")
    if path.endswith(".npy"):
        return np.load(path).astype(np.float64)
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _write_image(path: str, img):
    arr = np.asarray(img, dtype=np.float64)
    if path.endswith(".npy"):
        np.save(path, arr)
    else:
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def _decoder(path: str | None, length: int | None):
    from .codec import load_codec
    from .desk import bundled_decoder

    if path:
        if not os.path.exists(path):
            raise UsageError(f"decoder checkpoint not found: {path}")
        return load_codec(path)[0].double()
    if length is None:
        raise UsageError("pass --decoder or --length")
    return bundled_decoder(length)[0].double()


# --- subcommands ---------------------------------------------------------------------

def cmd_decoder_train(args):
    from .codec import DecoderTrainConfig, NoiseLayerConfig, evaluate_codec, save_codec, train_decoder
    from .corpus import load_corpus

    if not args.corpus or not os.path.isdir(args.corpus):
        raise UsageError(f"corpus directory not found: {args.corpus}")
    data = load_config(args.config, args.set, set(DecoderTrainConfig.__dataclass_fields__))
    for key in ("msg_len", "epochs", "seed", "image_size"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if isinstance(data.get("noise"), dict):
        data["noise"] = NoiseLayerConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in data["noise"].items()})
    try:
        cfg = DecoderTrainConfig(**data)
    except TypeError as exc:
        raise UsageError(f"config: {exc}") from None
    _guard_output(args.out, args.force)
    images = load_corpus(args.corpus, cfg.image_size)
    n_held = max(1, len(images) // 10)
    train, held = images[:-n_held], images[-n_held:]
    if len(train) < cfg.min_corpus:
        raise UsageError(f"corpus has {len(train)} training images, need at least {cfg.min_corpus}")
    enc, dec, history = train_decoder(train, cfg)
    acc = evaluate_codec(enc, dec, held, None, seed=cfg.seed)
    meta = {"epochs": cfg.epochs, "noise": asdict(cfg.noise), "training_seed": cfg.seed,
            "heldout_bit_accuracy_clean": acc, "history": history}
    path = save_codec(args.out, dec, "decoder", meta)
    if args.encoder_out:
        save_codec(args.encoder_out, enc, "encoder", meta)
    print(json.dumps({"checkpoint": path, "heldout_bit_accuracy": acc}))


def cmd_whiten(args):
    from .codec import fit_whitening, load_codec, save_codec
    from .corpus import load_corpus
    from .desk import calibration_inputs
    from .wavelet import TransformSpec, decoder_view

    if not os.path.exists(args.decoder):
        raise UsageError(f"decoder checkpoint not found: {args.decoder}")
    dec, meta = load_codec(args.decoder)
    if meta.get("role") != "decoder":
        raise UsageError(f"{args.decoder} is not a decoder checkpoint")
    _guard_output(args.out, args.force)
    t = TransformSpec()
    if args.calibration == "desk":
        calib = calibration_inputs(args.num_images, seed=args.seed, transform=t)
    else:
        if not os.path.isdir(args.calibration):
            raise UsageError(f"calibration directory not found: {args.calibration}")
        import torch

        calib = decoder_view(torch.from_numpy(load_corpus(args.calibration, 64)), t).numpy()
    white = fit_whitening(dec, calib)
    path = save_codec(args.out, white, "decoder", {**meta, "calibration_size": len(calib)})
    print(json.dumps({"checkpoint": path}))


def _pipeline_from(args):
    from .evalbench import PipelineConfig

    data = load_config(args.config, args.set)
    if "pipeline" in data:
        data = data["pipeline"]
    try:
        return PipelineConfig.from_json(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None


def cmd_finetune(args):
    from .evalbench import run_pipeline
    from .field import save_field

    cfg = _pipeline_from(args)
    _guard_output(args.out, args.force)
    os.makedirs(args.out, exist_ok=True)
    result = run_pipeline(cfg, run_dir=args.out, progress=lambda r: print(json.dumps(
        {k: v for k, v in r.items() if k != "divergence_events"}), flush=True))
    path = save_field(result.field, os.path.join(args.out, "field"),
                      {"message": result.report.metadata["message"], "pipeline": cfg.to_json()})
    print(json.dumps({"run_dir": args.out, "field": path, **result.report.aggregate}))


def _load_field_and_views(args):
    from .desk import desk_scene
    from .evalbench import PipelineConfig
    from .field import load_field

    if not os.path.exists(args.field):
        raise UsageError(f"field checkpoint not found: {args.field}")
    f, meta = load_field(args.field)
    cfg = PipelineConfig.from_json(meta["pipeline"]) if "pipeline" in meta else PipelineConfig()
    scene = desk_scene(cfg.scene)
    return f.double(), meta, cfg, scene


def cmd_render(args):
    from .field import render_image_nograd

    f, _, _, scene = _load_field_and_views(args)
    views = scene.heldout if args.views == "heldout" else scene.train + scene.heldout
    _guard_output(args.out, args.force)
    os.makedirs(args.out, exist_ok=True)
    for i, v in enumerate(views):
        _write_image(os.path.join(args.out, f"view_{i:03d}.png"), render_image_nograd(f, v.camera, scene.sampling))
    print(json.dumps({"out": args.out, "views": len(views)}))


def cmd_extract(args):
    import torch

    from .attacks import prepare_for_extraction
    from .codec import bit_accuracy, bits_to_str, str_to_bits
    from .field import render_image_nograd
    from .finetune import extract_message
    from .wavelet import TransformSpec

    if bool(args.image) == bool(args.field):
        raise UsageError("pass exactly one of --image or --field")
    t = TransformSpec()
    message = None
    if args.message:
        try:
            message = str_to_bits(args.message)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.field:
        f, meta, cfg, scene = _load_field_and_views(args)
        t = cfg.transform
        images = [render_image_nograd(f, v.camera, scene.sampling) for v in scene.heldout]
        length = args.length or len(meta.get("message", "")) or cfg.msg_len
        if message is None and "message" in meta:
            message = str_to_bits(meta["message"])
    else:
        images = [torch.from_numpy(_read_image(args.image))]
        length = args.length or (len(message) if message is not None else None)
    dec = _decoder(args.decoder, length)
    out = []
    for img in images:
        logits = extract_message(prepare_for_extraction(img, t), dec, t)
        row = {"bits": bits_to_str((logits > 0).int())}
        if message is not None:
            row["bit_accuracy"] = bit_accuracy(logits, message)
        out.append(row)
    bits = out[0]["bits"]
    print(bits)
    summary = {"views": out}
    if message is not None:
        summary["bit_accuracy"] = float(np.mean([r["bit_accuracy"] for r in out]))
    print(json.dumps(summary))


ATTACK_FLAGS = {"variance": "variance", "max_angle": "max_angle", "factor": "factor", "sigma": "sigma",
                "keep_area": "keep_area", "quality": "quality"}


def cmd_attack(args):
    from .attacks import AttackSpec, apply_attack

    data = load_config(args.config, args.set)
    if args.kind:
        params = {k: getattr(args, flag) for flag, k in ATTACK_FLAGS.items() if getattr(args, flag) is not None}
        if args.upscale_back:
            params["upscale_back"] = True
        data = {"kind": args.kind, "params": {**data.get("params", {}), **params}, "seed": args.seed}
    if "kind" not in data:
        raise UsageError("pass --kind or a config with an attack spec")
    try:
        spec = AttackSpec.from_json(data)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"attack: {exc}") from None
    img = _read_image(args.image)
    _guard_output(args.out, args.force)
    out = apply_attack(img, spec)
    _write_image(args.out, out)
    print(json.dumps({"out": args.out, "attack": spec.to_json(), "shape": list(out.shape)}))


def cmd_evaluate(args):
    from . import evalbench

    data = load_config(args.config, args.set, set(ExperimentConfig.__dataclass_fields__))
    if args.experiment:
        data["experiment"] = args.experiment
    try:
        exp = ExperimentConfig(**data)
    except TypeError as exc:
        raise UsageError(f"config: {exc}") from None
    pipe, attacks = exp.validate()
    out = args.out or exp.output_dir
    if not out:
        raise UsageError("pass --out or set output_dir")
    _guard_output(os.path.join(out, "report.json"), args.force)
    if exp.experiment == "capacity":
        res = evalbench.evaluate_capacity(pipe, lengths=exp.lengths)
    elif exp.experiment == "invisibility":
        res = evalbench.evaluate_invisibility(pipe)
    elif exp.experiment == "robustness":
        res = evalbench.evaluate_robustness(pipe, specs=attacks)
    elif exp.experiment == "transform":
        res = evalbench.ablate_transform(pipe)
    elif exp.experiment == "subband":
        res = evalbench.ablate_subband(pipe)
    else:
        res = evalbench.identification_experiment(pipe, num_messages=exp.num_messages)
    evalbench.emit_report([res], out, overwrite=args.force)
    print(json.dumps({"report": os.path.join(out, "report.json")}))


def cmd_report(args):
    from . import evalbench

    experiments = []
    for d in args.inputs:
        if not os.path.exists(os.path.join(d, "report.json")):
            raise UsageError(f"no report.json in {d}")
        experiments.extend(evalbench.load_report(d)["experiments"])
    _guard_output(os.path.join(args.out, "report.json"), args.force)
    evalbench.emit_report(experiments, args.out, overwrite=args.force)
    print(json.dumps({"report": os.path.join(args.out, "report.json"), "experiments": len(experiments)}))


# --- parser --------------------------------------------------------------------------

def _common(p, out_required=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (dotted keys for nested sections; repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if out_required is not None:
        p.add_argument("--out", required=out_required, help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="waterf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decoder-train", help="pre-train encoder/decoder on an image directory")
    _common(p)
    p.add_argument("--corpus", required=True, help="directory of .png/.jpg images (>= 1000 for training)")
    p.add_argument("--length", dest="msg_len", type=int, help="message length L")
    p.add_argument("--epochs", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder-out", help="also save the encoder here")
    p.set_defaults(func=cmd_decoder_train)

    p = sub.add_parser("whiten", help="fold output whitening into a decoder")
    _common(p)
    p.add_argument("--decoder", required=True)
    p.add_argument("--calibration", default="desk", help="image directory, or 'desk' for built-in renders/crops")
    p.add_argument("--num-images", type=int, default=1200)
    p.add_argument("--seed", type=int, default=2)
    p.set_defaults(func=cmd_whiten)

    p = sub.add_parser("finetune", help="embed a message into the desk field")
    _common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("render", help="render views of a field checkpoint")
    _common(p)
    p.add_argument("--field", required=True)
    p.add_argument("--views", choices=("heldout", "all"), default="heldout")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract", help="decode the message from an image or a field's held-out renders")
    _common(p, out_required=None)
    p.add_argument("--image")
    p.add_argument("--field")
    p.add_argument("--decoder", help="decoder checkpoint (default: bundled decoder for --length)")
    p.add_argument("--length", type=int)
    p.add_argument("--message", help="expected bit string, to report accuracy")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", help="apply one distortion to an image")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--kind", help="identity, gaussian_noise, rotation, scaling, gaussian_blur, crop, brightness, jpeg")
    p.add_argument("--variance", type=float)
    p.add_argument("--max-angle", dest="max_angle", type=float, help="radians")
    p.add_argument("--factor", type=float, help="brightness or scaling factor")
    p.add_argument("--sigma", type=float)
    p.add_argument("--keep-area", dest="keep_area", type=float)
    p.add_argument("--quality", type=int)
    p.add_argument("--upscale-back", action="store_true", help="scaling: resize back to the input size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="run one experiment protocol and write report.json")
    _common(p, out_required=False)
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge report.json files and redraw tables/plots")
    _common(p)
    p.add_argument("inputs", nargs="+", help="directories holding report.json")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"waterf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with exit code 1
        print(f"waterf {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
