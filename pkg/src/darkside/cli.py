"""Command-line entry point.

Subcommands: ``synth``, ``gan-train``, ``translate`` (alias
``gan-translate``), ``embed-train``, ``extract``, ``evaluate``.

Exit codes: 0 success, 2 invalid input or configuration (detected before
any work starts), 1 failure while running.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("darkside")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Reruns with the same seed on the same machine are expected to agree to
# this relative tolerance; on CPU they are bit-identical in practice.
DETERMINISTIC_RTOL = 1e-6


class ConfigError(ValueError):
    pass


def default_config(name: str) -> dict:
    """Shipped full-default config template, e.g. ``default_config("gan")``."""
    return json.loads(resources.files("darkside.configs").joinpath(f"{name}.json").read_text())


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(name: str, path, seed=None) -> dict:
    cfg = default_config(name)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


class OutputDir:
    """Exclusive use of an output directory via a lockfile, plus a config echo."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory {self.path} is locked by another run ({self.lock})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)

    def echo(self, command, config):
        doc = {"command": command, "version": __version__, "config": config}
        (self.path / "config.json").write_text(json.dumps(doc, indent=1, default=str))


def _resolve(path, base=None) -> Path:
    path = Path(path)
    if path.is_absolute() or base is None:
        return path
    return Path(base) / path


def _seed_all(seed):
    import torch

    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"image directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"image directory {directory} holds no PNG/JPEG files")
    return files


# descriptor files -------------------------------------------------------------------


def write_descriptors(path, ids, descs, extra=None) -> Path:
    """Row-major little-endian float32 matrix plus a JSON sidecar."""
    path = Path(path)
    descs = np.asarray(descs, dtype="<f4")
    path.write_bytes(np.ascontiguousarray(descs).tobytes())
    meta = {"ids": list(ids), "dim": int(descs.shape[1]), "dtype": "float32", "endianness": "little", **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return path


def read_descriptors(path):
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix(".bin")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read descriptor file {path}: {err}") from err
    n, dim = len(meta["ids"]), meta["dim"]
    if raw.size != n * dim:
        raise ConfigError(f"{path}: {raw.size} floats for {n} ids of dim {dim}")
    return meta["ids"], raw.reshape(n, dim).astype(np.float64)


# commands: each validates its inputs and returns the function doing the work ------------


def cmd_synth(args):
    from .data import SceneSpec, make_synthetic_daynight

    cfg = load_config("synth", args.config, args.seed)
    try:
        spec = SceneSpec(**cfg)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    out = _require_out(args)

    def run():
        with OutputDir(out) as od:
            od.echo("synth", cfg)
            ds = make_synthetic_daynight(spec, od.path)
            log.info("synthetic dataset in %s: %s", od.path, ds.summary())

    return run


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


def _gan_domain_sets(cfg, base):
    from .data import load_dataset, read_image

    if cfg.get("manifest"):
        ds = load_dataset(_resolve(cfg["manifest"], base), min_size=cfg.get("min_size"))
        day_ids = ds.select(cfg.get("day_split"), "day")
        night_ids = ds.select(cfg.get("night_split"), "night")
        if not day_ids or not night_ids:
            raise ConfigError(f"manifest yields {len(day_ids)} day and {len(night_ids)} night images; both must be non-empty")
        return [ds.load_image(i) for i in day_ids], [ds.load_image(i) for i in night_ids]
    if not cfg.get("day_dir") or not cfg.get("night_dir"):
        raise ConfigError("gan-train needs either 'manifest' or both 'day_dir' and 'night_dir'")
    day_files = list_images(_resolve(cfg["day_dir"], base))
    night_files = list_images(_resolve(cfg["night_dir"], base))
    return [read_image(p) for p in day_files], [read_image(p) for p in night_files]


def build_teacher(tcfg: dict, day_images):
    from . import edges

    kind = tcfg.get("kind", "tiny")
    if kind == "hed":
        if not tcfg.get("weights"):
            raise ConfigError("teacher kind 'hed' needs a 'weights' file")
        return edges.load_hed_weights(edges.HED(), tcfg["weights"])
    if kind != "tiny":
        raise ConfigError(f"unknown teacher kind {kind!r}")
    teacher = edges.tiny_hed(tcfg.get("seed", 0))
    n = min(len(day_images), tcfg.get("fit_images", 300))
    imgs = np.stack(day_images[:n])
    edges.fit_edge_detector(teacher, imgs, edges.sobel_edge_targets(imgs), steps=tcfg.get("fit_steps", 300), seed=tcfg.get("seed", 0))
    return teacher


def cmd_gan_train(args):
    from .nightgan import GanConfig, train_gan

    cfg = load_config("gan", args.config, args.seed)
    base = Path(args.config).parent if args.config else None
    try:
        gan_cfg = GanConfig.from_dict({**cfg["gan"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    out = _require_out(args)
    day, night = _gan_domain_sets(cfg, base)
    need = int(np.ceil(gan_cfg.crop / gan_cfg.scale_range[1]))
    small = [i for i, im in enumerate(day + night) if min(im.shape[:2]) < need]
    if small:
        raise ConfigError(f"{len(small)} images are smaller than the {need} px needed for {gan_cfg.crop} px crops")

    def run():
        _seed_all(gan_cfg.seed)
        with OutputDir(out) as od:
            od.echo("gan-train", cfg)
            teacher = None
            if gan_cfg.variant != "cycle" and (gan_cfg.lambda_edge > 0 or gan_cfg.variant == "hedn_gan"):
                teacher = build_teacher(cfg.get("teacher", {}), day)
            with open(od.path / "losses.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                header = ["epoch", "adv_g", "adv_d", "edge_l1", "student_l1", "cycle", "identity"]
                writer.writerow(header)

                def on_epoch(epoch, avg, state):
                    writer.writerow([epoch, *(f"{getattr(avg, k):.8g}" for k in header[1:])])
                    fh.flush()

                train_gan(day, night, gan_cfg, teacher=teacher, out_dir=od.path, on_epoch=on_epoch)

    return run


def cmd_translate(args):
    import torch

    from .checkpoint import load_checkpoint
    from .data import read_image, write_image
    from .nightgan import load_generator, translate_image

    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    ckpt = load_checkpoint(args.ckpt, kind="gan")
    gen = load_generator(ckpt)
    files = list_images(args.input)
    out = _require_out(args)

    def run():
        torch.manual_seed(0)
        with OutputDir(out) as od:
            od.echo("translate", {"ckpt": str(args.ckpt), "input": str(args.input), "count": len(files)})
            for f in files:
                write_image(od.path / (f.stem + ".png"), np.clip(translate_image(gen, read_image(f)), 0, 1))

    return run


def cmd_embed_train(args):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .embedding import EmbeddingConfig, check_generator, train_embedding
    from .mining import MiningConfig
    from .nightgan import load_generator

    cfg = load_config("embed", args.config, args.seed)
    base = Path(args.config).parent if args.config else None
    try:
        ecfg = EmbeddingConfig.from_dict(cfg["embedding"])
        mcfg = MiningConfig(**cfg["mining"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    if not cfg.get("manifest"):
        raise ConfigError("embed-train needs a 'manifest'")
    ds = load_dataset(_resolve(cfg["manifest"], base))
    ids = ds.select(cfg.get("train_split"), cfg.get("train_domain"))
    gen = None
    if cfg.get("generator_ckpt") and mcfg.translate_prob > 0:
        gen = load_generator(load_checkpoint(_resolve(cfg["generator_ckpt"], base), kind="gan"))
        check_generator(gen, ecfg)
    elif mcfg.translate_prob > 0:
        raise ConfigError("mining.translate_prob > 0 needs 'generator_ckpt'")
    out = _require_out(args)

    def run():
        _seed_all(cfg["seed"])
        with OutputDir(out) as od:
            od.echo("embed-train", cfg)
            result = train_embedding(ds, ecfg, mcfg, cfg["epochs"], seed=cfg["seed"], ids=ids, generator=gen, out_dir=od.path)
            with open(od.path / "losses.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "loss"])
                w.writerows([e + 1, f"{v:.8g}"] for e, v in enumerate(result.epoch_losses))

    return run


def cmd_extract(args):
    from .data import load_dataset
    from .embedding import extract_descriptors, load_embedding

    if not args.ckpt or not args.manifest:
        raise ConfigError("extract needs --ckpt and --manifest")
    model = load_embedding(args.ckpt)
    ds = load_dataset(args.manifest)
    ids = ds.select(args.split, args.domain)
    out = _require_out(args)

    def run():
        with OutputDir(out) as od:
            od.echo("extract", {"ckpt": str(args.ckpt), "manifest": str(args.manifest), "split": args.split})
            descs = extract_descriptors(model, [ds.load_image(i) for i in ids])
            write_descriptors(od.path / "descriptors.bin", ids, descs, {"checkpoint": str(args.ckpt)})

    return run


def cmd_evaluate(args):
    from .data import load_dataset
    from .evaluation import EvalProtocol, ensemble_concat, evaluate_map, write_report, write_table

    if not args.desc or not args.manifest:
        raise ConfigError("evaluate needs at least one --desc and a --manifest")
    ds = load_dataset(args.manifest, check_paths=False)
    sets = []
    for path in args.desc:
        ids, descs = read_descriptors(path)
        missing = [i for i in ids if i not in ds.index]
        if missing:
            raise ConfigError(f"{path}: id {missing[0]!r} is not in the manifest")
        sets.append((Path(path).parent.name or Path(path).stem, ids, descs))
    try:
        protocols = [EvalProtocol.parse(p) for p in (args.protocol or ["tokyo"])]
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if len(sets) == 2 and sets[0][1] != sets[1][1]:
        order = {i: n for n, i in enumerate(sets[1][1])}
        if set(order) != set(sets[0][1]):
            raise ConfigError("ensemble needs both descriptor files to cover the same ids")
        sets[1] = (sets[1][0], sets[0][1], sets[1][2][[order[i] for i in sets[0][1]]])
    out = _require_out(args)

    def run():
        with OutputDir(out) as od:
            od.echo("evaluate", {"desc": [str(p) for p in args.desc], "manifest": str(args.manifest), "protocol": args.protocol})
            named = [(name, ids, d) for name, ids, d in sets]
            if len(sets) == 2:
                named.append((f"{sets[0][0]}+{sets[1][0]}", sets[0][1], ensemble_concat(sets[0][2], sets[1][2])))
            table, report = {}, []
            for name, ids, d in named:
                results = [evaluate_map(d, ids, ds, p) for p in protocols]
                table[name] = results
                report.append({"descriptors": name, "results": [r.to_json() for r in results]})
                for r in results:
                    log.info("%s %s mAP %.4f (%d queries, %d skipped)", name, r.protocol, r.mAP, len(r.per_query), len(r.skipped))
            (od.path / "metrics.json").write_text(json.dumps(report, indent=1))
            write_table(od.path / "table.csv", table)

    return run


COMMANDS = {
    "synth": cmd_synth,
    "gan-train": cmd_gan_train,
    "translate": cmd_translate,
    "gan-translate": cmd_translate,
    "embed-train": cmd_embed_train,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config; unspecified keys take the shipped defaults")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory (one run per directory)")
    common.add_argument("--device", default="cpu", help="torch device")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="darkside", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render a synthetic day/night dataset")
    sub.add_parser("gan-train", parents=[common], help="train a day-to-night generator")
    for name in ("translate", "gan-translate"):
        p = sub.add_parser(name, parents=[common], help="translate a directory of day images")
        p.add_argument("--ckpt", type=Path)
        p.add_argument("--in", dest="input", type=Path, required=True)
    sub.add_parser("embed-train", parents=[common], help="train a global descriptor network")
    p = sub.add_parser("extract", parents=[common], help="extract descriptors for a manifest")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split")
    p.add_argument("--domain")
    p = sub.add_parser("evaluate", parents=[common], help="retrieval mAP of descriptor files")
    p.add_argument("--desc", type=Path, action="append", help="descriptor file; give two for an ensemble")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--protocol", action="append", help="plain | tokyo | domain:<query>:<positive>; repeatable")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.device != "cpu":
        log.error("only the cpu device is supported, got %r", args.device)
        return 2
    try:
        run = COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        log.error("%s: %s", args.command, err)
        return 2
    try:
        run()
    except ConfigError as err:
        log.error("%s: %s", args.command, err)
        return 2
    except Exception:
        log.exception("%s failed", args.command)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
