"""Command-line entry point: train, craft, eval, ablate, verify.

Every subcommand reads one JSON config (see config.DEFAULTS for the schema)
plus optional overrides, and writes artifacts under
<output.directory>/{checkpoints,deltas,reports}.

Exit codes are contract values: 0 ok, 2 invalid config, 3 training
divergence, 4 numerical failure while crafting, 5 missing artifact.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import attack as A
from . import config as C
from . import data as D
from . import evaluate as E
from . import models as M
from .errors import ArtifactMissing, ConfigError, CraftingFailed, TrainingDiverged
from .tensor import array_fingerprint, save_tensor

EXIT_CODES = {ConfigError: 2, TrainingDiverged: 3, CraftingFailed: 4, ArtifactMissing: 5}

ABLATE_AXES = ("rho", "r", "order", "curriculum")


def _out_dirs(cfg):
    root = cfg["output"]["directory"]
    dirs = {name: os.path.join(root, name) for name in ("checkpoints", "deltas", "reports")}
    for path in dirs.values():
        os.makedirs(path, exist_ok=True)
    return dirs


def load_datasets(cfg):
    """Materialize (crafting dataset, holdout dataset) from the config."""
    section = C.validate_dataset_section(cfg)
    if section["source"] == "idx":
        full = D.load_idx(section["images"], section["labels"])
    else:
        full = D.synth_blobs(
            section["num_classes"], section["n"], tuple(section["shape"]),
            section["spread"], seed=section["seed"], modes=section.get("modes", 1),
        )
    n = len(full)
    n_holdout = int(round(n * section["holdout_fraction"]))
    order = np.random.default_rng(section["seed"] ^ 0x5EED).permutation(n)
    hold_idx, train_idx = np.sort(order[:n_holdout]), np.sort(order[n_holdout:])
    train = D.Dataset(images=full.images[train_idx],
                      labels=None if full.labels is None else full.labels[train_idx],
                      name=f"{full.name}-train")
    holdout = D.Dataset(images=full.images[hold_idx],
                        labels=None if full.labels is None else full.labels[hold_idx],
                        name=f"{full.name}-holdout") if n_holdout else train
    craft_ds = train
    if section["subset_size"]:
        craft_ds = D.subset(train, section["subset_size"], seed=section["seed"])
    return craft_ds, train, holdout


def _checkpoint_path(cfg, dirs):
    explicit = cfg["model"]["checkpoint"]
    if explicit:
        return explicit
    arch = cfg["model"]["arch"]
    seed = cfg["model"]["train"]["seed"]
    return os.path.join(dirs["checkpoints"], f"{arch}-s{seed}.uapt")


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise ArtifactMissing(f"checkpoint not found: {path}")
    return M.load_checkpoint(path)


def cmd_train(cfg):
    dirs = _out_dirs(cfg)
    _, train_ds, holdout = load_datasets(cfg)
    section = cfg["model"]
    num_classes = int(train_ds.labels.max()) + 1 if train_ds.labels is not None else 0
    if num_classes < 2:
        raise ConfigError("training dataset must carry labels with at least two classes")
    try:
        spec = M.make_architecture(section["arch"], train_ds.sample_shape, num_classes, section["hidden"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = M.build_model(spec, train_ds.sample_shape, seed=section["train"]["seed"])
    tr = section["train"]
    model = M.train_erm(model, train_ds, epochs=tr["epochs"], lr=tr["lr"], batch=tr["batch"], seed=tr["seed"])
    path = _checkpoint_path(cfg, dirs)
    M.save_checkpoint(model, path, extra={
        "train_config": tr,
        "dataset_fingerprint": train_ds.fingerprint,
        "arch": section["arch"],
    })
    train_acc = model.history[-1]["accuracy"] if model.history else float("nan")
    test_acc = float(np.mean(model.predict(holdout.images) == holdout.labels))
    print(f"checkpoint: {path}")
    print(f"train accuracy: {train_acc:.4f}")
    print(f"test accuracy: {test_acc:.4f}")
    return 0


def _craft_target(cfg, dirs):
    paths = cfg["model"]["ensemble"] or [_checkpoint_path(cfg, dirs)]
    models = [_load_checkpoint(p)[0] for p in paths]
    return M.as_attack_target(models)


def cmd_craft(cfg):
    dirs = _out_dirs(cfg)
    craft_ds, _, _ = load_datasets(cfg)
    atk = C.attack_config(cfg)
    target = _craft_target(cfg, dirs)
    delta, runlog = A.craft(atk, target, craft_ds)
    tmp = os.path.join(dirs["deltas"], f"{atk.variant}-tmp.uapt")
    save_tensor(tmp, delta)
    short = A.file_content_hash(tmp)[:12]
    path = os.path.join(dirs["deltas"], f"{atk.variant}-{short}.uapt")
    os.replace(tmp, path)
    meta = A.save_uap_artifact(path, delta, atk, target, craft_ds, runlog)
    print(f"delta artifact: {path}")
    print(f"content hash: {meta['content_hash']}")
    print(f"final mean loss: {meta['run_summary']['final_mean_loss']:.4f}")
    return 0


def cmd_eval(cfg):
    dirs = _out_dirs(cfg)
    _, _, holdout = load_datasets(cfg)
    target_paths = cfg["eval"]["targets"] or [_checkpoint_path(cfg, dirs)]
    models = []
    for p in target_paths:
        model, _ = _load_checkpoint(p)
        models.append((os.path.splitext(os.path.basename(p))[0], model))
    delta_paths = cfg["eval"]["deltas"]
    if not delta_paths:
        raise ConfigError("eval.deltas must list at least one perturbation artifact")
    deltas = []
    for p in delta_paths:
        if not os.path.exists(p):
            raise ArtifactMissing(f"delta artifact not found: {p}")
        delta, meta = A.load_uap_artifact(p)
        tag = meta.get("config", {}).get("variant", os.path.basename(p))
        deltas.append((f"{tag}:{meta['content_hash'][:8]}", delta))
    tm = E.transfer_matrix(models, deltas, holdout)
    stem = os.path.join(dirs["reports"], f"transfer-{holdout.fingerprint[:8]}")
    written = []
    for fmt in cfg["output"]["formats"]:
        out = f"{stem}.{fmt}"
        E.report_write(tm, out, fmt)
        written.append(out)
    for i, tag in enumerate(tm.surrogates):
        print(f"{tag}: ratios {['%.4f' % v for v in tm.ratios[i]]} avg {tm.row_averages[i]:.4f}")
    for out in written:
        print(f"report: {out}")
    return 0


def cmd_ablate(cfg):
    dirs = _out_dirs(cfg)
    axis = cfg["ablate"]["axis"]
    values = cfg["ablate"]["values"]
    if axis not in ABLATE_AXES:
        raise ConfigError(f"ablate.axis must be one of {ABLATE_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("ablate.values must be a non-empty list")
    craft_ds, _, holdout = load_datasets(cfg)
    base = C.attack_config(cfg)
    target = _craft_target(cfg, dirs)
    rows = []
    for value in values:
        try:
            atk = replace(base, **{axis: value})
        except ValueError as exc:
            raise ConfigError(f"invalid sweep value {value!r} for axis {axis}: {exc}") from exc
        delta, _ = A.craft(atk, target, craft_ds)
        rep = E.fooling_ratio(target, holdout, delta)
        rows.append((value, rep.fooling_ratio, rep.n_evaluated, rep.delta_hash))
        print(f"{axis}={value}: fooling ratio {rep.fooling_ratio:.4f}")
    out = os.path.join(dirs["reports"], f"ablate-{axis}.csv")
    with open(out, "w") as f:
        f.write(f"{axis},fooling_ratio,n,delta_hash\n")
        for value, ratio, n, dh in rows:
            f.write(f"{value},{ratio:.4f},{n},{dh}\n")
    print(f"sweep report: {out}")
    return 0


def cmd_verify(cfg, paths):
    failures = 0
    for path in paths:
        if not os.path.exists(path) or not os.path.exists(path + ".json"):
            raise ArtifactMissing(f"artifact or metadata missing: {path}")
        with open(path + ".json") as f:
            meta = json.load(f)
        if "content_hash" in meta:
            actual = A.file_content_hash(path)
            ok = actual == meta["content_hash"]
        elif "params_fingerprint" in meta:
            model, _ = M.load_checkpoint(path)
            ok = array_fingerprint(model.params) == meta["params_fingerprint"]
        else:
            ok = False
        print(f"{'OK' if ok else 'MISMATCH'} {path}")
        failures += not ok
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="uapforge", description=__doc__)
    parser.add_argument("--config", help="path to the JSON run config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted path), repeatable")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="train the surrogate model and write a checkpoint")
    craft = sub.add_parser("craft", help="craft a universal perturbation artifact")
    craft.add_argument("--variant", choices=sorted(A.VARIANTS), help="attack variant preset")
    sub.add_parser("eval", help="evaluate perturbation artifacts against target models")
    ablate = sub.add_parser("ablate", help="sweep one attack axis, craft + eval per point")
    ablate.add_argument("--axis", choices=ABLATE_AXES)
    ablate.add_argument("--values", help="JSON list of sweep values")
    verify = sub.add_parser("verify", help="recompute artifact hashes and compare")
    verify.add_argument("paths", nargs="+", help="artifact files to verify")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    sets = list(args.set)
    if getattr(args, "variant", None):
        sets.append(f"attack.variant={args.variant}")
    if getattr(args, "axis", None):
        sets.append(f"ablate.axis={args.axis}")
    if getattr(args, "values", None):
        sets.append(f"ablate.values={args.values}")
    try:
        cfg = C.load_config(args.config, sets=sets)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "craft":
            return cmd_craft(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.paths)
    except (ConfigError, TrainingDiverged, CraftingFailed, ArtifactMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        for cls, code in EXIT_CODES.items():
            if isinstance(exc, cls):
                return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
