"""Command-line entry point: ``mtgen <command> [options]``.

Every command writes into ``<out>/<name>`` (by default
``<command>-s<seed>-<timestamp>``) and refuses to reuse a nonempty run
directory unless ``--force`` is given. Exit status is 0 on success, 1 on
any error and 2 on bad command-line usage.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import diffnum as dn
from .config import RunConfig, parse_file, parse_override, schema_text
from .cvae import CvaeStage, StageConfig, encode, train_stage
from .datasets import LabeledDataset, load_idx, split, synth_shapes, write_idx
from .errors import ConfigurationError, OrderingError, UnsupportedLatentError
from .generator import (
    GenerationConfig, apply_verdicts, contact_sheet, export_suite, generate, load_suite,
    write_manifest, write_pgm,
)
from .harness import ClassifierConfig, DropoutClassifier, StubClassifier, train_classifier
from .metrics import fid_report
from .search import FitnessWeights, SwarmConfig, write_trajectory

SCATTER_RADIUS = 3.0


# -- shared plumbing -------------------------------------------------------------

def load_config(args):
    values = parse_file(args.config) if args.config else {}
    for item in args.set or []:
        key, value = parse_override(item)
        values[key] = value
    if args.seed is not None:
        values["seed"] = args.seed
    return RunConfig(values)


def load_dataset(cfg):
    """Resolve the configured dataset and split it into ``(train, validation)``."""
    if cfg["dataset"] == "synth":
        data = synth_shapes(cfg["dataset.num_classes"], cfg["dataset.per_class"], cfg["dataset.side"],
                            seed=cfg.subseed("data"), noise=cfg["dataset.noise"])
    else:
        images, labels = cfg["dataset.images"], cfg["dataset.labels"]
        if not images or not labels:
            raise ConfigurationError("dataset = idx needs dataset.images and dataset.labels")
        for path in (images, labels):
            if not Path(path).is_file():
                raise ConfigurationError(f"dataset file not found: {path}")
        data = load_idx(images, labels)
    return split(data, cfg["dataset.val_fraction"], seed=cfg.subseed("split"))


def run_dir(args, command, cfg):
    name = args.name or f"{command}-s{cfg['seed']}-{time.strftime('%Y%m%d-%H%M%S')}"
    path = Path(args.out) / name
    if path.exists() and any(path.iterdir()) and not args.force:
        raise ConfigurationError(f"run directory {path} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}"
             for k, v in cfg.as_dict().items()]
    (path / "config.txt").write_text("\n".join(lines) + "\n")
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def require_file(path, what):
    if path is None or not Path(path).is_file():
        raise ConfigurationError(f"{what} checkpoint not found: {path}")
    return path


def load_stage(path, expected_stage):
    stage = CvaeStage.load(require_file(path, f"stage-{expected_stage}"))
    if stage.stage != expected_stage:
        raise ConfigurationError(f"{path} holds a stage-{stage.stage} model, expected stage {expected_stage}")
    return stage


def load_images(source, cfg):
    """Image sets for ``fid``: ``train``, ``val``, ``noise``, a ``.npy`` file or a suite directory."""
    if source in ("train", "val"):
        train, val = load_dataset(cfg)
        return (train if source == "train" else val).images
    if source == "noise":
        train, _ = load_dataset(cfg)
        rng = cfg.rng("noise")
        return rng.random(train.images.shape).astype(np.float32)
    path = Path(source)
    if path.is_dir():
        return np.load(path / "images.npy")
    if path.suffix == ".npy" and path.is_file():
        return np.load(path)
    raise ConfigurationError(f"cannot resolve image set {source!r}")


def classifier_config(cfg):
    return ClassifierConfig(hidden=cfg["clf.hidden"], dropout=cfg["clf.dropout"], epochs=cfg["clf.epochs"],
                            batch_size=cfg["clf.batch_size"], lr=cfg["clf.lr"],
                            val_fraction=cfg["dataset.val_fraction"])


def stage_config(cfg, stage):
    if stage == 1:
        return StageConfig(cfg["vae.latent_dim"], cfg["vae.hidden"], cfg["vae.epochs"],
                           cfg["vae.batch_size"], cfg["vae.lr"])
    return StageConfig(cfg["vae.latent_dim2"] or cfg["vae.latent_dim"], cfg["vae.hidden2"],
                       cfg["vae.epochs2"], cfg["vae.batch_size"], cfg["vae.lr"])


def write_history(path, history):
    lines = ["epoch\ttotal\trecon\tkl\tgamma"]
    lines += ["\t".join([str(i)] + [repr(v) for v in row]) for i, *row in history.rows()]
    Path(path).write_text("\n".join(lines) + "\n")


# -- commands ------------------------------------------------------------------------

def cmd_train_vae(args, cfg, out):
    train, val = load_dataset(cfg)
    shape = list(train.image_shape)
    if args.stage in ("1", "both"):
        stage1, hist1 = train_stage(train.flat(), train.labels, train.num_classes, stage_config(cfg, 1),
                                    cfg.rng("vae.stage1"), stage=1)
        stage1.save(out / "stage1.ckpt", image_shape=shape)
        write_history(out / "loss_stage1.tsv", hist1)
        # originals on the top row, reconstructions below
        picks = np.concatenate([np.flatnonzero(val.labels == c)[:2] for c in range(val.num_classes)])
        originals = val.images[picks]
        with dn.no_grad():
            flat = originals.reshape(len(picks), -1)
            recon = stage1.decode(stage1.encode(flat, val.labels[picks]).mu, val.labels[picks]).data
        sheet = contact_sheet(np.concatenate([originals, recon.reshape(originals.shape)]), columns=len(picks))
        write_pgm(out / "recon_sheet.pgm", sheet)
        print(f"stage 1: final loss {hist1.total[-1]:.4f}, gamma {hist1.gamma[-1]:.4g}")
    else:
        if args.stage1 is None or not Path(args.stage1).is_file():
            raise OrderingError("stage 2 needs a trained stage-1 checkpoint (--stage1); train stage 1 first")
        stage1 = load_stage(args.stage1, 1)
        if stage1.input_dim != train.input_dim or stage1.num_classes != train.num_classes:
            raise ConfigurationError("stage-1 checkpoint does not match the configured dataset")
    if args.stage in ("2", "both"):
        codes = encode(train.flat(), train.labels, stage1).mu.data
        stage2, hist2 = train_stage(codes, train.labels, train.num_classes, stage_config(cfg, 2),
                                    cfg.rng("vae.stage2"), stage=2)
        stage2.save(out / "stage2.ckpt", image_shape=shape)
        write_history(out / "loss_stage2.tsv", hist2)
        print(f"stage 2: final loss {hist2.total[-1]:.4f}, gamma {hist2.gamma[-1]:.4g}")


def cmd_train_classifier(args, cfg, out):
    train, val = load_dataset(cfg)
    clf, report, _ = train_classifier(train, classifier_config(cfg), cfg.rng(f"classifier.{args.role}"),
                                      validation=val)
    clf.save(out / "classifier.ckpt", role=args.role)
    write_json(out / "report.json", {"role": args.role, "train_accuracy": report.train_accuracy,
                                     "val_accuracy": report.val_accuracy, "losses": report.losses})
    print(f"{args.role}: train accuracy {report.train_accuracy:.4f}, validation accuracy {report.val_accuracy:.4f}")


def generation_config(cfg):
    swarm = SwarmConfig(cfg["pso.particles"], cfg["pso.iterations"], cfg["pso.inertia"], cfg["pso.cognitive"],
                        cfg["pso.social"], cfg["pso.topology"], cfg["pso.ring_neighbors"],
                        cfg["pso.velocity_clamp"], cfg["pso.init_bound"])
    return GenerationConfig(n_tests=cfg["gen.n"], mode=cfg["gen.mode"], k=cfg["gen.k"],
                            max_attempts=cfg["gen.max_attempts"], seed=cfg.subseed("generate"),
                            passes=cfg["gen.passes"], swarm=swarm,
                            weights=FitnessWeights(cfg["gen.w1"], cfg["gen.w2"]),
                            normalized_o2=cfg["gen.normalized_o2"], harvest=cfg["gen.harvest"],
                            batch_size=cfg["gen.batch_size"])


def extractor_for(args, cfg, out, train, val):
    if args.extractor:
        return DropoutClassifier.load(require_file(args.extractor, "extractor")), str(args.extractor)
    clf, _, _ = train_classifier(train, classifier_config(cfg), cfg.rng("classifier.extractor"), validation=val)
    clf.save(out / "extractor.ckpt", role="extractor")
    return clf, "extractor.ckpt"


def cmd_generate(args, cfg, out):
    stage1 = load_stage(args.stage1, 1)
    stage2 = load_stage(args.stage2, 2)
    if args.stub:
        mut = StubClassifier(args.stub, stage2.num_classes)
    else:
        if args.classifier is None:
            raise ConfigurationError("generate needs --classifier or --stub")
        mut = DropoutClassifier.load(require_file(args.classifier, "classifier"))
    gen_cfg = generation_config(cfg)
    train, val = load_dataset(cfg)
    suite, report = generate(mut, stage1, stage2, gen_cfg, image_shape=train.image_shape)
    if len(suite):
        export_suite(suite, out / "suite")
    result = report.to_dict()
    fid = None
    if len(suite) >= 2:
        extractor, name = extractor_for(args, cfg, out, train, val)
        fid = fid_report(train.images, suite.images(), extractor, cfg["fid.repeats"], cfg.rng("fid"), name)
        (out / "fid.txt").write_text(fid.text())
    result["fid"] = None if fid is None else fid.to_dict()
    result["fitness"] = [c.fitness for c in suite.cases]
    write_json(out / "report.json", result)
    if report.trajectories:
        with open(out / "trajectories.jsonl", "w") as fh:
            for run in report.trajectories:
                write_trajectory(fh, run["trajectory"], search=run["search"], expected=run["expected"])
    write_json(out / "timing.json", {"wall_time": report.wall_time,
                                     "per_retained": report.wall_time / max(report.retained, 1)})
    status = "budget exhausted" if report.exhausted else "target reached"
    print(f"{report.retained}/{report.target} cases from {report.attempts} candidates ({status})")
    if fid is not None:
        print(fid.text(), end="")


def cmd_fid(args, cfg, out):
    train, val = load_dataset(cfg)
    real = load_images(args.real, cfg)
    generated = load_images(args.generated, cfg)
    extractor, name = extractor_for(args, cfg, out, train, val)
    repeats = args.repeats or cfg["fid.repeats"]
    report = fid_report(real, generated, extractor, repeats, cfg.rng("fid"), name)
    (out / "fid.txt").write_text(report.text())
    print(report.text(), end="")


def cmd_latent_scatter(args, cfg, out):
    stage1 = load_stage(args.stage1, 1)
    if stage1.latent_dim != 2:
        raise UnsupportedLatentError(f"latent-scatter needs a 2-d latent space, checkpoint has {stage1.latent_dim}")
    _, val = load_dataset(cfg)
    mu = encode(val.flat(), val.labels, stage1).mu.data.astype(np.float64)
    lines = ["z1\tz2\tclass"] + [f"{a!r}\t{b!r}\t{c}" for (a, b), c in zip(mu.tolist(), val.labels.tolist())]
    (out / "scatter.tsv").write_text("\n".join(lines) + "\n")
    inside = float(np.mean(np.linalg.norm(mu, axis=1) <= SCATTER_RADIUS))
    print(f"{len(val)} points; {inside:.4f} within radius {SCATTER_RADIUS:g}")


def cmd_review(args, cfg, out):
    suite = load_suite(args.suite)
    updated, report = apply_verdicts(suite, args.verdicts)
    write_manifest(updated, Path(args.suite) / "manifest.tsv")
    text = "\n".join(report.lines()) + "\n"
    (out / "review.tsv").write_text(text)
    print(text, end="")
    print(f"valid: {report.valid} of {report.total}")


def cmd_export(args, cfg, out):
    suite = load_suite(args.suite)
    if args.only != "all":
        suite.cases = [c for c in suite.cases if c.verdict == args.only]
    if not suite.cases:
        raise ConfigurationError(f"no cases with verdict {args.only!r} to export")
    export_suite(suite, out / "suite")
    data = LabeledDataset(suite.images(), [c.expected for c in suite.cases], suite.num_classes)
    write_idx(data, out / "cases-images-idx3-ubyte", out / "cases-labels-idx1-ubyte")
    print(f"exported {len(suite)} cases")


COMMANDS = {
    "train-vae": cmd_train_vae,
    "train-classifier": cmd_train_classifier,
    "generate": cmd_generate,
    "fid": cmd_fid,
    "latent-scatter": cmd_latent_scatter,
    "review": cmd_review,
    "export": cmd_export,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default="runs", help="root directory for run outputs")
    common.add_argument("--name", help="run directory name under --out")
    common.add_argument("--force", action="store_true", help="reuse a nonempty run directory")

    parser = argparse.ArgumentParser(prog="mtgen", description="Generate fault-revealing test inputs from a "
                                     "two-stage conditional VAE.",
                                     epilog="config keys:\n" + schema_text(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vae", parents=[common], help="train stage 1 then stage 2")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--stage1", help="existing stage-1 checkpoint (for --stage 2)")

    p = sub.add_parser("train-classifier", parents=[common], help="train the model under test or an extractor")
    p.add_argument("--role", choices=("mut", "extractor"), default="mut")

    p = sub.add_parser("generate", parents=[common], help="generate a fault-revealing suite")
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--classifier")
    p.add_argument("--stub", choices=("always-wrong", "always-right"), help="use a stub model under test")
    p.add_argument("--extractor", help="FID feature extractor (trained on the fly if absent)")

    p = sub.add_parser("fid", parents=[common], help="FID between two image sets")
    p.add_argument("--real", default="train", help="train | val | noise | file.npy | suite dir")
    p.add_argument("--generated", required=True, help="train | val | noise | file.npy | suite dir")
    p.add_argument("--extractor")
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("latent-scatter", parents=[common], help="dump 2-d stage-1 means of the validation set")
    p.add_argument("--stage1", required=True)

    p = sub.add_parser("review", parents=[common], help="apply human verdicts to a suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--verdicts", required=True)

    p = sub.add_parser("export", parents=[common], help="copy a suite and write its cases as IDX files")
    p.add_argument("--suite", required=True)
    p.add_argument("--only", choices=("all", "valid", "invalid", "unknown"), default="all")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = run_dir(args, args.command, cfg)
        COMMANDS[args.command](args, cfg, out)
    except (ValueError, RuntimeError, OSError, KeyError, FloatingPointError) as exc:
        print(f"mtgen: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
