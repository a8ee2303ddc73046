"""
Command-line entry point: ``facepad <command> [flags]``.

Every command writes ``config.txt`` into its output directory, one
``key = value`` line per resolved setting with JSON-encoded values.  Passing
that file back with ``--config`` reproduces the run; explicit flags override
values from the file.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or parse
error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace


from . import data as dio
from . import plotting
from .errors import ConfigError, ContractError, DivergenceError, ParseError, ShapeError
from .fda import LossNetwork, TransferWeights, TransformNet, transfer_image
from .losses import LossWeights
from .metrics import ScoreSet, divergence_report, metric_bundle, roc_points
from .model import BackboneConfig, MultiTaskModel, build_model
from .train import (AblationConfig, TrainConfig, evaluate, fda_divergence, run_ablation, summarize_ablation,
                    train, write_ablation_csv)

logger = logging.getLogger("facepad")

OUTPUT_ROOT_ENV = "FACEPAD_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; route that to our usage code instead."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- defaults per command (flags and config files override these) ----------
_DATA_DEFAULTS = {
    "data": None,
    "seed": 0,
    "n_identities": 8,
    "samples_per_id": 16,
    "image_size": 32,
}

DEFAULTS = {
    "gen-data": {**_DATA_DEFAULTS},
    "train": {
        **_DATA_DEFAULTS,
        "domain": "A",
        "steps": 2000,
        "batch_size": 32,
        "lr0": 3e-4,
        "decay_steps": 2000,
        "lambda1": 0.1,
        "lambda2": 2.5e-5,
        "tpc": True,
        "fda": False,
        "target_image": None,
        "lambda_c": 1.0,
        "lambda_s": TransferWeights().lambda_s,
        "fda_epochs": 30,
        "flips": "none",
    },
    "evaluate": {
        **_DATA_DEFAULTS,
        "model": None,
        "transform": None,
        "domain": None,
        "threshold": None,
    },
    "transfer": {
        "input": None,
        "target": None,
        "steps": 100,
        "lr": 1.0,
        "lambda_c": 1.0,
        "lambda_s": TransferWeights().lambda_s,
        "phi_seed": 0,
    },
    "divergence": {
        **_DATA_DEFAULTS,
        "domain_a": "A",
        "domain_b": "B",
        "model": None,
        "fda": True,
        "target_index": 0,
        "lambda_c": 1.0,
        "lambda_s": TransferWeights().lambda_s,
        "fda_epochs": 30,
        "fda_lr": 3e-3,
        "probe_seed": 123,
        "mode": "standard",
    },
    "ablation": {
        "seeds": "0,1,2",
        "n_identities": 8,
        "samples_per_id": 16,
        "image_size": 32,
        "steps": 300,
        "batch_size": 32,
        "lr0": 3e-4,
        "lambda1": 0.1,
        "lambda2": 2.5e-5,
        "lambda_s": TransferWeights().lambda_s,
        "fda_epochs": 30,
    },
    "metrics": {
        "scores": None,
        "threshold": None,
    },
}

HELP = {
    "gen-data": "render the seeded synthetic two-domain dataset (PPM + manifest)",
    "train": "train the two-branch model and write a run directory",
    "evaluate": "score a checkpoint: EER/APCER/BPCER/ACER/HTER and recognition accuracy",
    "transfer": "transfer PPM image(s) toward a target-domain image by pixel optimisation",
    "divergence": "per-layer feature divergence between two domains, before/after transfer",
    "ablation": "TPC x FDA grid over seeds; intra- and cross-domain HTER",
    "metrics": "metric bundle for a standalone score,label CSV",
}


def _add_data_flags(p):
    p.add_argument("--data", help="dataset directory (manifest.csv) or manifest path; default: synthetic")
    p.add_argument("--seed", type=int, help="seed for synthetic data, init and batching")
    p.add_argument("--n-identities", type=int)
    p.add_argument("--samples-per-id", type=int, help="per domain, half live and half attack")
    p.add_argument("--image-size", type=int, help="square synthetic image side")


def build_parser():
    S = argparse.SUPPRESS
    parser = _Parser(prog="facepad", description=__doc__.split("\n\n")[1].replace("\n", " "),
                     argument_default=S)
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name):
        p = sub.add_parser(name, help=HELP[name], description=HELP[name], argument_default=S)
        p.add_argument("--config", help="key = value file (e.g. a previous config.txt)")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command> or runs/<command>)")
        return p

    p = command("gen-data")
    _add_data_flags(p)

    p = command("train")
    _add_data_flags(p)
    p.add_argument("--domain", help="train only on this domain ('all' for every domain)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay-steps", type=int)
    p.add_argument("--lambda1", type=float, help="recognition loss weight")
    p.add_argument("--lambda2", type=float, help="TPC loss weight")
    p.add_argument("--tpc", action=argparse.BooleanOptionalAction)
    p.add_argument("--fda", action=argparse.BooleanOptionalAction)
    p.add_argument("--target-image", help="PPM from the target domain (required with --fda)")
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--fda-epochs", type=int)
    p.add_argument("--flips", choices=("none", "triple", "double"))

    p = command("evaluate")
    _add_data_flags(p)
    p.add_argument("--model", help="model checkpoint (model.fpck)")
    p.add_argument("--transform", help="transform network checkpoint, for FDA-trained models")
    p.add_argument("--domain", help="evaluate only this domain")
    p.add_argument("--threshold", type=float, help="fixed liveness threshold (default: EER threshold)")

    p = command("transfer")
    p.add_argument("--input", help="source PPM, or a comma-separated list")
    p.add_argument("--target", help="target-domain PPM")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--phi-seed", type=int, help="seed of the loss network")

    p = command("divergence")
    _add_data_flags(p)
    p.add_argument("--domain-a")
    p.add_argument("--domain-b")
    p.add_argument("--model", help="probe this checkpoint's blocks instead of a random loss network")
    p.add_argument("--fda", action=argparse.BooleanOptionalAction, help="also report after transfer")
    p.add_argument("--target-index", type=int, help="index within domain A of the target image")
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--fda-epochs", type=int)
    p.add_argument("--fda-lr", type=float)
    p.add_argument("--probe-seed", type=int)
    p.add_argument("--mode", choices=("standard", "paper-literal"))

    p = command("ablation")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
    p.add_argument("--n-identities", type=int)
    p.add_argument("--samples-per-id", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--fda-epochs", type=int)

    p = command("metrics")
    p.add_argument("--scores", help="CSV with header score,label (label live/attack)")
    p.add_argument("--threshold", type=float, help="fixed threshold (default: EER threshold)")
    return parser


# -- config echo ----------------------------------------------------------
def format_config(command, settings):
    lines = [f"command = {json.dumps(command)}"]
    lines += [f"{k} = {json.dumps(v)}" for k, v in settings.items()]
    return "\n".join(lines) + "\n"


def read_config(path):
    """Parse ``key = <json value>`` lines; '#' starts a comment line."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            try:
                out[key.strip().replace("-", "_")] = json.loads(raw.strip())
            except json.JSONDecodeError:
                raise ParseError(f"{path}:{lineno}: value {raw.strip()!r} is not valid JSON") from None
    return out


def resolve(command, ns):
    """Defaults, then the config file, then explicit flags."""
    settings = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    config_path = flags.pop("config", None)
    out = flags.pop("out", None)
    if config_path is not None:
        from_file = read_config(config_path)
        file_command = from_file.pop("command", command)
        if file_command != command:
            raise UsageError(f"--config {config_path}: written by {file_command!r}, not {command!r}")
        out = from_file.pop("out", None) if out is None else out
        unknown = sorted(set(from_file) - set(settings))
        if unknown:
            raise UsageError(f"--config {config_path}: unknown key(s) {', '.join(unknown)}")
        settings.update(from_file)
    settings.update(flags)
    if out is None:
        out = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), command)
    return settings, out


def _require(settings, *keys):
    for k in keys:
        if settings.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


# -- data helpers ---------------------------------------------------------
def _synthetic_config(s):
    return dio.SyntheticConfig(n_identities=s["n_identities"], samples_per_id=s["samples_per_id"],
                               image_size=(s["image_size"], s["image_size"]), seed=s["seed"])


def _load_samples(s):
    if s.get("data"):
        path = s["data"]
        if os.path.isdir(path):
            path = os.path.join(path, "manifest.csv")
        return dio.load_manifest(path)
    return dio.generate(_synthetic_config(s))


def _select(samples, domain, flag="--domain"):
    if domain in (None, "all"):
        return samples
    chosen = dio.select_domain(samples, domain)
    if not chosen:
        names = sorted({x.domain for x in samples})
        raise UsageError(f"{flag} {domain!r}: no samples (domains present: {', '.join(names)})")
    return chosen


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_metrics(path, metrics, extra=()):
    rows = [(k, repr(float(v))) for k, v in metrics.items()]
    rows += [(k, repr(float(v)) if isinstance(v, float) else v) for k, v in extra]
    _write_rows(path, ["metric", "value"], rows)


# -- commands -------------------------------------------------------------
def cmd_gen_data(s, out):
    samples = dio.generate(_synthetic_config(s))
    dio.save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_train(s, out):
    samples = _select(_load_samples(s), s["domain"])
    if s["flips"] != "none":
        samples = dio.augment_flips(samples, s["flips"])
    if s["fda"]:
        _require(s, "target_image")
    n_ids = int(dio.identities_of(samples).max()) + 1
    size = samples[0].image.shape
    cfg = TrainConfig(lr0=s["lr0"], decay_steps=s["decay_steps"], batch_size=s["batch_size"], steps=s["steps"],
                      weights=LossWeights(s["lambda1"], s["lambda2"]), use_tpc=s["tpc"], use_fda=s["fda"],
                      target_domain_image=s["target_image"], seed=s["seed"],
                      fda_weights=TransferWeights(s["lambda_c"], s["lambda_s"]), fda_epochs=s["fda_epochs"])
    model = build_model(BackboneConfig.desk(n_ids, input_size=tuple(size)), s["seed"])
    result = train(model, samples, cfg)
    result.log.write_csv(os.path.join(out, "losses.csv"))
    model.save(os.path.join(out, "model.fpck"))
    if result.transform is not None:
        result.transform.save(os.path.join(out, "transform.fpck"))
    plotting.plot_losses(result.log, os.path.join(out, "losses.png"))
    rows = result.log.rows
    if rows:
        print(f"trained {cfg.steps} steps on {len(samples)} samples; final total loss {rows[-1][4]:.4f}")


def cmd_evaluate(s, out):
    _require(s, "model")
    model = MultiTaskModel.load(s["model"])
    transform = TransformNet.load(s["transform"]) if s["transform"] else None
    samples = _select(_load_samples(s), s["domain"])
    res = evaluate(model, samples, threshold=s["threshold"], transform=transform)
    res.scores.write_csv(os.path.join(out, "scores.csv"))
    _write_metrics(os.path.join(out, "metrics.csv"), res.metrics,
                   [("recognition_accuracy", res.recognition_accuracy),
                    ("recognition_excluded", res.excluded_identities), ("n", len(res.scores))])
    if res.metrics:
        plotting.plot_roc(roc_points(res.scores), os.path.join(out, "roc.png"), res.metrics["threshold"])
        m = res.metrics
        print(f"EER {100 * m['eer']:.2f}%  HTER {100 * m['hter']:.2f}%  APCER {100 * m['apcer']:.2f}%  "
              f"BPCER {100 * m['bpcer']:.2f}%  recognition {100 * res.recognition_accuracy:.1f}%")
    else:
        print(f"single-class evaluation set; recognition {100 * res.recognition_accuracy:.1f}%")


def cmd_transfer(s, out):
    _require(s, "input", "target")
    target = dio.read_ppm(s["target"])
    phi = LossNetwork(seed=s["phi_seed"])
    w = TransferWeights(s["lambda_c"], s["lambda_s"])
    rows = []
    for path in s["input"].split(","):
        image = dio.read_ppm(path)
        if image.shape != target.shape:
            raise UsageError(f"--input {path}: shape {image.shape} differs from --target {target.shape}")
        y, trace = transfer_image(image, target, phi, w, steps=s["steps"], lr=s["lr"], return_trace=True)
        name = os.path.splitext(os.path.basename(path))[0] + "_transferred.ppm"
        dio.write_ppm(os.path.join(out, name), y)
        rows += [(name, i, repr(v)) for i, v in enumerate(trace)]
        print(f"{name}: objective {trace[0]:.6g} -> {trace[-1]:.6g}")
    _write_rows(os.path.join(out, "objective.csv"), ["output", "step", "objective"], rows)


def cmd_divergence(s, out):
    samples = _load_samples(s)
    a = dio.images_of(_select(samples, s["domain_a"], "--domain-a"))
    b = dio.images_of(_select(samples, s["domain_b"], "--domain-b"))
    probe = MultiTaskModel.load(s["model"]) if s["model"] else LossNetwork(seed=s["probe_seed"])
    if s["fda"]:
        if not 0 <= s["target_index"] < len(a):
            raise UsageError(f"--target-index {s['target_index']} outside domain A (size {len(a)})")
        cmp = fda_divergence(a, b, a[s["target_index"]], TransferWeights(s["lambda_c"], s["lambda_s"]),
                             epochs=s["fda_epochs"], lr=s["fda_lr"], seed=s["seed"], probe=probe,
                             mode=s["mode"])
        before, after = cmp.before, cmp.after
        after.write_csv(os.path.join(out, "divergence_after.csv"))
        cmp.transform.save(os.path.join(out, "transform.fpck"))
    else:
        before, after = divergence_report(probe, a, b, mode=s["mode"]), None
    before.write_csv(os.path.join(out, "divergence.csv"))
    after_d = after.as_dict() if after is not None else None
    plotting.plot_divergence(before.as_dict(), after_d, os.path.join(out, "divergence.png"),
                             labels=("before transfer", "after transfer"))
    for layer, d in before.as_dict().items():
        tail = f" -> {after_d[layer]:.4g}" if after_d else ""
        print(f"{layer}: {d:.4g}{tail}")


def _parse_seeds(text):
    try:
        seeds = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--seeds {text!r}: expected comma-separated integers") from None
    if not seeds:
        raise UsageError("--seeds: at least one seed is required")
    return seeds


def cmd_ablation(s, out):
    seeds = _parse_seeds(s["seeds"])
    base = AblationConfig()
    cfg = replace(
        base,
        train=replace(base.train, steps=s["steps"], batch_size=s["batch_size"], lr0=s["lr0"],
                      weights=LossWeights(s["lambda1"], s["lambda2"]),
                      fda_weights=replace(base.train.fda_weights, lambda_s=s["lambda_s"]),
                      fda_epochs=s["fda_epochs"]),
        synthetic=replace(base.synthetic, n_identities=s["n_identities"], samples_per_id=s["samples_per_id"],
                          image_size=(s["image_size"], s["image_size"])),
    )
    rows = run_ablation(cfg, seeds)
    write_ablation_csv(rows, os.path.join(out, "ablation.csv"))
    summary = summarize_ablation(rows)
    plotting.plot_ablation(summary, os.path.join(out, "ablation.png"))
    print("TPC FDA  intra%  cross%")
    for (tpc, fda), v in summary.items():
        print(f" {'+' if tpc else '-'}   {'+' if fda else '-'}   {100 * v['intra_hter']:6.2f}  {100 * v['cross_hter']:6.2f}")


def cmd_metrics(s, out):
    _require(s, "scores")
    scores = ScoreSet.read_csv(s["scores"])
    bundle = metric_bundle(scores, s["threshold"])
    _write_metrics(os.path.join(out, "metrics.csv"), bundle, [("n", len(scores))])
    plotting.plot_roc(roc_points(scores), os.path.join(out, "roc.png"), bundle["threshold"])
    print(f"EER {bundle['eer']:.6g} at threshold {bundle['eer_threshold']:.6g}; "
          f"APCER {bundle['apcer']:.6g} BPCER {bundle['bpcer']:.6g} ACER {bundle['acer']:.6g} "
          f"HTER {bundle['hter']:.6g}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "divergence": cmd_divergence,
    "ablation": cmd_ablation,
    "metrics": cmd_metrics,
}


def dispatch(argv=None):
    """Run one command; returns the process exit code."""
    try:
        ns = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings, out = resolve(ns.command, ns)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.txt"), "w") as fh:
            fh.write(format_config(ns.command, settings))
        COMMANDS[ns.command](settings, out)
    except (UsageError, ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
