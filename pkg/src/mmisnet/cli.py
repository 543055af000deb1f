"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
format error, 3 numeric failure (including a failed gradient check).
"""
from __future__ import annotations

import logging
import sys

import click

from .errors import MMISError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Multi-dataset medical image segmentation with similarity fusion."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("gen-data")
@click.option("--spec", "spec_path", required=True, type=click.Path(dir_okay=False),
              help="JSON synthetic corpus spec.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def gen_data(spec_path, out):
    """Write a synthetic multi-dataset corpus."""
    from .synth import SynthSpec, generate

    paths = generate(SynthSpec.load(spec_path), out)
    for p in paths:
        click.echo(str(p))


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train(config_path, data, out):
    """Train on every dataset_*/manifest.json under DATA."""
    from .labels import discover_manifests
    from .train import TrainConfig, train as run_train

    cfg = TrainConfig.load(config_path)
    res = run_train(cfg, discover_manifests(data), out_dir=out)
    click.echo(f"stopped after epoch {res.stopped_epoch}; best epoch {res.checkpoint.epoch} "
               f"loss {res.checkpoint.best_val_loss:.6f}")
    click.echo(str(res.checkpoint_path))


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--report", required=True, type=click.Path(dir_okay=False))
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--truth", is_flag=True, help="Score against the full-truth sidecar.")
@click.option("--split", type=click.Choice(["all", "train", "val"]), default="all",
              show_default=True, help="Restrict to the checkpoint's training split.")
def evaluate(ckpt, data, report, threshold, truth, split):
    """Per-class DS, AVD and detection AUC as CSV."""
    from .labels import discover_manifests
    from .network import load_checkpoint
    from .train import evaluate as run_eval

    rep = run_eval(load_checkpoint(ckpt), discover_manifests(data), threshold,
                   use_truth=truth, split=split)
    rep.to_csv(report)
    for row in rep.rows():
        click.echo(f"{row[0]:<24} ds {row[1]:.4f}  avd {row[2]:.6g}  auc {row[4]:.3f}")


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--in", "volume", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--resize", is_flag=True, help="Rescale slices whose size the network cannot take.")
def predict(ckpt, volume, out, threshold, resize):
    """Per-class masks and overlay images for one volume."""
    from .network import load_checkpoint
    from .train import predict as run_predict

    res = run_predict(load_checkpoint(ckpt), volume, threshold, out, resize=resize)
    for p in res["files"]:
        click.echo(str(p))


@cli.command()
@click.option("--seed", default=0, show_default=True, type=int)
def gradcheck(seed):
    """Finite-difference check of every differentiable op."""
    from .gradcheck import format_report, run_suite

    results = run_suite(seed)
    click.echo(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo(f"{len(failed)} check(s) failed: {', '.join(failed)}", err=True)
        sys.exit(EXIT_NUMERIC)
    click.echo(f"all {len(results)} checks passed")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="mmisnet", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except MMISError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:  # malformed config content
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
