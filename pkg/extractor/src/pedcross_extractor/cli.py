"""CLI: dump a PCIFEAT1 feature store from track annotations and frame images."""

from __future__ import annotations

import sys

import click

from .backbones import BACKBONES, ExtractorSpec
from .extract import extract_tracks


@click.command()
@click.option("--backbone", default="resnet50", type=click.Choice(sorted(BACKBONES)),
              show_default=True)
@click.option("--tracks", required=True, type=click.Path(exists=True),
              help="Track file (JSON lines).")
@click.option("--images", required=True, type=click.Path(exists=True),
              help="Directory with <video_id>/<frame>.png frames.")
@click.option("--out", required=True, type=click.Path(), help="Output store path.")
@click.option("--layout", default="pooled", type=click.Choice(["pooled", "raw"]),
              show_default=True)
@click.option("--pretrained/--random-weights", default=True,
              help="ImageNet weights, or seeded random weights for testing.")
@click.option("--seed", default=0, show_default=True,
              help="Weight seed when --random-weights is used.")
@click.option("--batch", default=16, show_default=True)
def main(backbone, tracks, images, out, layout, pretrained, seed, batch):
    spec = ExtractorSpec(backbone=backbone, layout=layout, pretrained=pretrained,
                         seed=seed)
    try:
        count = extract_tracks(tracks, images, out, spec, batch_size=batch)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {count} rows ({spec.row_len} floats each, {layout}) to {out}")


if __name__ == "__main__":
    main()
