"""Command line for the adapter sidecar."""

import json
import sys

import click

from .errors import AdapterError
from .extract import embed_texts, extract_views


@click.group()
def main():
    """Produce OU3D/OU3T feature files from rendered views."""


@main.command("extract")
@click.option("--views", "view_dir", required=True, type=click.Path(exists=True),
              help="directory with view_<id>.png (and optionally rigs.json)")
@click.option("--out", "out_dir", required=True, help="output directory for .ou3d files")
@click.option("--model", "model_id", default="tiny-clip", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--min-pixels", type=int, default=64, show_default=True,
              help="drop mask proposals smaller than this")
@click.option("--felz-scale", type=float, default=200.0, show_default=True,
              help="segmentation scale (larger -> fewer, bigger masks)")
def extract_cmd(view_dir, out_dir, model_id, seed, min_pixels, felz_scale):
    try:
        files = extract_views(view_dir, out_dir, model_id, seed, min_pixels, felz_scale)
        click.echo(f"wrote {len(files)} mask sets to {out_dir}")
    except AdapterError as e:
        click.echo(json.dumps({"error": str(e)}), err=True)
        sys.exit(1)


@main.command("embed-texts")
@click.option("--classes", required=True, help="comma-separated class names")
@click.option("--out", "out_path", required=True, help="output .ou3t path")
@click.option("--model", "model_id", default="tiny-clip", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--template", default="{}", show_default=True,
              help="prompt template, {} replaced by the class name")
def embed_cmd(classes, out_path, model_id, seed, template):
    try:
        names = [c.strip() for c in classes.split(",") if c.strip()]
        embed_texts(names, out_path, model_id, seed, template)
        click.echo(f"wrote {len(names)} class embeddings to {out_path}")
    except AdapterError as e:
        click.echo(json.dumps({"error": str(e)}), err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
