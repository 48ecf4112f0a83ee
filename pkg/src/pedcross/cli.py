"""Command-line entry point.

The CLI is a thin client of the HTTP service: commands build a JSON request
and post it either to a remote server (--server-url) or to an in-process
instance of the app. Exit codes: 0 success, 1 domain error, 2 I/O error.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import httpx

DOMAIN_ERROR = 1
IO_ERROR = 2


def _client(server_url):
    if server_url:
        return httpx.Client(base_url=server_url, timeout=600.0)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _post(ctx, path: str, payload: dict) -> dict:
    try:
        with _client(ctx.obj.get("server_url")) as client:
            resp = client.post(path, json=payload)
    except httpx.TransportError as exc:
        click.echo(f"error: cannot reach server: {exc}", err=True)
        sys.exit(IO_ERROR)
    if resp.status_code == 404:
        click.echo(f"error: {resp.json().get('detail', resp.text)}", err=True)
        sys.exit(IO_ERROR)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        click.echo(f"error: {detail}", err=True)
        sys.exit(DOMAIN_ERROR)
    return resp.json()


def _load_config_file(path) -> dict:
    suffix = Path(path).suffix.lower()
    with open(path, "rb") as fh:
        if suffix == ".toml":
            import tomllib

            return tomllib.load(fh)
        return json.load(fh)


def _merge_config(ctx, values: dict, config_path) -> dict:
    """Config-file values fill in anything not set explicitly on the line."""
    if not config_path:
        return values
    from click.core import ParameterSource

    file_values = _load_config_file(config_path)
    merged = dict(values)
    for key, value in file_values.items():
        if key not in merged:
            raise click.UsageError(f"unknown config key '{key}'")
        if ctx.get_parameter_source(key) != ParameterSource.COMMANDLINE:
            merged[key] = value
    return merged


def _parse_vars(spec: str) -> list[str]:
    spec = (spec or "none").strip().lower()
    if spec == "all":
        return ["looking", "orientation", "movement", "center"]
    if spec in ("none", ""):
        return []
    return [v.strip() for v in spec.split(",") if v.strip()]


@click.group()
@click.option("--server-url", default=None, help="Remote service URL; default runs in-process.")
@click.pass_context
def main(ctx, server_url):
    """Pedestrian crossing-action prediction toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["server_url"] = server_url


@main.command()
@click.option("--tracks", required=True, type=click.Path(), help="Training track file (JSON lines).")
@click.option("--features", default=None, type=click.Path(), help="PCIFEAT1 feature store.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--val-tracks", default=None, type=click.Path())
@click.option("--val-frac", default=0.2, show_default=True)
@click.option("--rnn", default="lstm", type=click.Choice(["lstm", "gru", "bdlstm", "bdgru"]))
@click.option("--vars", "vars_", default="none", show_default=True,
              help="Comma list of looking,orientation,movement,center, or all/none.")
@click.option("--rescale/--no-rescale", default=False)
@click.option("--n-past", default=15, show_default=True)
@click.option("--horizon", default=30, show_default=True)
@click.option("--multi-horizon", is_flag=True, default=False)
@click.option("--hidden", default=4, show_default=True)
@click.option("--dropout", default=0.5, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--patience", default=5, show_default=True)
@click.option("--batch", default=64, show_default=True)
@click.option("--max-epochs", default=500, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--min-height", default=50.0, show_default=True)
@click.option("--img-dim", default=None, type=int, help="Override feature width (0 = no images).")
@click.option("--clip-norm", default=None, type=float)
@click.option("--config", "config_path", default=None, type=click.Path(exists=False),
              help="TOML/JSON file supplying any flag; explicit flags win.")
@click.pass_context
def train(ctx, config_path, vars_, out_dir, **opts):
    """Train a model and write checkpoint + history log + manifest."""
    values = dict(opts, vars=vars_, out_dir=out_dir)
    try:
        values = _merge_config(ctx, values, config_path)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(IO_ERROR)
    payload = {
        "tracks": values["tracks"],
        "features": values["features"],
        "out_dir": values["out_dir"],
        "val_tracks": values["val_tracks"],
        "val_fraction": values["val_frac"],
        "rnn": values["rnn"],
        "vars": _parse_vars(values["vars"]),
        "rescale": values["rescale"],
        "n_past": values["n_past"],
        "horizon": values["horizon"],
        "multi_horizon": values["multi_horizon"],
        "hidden": values["hidden"],
        "dropout": values["dropout"],
        "lr": values["lr"],
        "patience": values["patience"],
        "batch": values["batch"],
        "max_epochs": values["max_epochs"],
        "seed": values["seed"],
        "min_height": values["min_height"],
        "img_dim": values["img_dim"],
        "clip_norm": values["clip_norm"],
    }
    result = _post(ctx, "/train", payload)
    click.echo(
        f"trained {result['epochs']} epochs (best epoch {result['best_epoch']}, "
        f"stop: {result['stop_reason']}, best val loss {result['best_val_loss']:.6f})"
    )
    click.echo(f"checkpoint: {result['checkpoint']}")
    click.echo(f"history:    {result['history']}")
    click.echo(f"manifest:   {result['manifest']}")


@main.command()
@click.argument("checkpoint", type=click.Path())
@click.option("--tracks", required=True, type=click.Path())
@click.option("--features", default=None, type=click.Path())
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--rescale/--no-rescale", default=False)
@click.option("--batch", default=64, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Print metrics as JSON.")
@click.option("--out", default=None, type=click.Path(), help="Also write metrics JSON here.")
@click.pass_context
def evaluate(ctx, checkpoint, tracks, features, threshold, rescale, batch, as_json, out):
    """Evaluate a checkpoint: accuracy, precision, recall and AP."""
    result = _post(
        ctx,
        "/evaluate",
        {
            "checkpoint": checkpoint,
            "tracks": tracks,
            "features": features,
            "threshold": threshold,
            "rescale": rescale,
            "batch": batch,
        },
    )
    metrics_json = json.dumps(
        {k: result[k] for k in ("accuracy", "precision", "recall", "ap", "threshold")},
        sort_keys=True,
    )
    click.echo(metrics_json if as_json else result["table"])
    if out:
        Path(out).write_text(metrics_json + "\n", encoding="utf-8")


@main.command()
@click.argument("checkpoint", type=click.Path())
@click.option("--tracks", required=True, type=click.Path())
@click.option("--features", default=None, type=click.Path())
@click.option("--video", required=True)
@click.option("--pedestrian", required=True)
@click.option("-t", "--frame", "t", required=True, type=int, help="Current frame position t.")
@click.option("--out", default=None, type=click.Path(), help="Write CSV here instead of stdout.")
@click.pass_context
def predict(ctx, checkpoint, tracks, features, video, pedestrian, t, out):
    """Emit (horizon_frames, probability) CSV rows for one window."""
    result = _post(
        ctx,
        "/predict",
        {
            "checkpoint": checkpoint,
            "tracks": tracks,
            "features": features,
            "video_id": video,
            "pedestrian_id": pedestrian,
            "t": t,
        },
    )
    lines = ["horizon_frames,probability"]
    lines += [f"{p['horizon_frames']},{p['probability']!r}" for p in result["points"]]
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@main.command()
@click.argument("input_file", type=click.Path())
@click.option("--out", required=True, type=click.Path(),
              help=".png for an image, anything else for a gnuplot-style data file.")
def plot(input_file, out):
    """Render a prediction CSV or a history log into a curve file."""
    path = Path(input_file)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(IO_ERROR)
    try:
        columns, series = _parse_plot_input(text)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(DOMAIN_ERROR)
    out = Path(out)
    if out.suffix.lower() == ".png":
        _render_png(columns, series, out)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("# " + " ".join(columns) + "\n")
            for row in zip(*series):
                fh.write(" ".join(repr(v) for v in row) + "\n")
    click.echo(f"wrote {out}")


def _parse_plot_input(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty input file")
    if lines[0].lstrip().startswith("{"):
        # training history: JSON lines with epoch/train_loss/val_loss
        epochs, train_losses, val_losses = [], [], []
        for ln in lines:
            rec = json.loads(ln)
            epochs.append(rec["epoch"])
            train_losses.append(rec["train_loss"])
            val_losses.append(rec["val_loss"])
        return ["epoch", "train_loss", "val_loss"], [epochs, train_losses, val_losses]
    reader = csv.DictReader(lines)
    if reader.fieldnames != ["horizon_frames", "probability"]:
        raise ValueError(f"unrecognized CSV header {reader.fieldnames}")
    rows = list(reader)
    if not rows:
        raise ValueError("CSV has a header but no rows")
    horizons = [int(r["horizon_frames"]) for r in rows]
    probs = [float(r["probability"]) for r in rows]
    return ["horizon_frames", "probability"], [horizons, probs]


def _render_png(columns, series, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    x = series[0]
    for label, ys in zip(columns[1:], series[1:]):
        ax.plot(x, ys, marker="o", label=label)
    ax.set_xlabel(columns[0])
    ax.legend()
    if columns[0] == "horizon_frames":
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("crossing probability")
    else:
        ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
