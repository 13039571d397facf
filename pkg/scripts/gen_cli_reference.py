"""Write the command-line reference page from the click definitions.

    python scripts/gen_cli_reference.py docs/cli.md
"""

from __future__ import annotations

from pathlib import Path

import click

from gsmvps import cli

HEADER = """# Command-line reference

Generated by `scripts/gen_cli_reference.py`; do not edit by hand.

Options can be set through environment variables named
`GSMVPS_<COMMAND>_<PARAMETER>` (for example `GSMVPS_EVAL_JSON_PATH`);
positional paths read `GSMVPS_CHECKPOINT`, `GSMVPS_DATASET` and `GSMVPS_OUT`.

Exit codes: `0` success, `2` bad input, `3` numeric failure. Errors are a
single stderr line: `gsmvps-error code=<CODE> exit=<N> message="<text>"`.

| code | exit | raised for |
|---|---|---|
"""


def render() -> str:
    lines = [HEADER.rstrip("\n")]
    for kind, code, status in cli.ERROR_CODES:
        lines.append(f"| `{code}` | {status} | `{kind.__name__}` |")
    ctx = click.Context(cli.main, info_name="gsmvps")
    lines += ["", "## gsmvps", "", "```", cli.main.get_help(ctx), "```"]
    for name in sorted(cli.main.commands):
        cmd = cli.main.commands[name]
        sub = click.Context(cmd, info_name=name, parent=ctx)
        lines += ["", f"## gsmvps {name}", "", "```", cmd.get_help(sub), "```"]
    return "\n".join(lines) + "\n"


@click.command()
@click.argument("out", type=click.Path(dir_okay=False), default="docs/cli.md")
def main(out: str) -> None:
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(render())
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
