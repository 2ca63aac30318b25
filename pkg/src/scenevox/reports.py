"""Plain delimited-text report tables with embedded config digest and seed."""

from .errors import FormatError


def format_table(columns, rows, digest, seed):
    """Tab-separated table with a comment header carrying digest and seed."""
    lines = [f"# config_digest={digest} seed={seed}", "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _fmt(value):
    if value is None:
        return "NA"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def parse_table(text):
    """Parse format_table output into (meta dict, columns, row dicts)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise FormatError("report missing digest header line")
    meta = {}
    for token in lines[0][1:].split():
        key, _, val = token.partition("=")
        meta[key] = val
    if len(lines) < 2:
        raise FormatError("report missing column header")
    columns = lines[1].split("\t")
    rows = []
    for ln in lines[2:]:
        vals = ln.split("\t")
        if len(vals) != len(columns):
            raise FormatError(f"report row has {len(vals)} fields, expected {len(columns)}")
        rows.append(dict(zip(columns, vals)))
    return meta, columns, rows
