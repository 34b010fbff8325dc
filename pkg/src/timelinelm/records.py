"""Line-delimited JSON record files with a schema-version header line.

Every artifact file written by the pipeline starts with a single line
``{"schema": "<name>/<version>"}``; readers refuse files whose schema string
does not match what they expect.
"""

import json
from collections.abc import Iterable, Iterator
from pathlib import Path

from .errors import ParseError


def write_records(path: str | Path, schema: str, records: Iterable[dict]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": schema}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_records(path: str | Path, schema: str) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` pairs, validating the schema header.

    Line numbers are 1-based file positions (the header is line 1).
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            return  # empty file: zero records
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid schema header: {exc.msg}", str(path), 1) from exc
        if not isinstance(header, dict) or header.get("schema") != schema:
            raise ParseError(
                f"expected schema {schema!r}, found {header.get('schema') if isinstance(header, dict) else header!r}",
                str(path),
                1,
            )
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", str(path), lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError("record is not a JSON object", str(path), lineno)
            yield lineno, rec
