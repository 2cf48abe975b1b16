"""Stand-alone CAS1 writer used as an out-of-process score producer.

Uses only the standard library, so it exercises the file format rather
than ca_kit's own serializer.

    python3 cas1_producer.py input.json output.cas1

``input.json`` holds ``vocabulary``, ``img_h``, ``img_w``, ``scores`` (one
list of r floats per pixel, row-major) and an optional ``provenance`` dict.
"""

import json
import struct
import sys


def main(src, dst):
    with open(src) as fh:
        payload = json.load(fh)
    header = dict(payload.get("provenance", {}))
    header.update(vocabulary=payload["vocabulary"], img_h=payload["img_h"], img_w=payload["img_w"])
    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()
    r = len(payload["vocabulary"])
    rows = payload["scores"]
    assert len(rows) == payload["img_h"] * payload["img_w"] and all(len(row) == r for row in rows)
    with open(dst, "wb") as fh:
        fh.write(b"CAS1")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for row in rows:
            fh.write(struct.pack(f"<{r}d", *row))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
