#!/usr/bin/env python3
"""Convert native IQA database layouts into MOS manifests.

Output: CSV with header ``path,distortion,level,score,higher_is_better`` and
paths relative to the manifest's directory.

    convert_mos.py live    <LIVE release2 dir>  <out.csv>
    convert_mos.py csiq    <CSIQ dir> <dmos.csv> <out.csv>
    convert_mos.py tid2013 <TID2013 dir> <out.csv>

The CSIQ score sheet is expected as a CSV export of ``csiq.DMOS.xlsx`` with at
least the columns ``image``, ``dst_type``, ``dst_lev`` and ``dmos``.
"""

import csv
import os
import re
import sys

HEADER = ["path", "distortion", "level", "score", "higher_is_better"]


def write(rows, out):
    out_dir = os.path.dirname(os.path.abspath(out))
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(HEADER)
        for path, dist, level, score, hib in rows:
            rel = os.path.relpath(os.path.abspath(path), out_dir)
            w.writerow([rel, dist, "" if level is None else level, repr(float(score)), "true" if hib else "false"])
    print(f"{out}: {len(rows)} records")


def live(root, out):
    from scipy.io import loadmat

    mat = loadmat(os.path.join(root, "dmos.mat"))
    dmos = mat["dmos"].ravel()
    orgs = mat["orgs"].ravel()
    # Image counts per folder, in the order of the DMOS vector.
    folders = [("jp2k", "jpeg2000", 227), ("jpeg", "jpeg", 233), ("wn", "white_noise", 174),
               ("gblur", "gaussian_blur", 174), ("fastfading", "fast_fading", 174)]
    rows, k = [], 0
    for folder, dist, count in folders:
        for i in range(1, count + 1):
            if not orgs[k]:
                rows.append((os.path.join(root, folder, f"img{i}.bmp"), dist, None, dmos[k], False))
            k += 1
    write(rows, out)


CSIQ_TYPES = {"awgn": "white_noise", "noise": "white_noise", "jpeg": "jpeg", "jpeg 2000": "jpeg2000",
              "jpeg2000": "jpeg2000", "fnoise": "pink_noise", "blur": "gaussian_blur",
              "contrast": "contrast_change"}
CSIQ_DIRS = {"white_noise": ("awgn", "AWGN"), "jpeg": ("jpeg", "JPEG"), "jpeg2000": ("jpeg2000", "jpeg2000"),
             "pink_noise": ("fnoise", "fnoise"), "gaussian_blur": ("blur", "BLUR"),
             "contrast_change": ("contrast", "contrast")}


def csiq(root, sheet, out):
    rows = []
    with open(sheet, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            dist = CSIQ_TYPES.get(rec["dst_type"].strip().lower())
            if dist is None:
                continue
            folder, tag = CSIQ_DIRS[dist]
            level = int(float(rec["dst_lev"]))
            name = f"{rec['image'].strip()}.{tag}.{level}.png"
            rows.append((os.path.join(root, "dst_imgs", folder, name), dist, level, float(rec["dmos"]), False))
    write(rows, out)


TID_TYPES = {1: "white_noise", 8: "gaussian_blur", 10: "jpeg", 11: "jpeg2000", 17: "contrast_change"}


def tid2013(root, out):
    rows = []
    pattern = re.compile(r"i(\d+)_(\d+)_(\d+)\.bmp", re.IGNORECASE)
    with open(os.path.join(root, "mos_with_names.txt"), encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if len(parts) != 2:
                continue
            score, name = float(parts[0]), parts[1]
            m = pattern.fullmatch(name)
            if not m or int(m.group(2)) not in TID_TYPES:
                continue
            path = os.path.join(root, "distorted_images", name)
            rows.append((path, TID_TYPES[int(m.group(2))], int(m.group(3)), score, True))
    write(rows, out)


def main(argv):
    if len(argv) < 2:
        sys.exit(__doc__)
    cmd, args = argv[1], argv[2:]
    if cmd == "live" and len(args) == 2:
        live(*args)
    elif cmd == "csiq" and len(args) == 3:
        csiq(*args)
    elif cmd == "tid2013" and len(args) == 2:
        tid2013(*args)
    else:
        sys.exit(__doc__)


if __name__ == "__main__":
    main(sys.argv)
