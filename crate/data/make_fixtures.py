"""Rebuild the two fixture CSVs shipped in this directory.

Sources
-------
boston_corrected.csv
    Harrison & Rubinfeld (1978) housing data with the Gilley & Pace (1996)
    corrected median values (CMEDV), as distributed in the R package DAAG
    (dataset ``bostonc``). The copy used here was read from the
    ``rdatasets`` Python wheel (``rdatasets/_data/DAAG/bostonc.pkl.compress``).

diabetes.csv
    Efron et al. (2004) diabetes data, ten baseline variables plus the
    progression response, as shipped un-standardized with scikit-learn
    (``sklearn/datasets/data/diabetes_data_raw.csv.gz`` and
    ``diabetes_target.csv.gz``).

Transforms (Boston)
-------------------
    lcmedv  = log(CMEDV)          response
    crim    = CRIM
    zn      = ZN
    indus   = INDUS
    rm      = RM
    age     = AGE
    rad     = RAD
    ptratio = PTRATIO
    lnox    = log(NOX)            NOX in parts per 10 million
    ldis    = log(DIS)
    ltax    = log(TAX)
    llstat  = log(LSTAT)
    chast   = CHAS

Usage: python3 make_fixtures.py <rdatasets wheel> <sklearn data dir>
"""
import csv
import gzip
import lzma
import math
import pickle
import sys
import zipfile


def boston(wheel):
    z = zipfile.ZipFile(wheel)
    raw = lzma.decompress(z.read("rdatasets/_data/DAAG/bostonc.pkl.compress"))
    frame = pickle.loads(raw)
    lines = [l for l in frame["dat"].fillna("") if l]
    start = next(i for i, l in enumerate(lines) if l.startswith("OBS."))
    header = lines[start].split("\t")
    rows = [dict(zip(header, l.split("\t"))) for l in lines[start + 1 :]]
    assert len(rows) == 506, len(rows)
    cols = ["lcmedv", "crim", "zn", "indus", "rm", "age", "rad", "ptratio",
            "lnox", "ldis", "ltax", "llstat", "chast"]
    out = []
    for r in rows:
        f = {k: float(v) for k, v in r.items() if k not in ("TOWN",)}
        out.append([
            math.log(f["CMEDV"]), f["CRIM"], f["ZN"], f["INDUS"], f["RM"],
            f["AGE"], f["RAD"], f["PTRATIO"], math.log(f["NOX"]),
            math.log(f["DIS"]), math.log(f["TAX"]), math.log(f["LSTAT"]),
            f["CHAS"],
        ])
    return cols, out


def diabetes(skdir):
    x = gzip.open(f"{skdir}/diabetes_data_raw.csv.gz", "rt").read().split("\n")
    y = gzip.open(f"{skdir}/diabetes_target.csv.gz", "rt").read().split("\n")
    x = [l.split() for l in x if l.strip()]
    y = [l.strip() for l in y if l.strip()]
    assert len(x) == len(y) == 442
    cols = ["Y", "AGE", "SEX", "BMI", "BP", "S1", "S2", "S3", "S4", "S5", "S6"]
    out = [[float(t)] + [float(v) for v in row] for row, t in zip(x, y)]
    return cols, out


def write(path, cols, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if not float(v).is_integer() else str(int(v)) for v in r])


if __name__ == "__main__":
    write("boston_corrected.csv", *boston(sys.argv[1]))
    write("diabetes.csv", *diabetes(sys.argv[2]))
