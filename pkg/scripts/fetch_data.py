"""Regenerate the bundled NSW / PSID CSV files.

The prepared subsets ship inside the package (``src/rrpmatch/data``). This
script rebuilds them from the R ``DAAG`` datasets as redistributed by the
``rdatasets`` PyPI package::

    pip install rdatasets
    python scripts/fetch_data.py

The Smith-Todd subset (108 treated, 142 controls) is not part of DAAG and is
not produced here; drop a prepared ``st.csv`` into the data directory to use it.
"""

from pathlib import Path

import rdatasets

OUT = Path(__file__).resolve().parents[1] / "src" / "rrpmatch" / "data"

RENAME = {
    "trt": "treat",
    "educ": "education",
    "hisp": "hispanic",
    "marr": "married",
    "nodeg": "nodegree",
}
COLUMNS = ["treat", "re78", "age", "education", "black", "hispanic",
           "married", "nodegree", "re74", "re75"]

SOURCES = {
    "ll.csv": "nswdemo",     # 297 treated, 425 controls
    "dw.csv": "nsw74demo",   # 185 treated, 260 controls
    "psid.csv": "psid1",     # 2490 controls
}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for fname, item in SOURCES.items():
        df = rdatasets.data("DAAG", item).rename(columns=RENAME)[COLUMNS]
        df.to_csv(OUT / fname, index=False, na_rep="", float_format="%.10g")
        print(f"{fname}: {len(df)} rows, treated={int(df.treat.sum())}")


if __name__ == "__main__":
    main()
