"""Regenerate the bundled CSV + schema files under src/afa/data/.

The raw files come from two PyPI wheels that vendor UCI data:

    pip download --no-deps keel-ds==0.2.5 Orange3==3.39.0 -d /tmp/wheels
    python tools/build_datasets.py /tmp/wheels

* spam:   KEEL ``spambase.dat`` (4597 rows, 57 features; KEEL dropped 4
          duplicate rows of the UCI original)
* breast: KEEL ``wisconsin.dat`` (683 rows, the UCI original with the 16
          incomplete rows removed), label 4 (malignant) -> 1
* heart:  Orange ``heart_disease.tab`` (Cleveland, 303 rows); ``major vessels``
          and ``thal`` are dropped (imaging), leaving 11 features. Costs are
          the UCI heart-disease cost sheet, in Canadian dollars.
"""

import csv
import glob
import io
import os
import sys
import zipfile

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "src", "afa", "data")

SPAM_COLUMNS = [
    "make", "address", "all", "3d", "our", "over", "remove", "internet",
    "order", "mail", "receive", "will", "people", "report", "addresses",
    "free", "business", "email", "you", "credit", "your", "font", "000",
    "money", "hp", "hpl", "george", "650", "lab", "labs", "telnet", "857",
    "data", "415", "85", "technology", "1999", "parts", "pm", "direct", "cs",
    "meeting", "original", "project", "re", "edu", "table", "conference",
]
SPAM_COLUMNS = ["word_freq_" + w for w in SPAM_COLUMNS] + [
    "char_freq_semicolon", "char_freq_paren", "char_freq_bracket",
    "char_freq_exclaim", "char_freq_dollar", "char_freq_hash",
    "capital_run_length_average", "capital_run_length_longest",
    "capital_run_length_total",
]

BREAST_COLUMNS = [
    "clump_thickness", "cell_size_uniformity", "cell_shape_uniformity",
    "marginal_adhesion", "single_epithelial_cell_size", "bare_nuclei",
    "bland_chromatin", "normal_nucleoli", "mitoses",
]

# UCI heart-disease cost sheet (Turney 1995), imaging tests removed.
HEART_COSTS = {
    "age": 1.0, "sex": 1.0, "cp": 1.0, "trestbps": 1.0, "chol": 7.27,
    "fbs": 5.2, "restecg": 15.5, "thalach": 102.9, "exang": 87.3,
    "oldpeak": 87.3, "slope": 87.3,
}
CP = {"typical ang": 1, "atypical ang": 2, "non-anginal": 3, "asymptomatic": 4}
RESTECG = {"normal": 0, "ST-T abnormal": 1, "left vent hypertrophy": 2}
SLOPE = {"upsloping": 1, "flat": 2, "downsloping": 3}


def _wheel(dirname, prefix):
    hits = glob.glob(os.path.join(dirname, prefix + "*.whl"))
    if not hits:
        sys.exit("no %s wheel in %s" % (prefix, dirname))
    return zipfile.ZipFile(hits[0])


def _keel_rows(text):
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        rows.append([v.strip() for v in line.split(",")])
    return rows


def _write(name, header, rows, groups, label):
    with open(os.path.join(OUT, name + ".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    with open(os.path.join(OUT, name + ".schema"), "w") as fh:
        fh.write("[dataset]\nname = %s\n\n[label]\ncolumn = %s\n\n[groups]\n" % (name, label))
        for gname, cols, cost in groups:
            fh.write("%s = %s ; cost=%s\n" % (gname, ", ".join(cols), cost))
    print(name, len(rows), "rows")


def build_spam(keel):
    rows = _keel_rows(keel.read("keel_ds/data/balanced/raw/spambase.dat").decode())
    assert all(len(r) == 58 for r in rows)
    groups = [(c, [c], 1.0) for c in SPAM_COLUMNS]
    _write("spam", SPAM_COLUMNS + ["spam"], rows, groups, "spam")


def build_breast(keel):
    rows = _keel_rows(keel.read("keel_ds/data/balanced/raw/wisconsin.dat").decode())
    out = []
    for r in rows:
        assert len(r) == 10 and r[-1] in ("2", "4")
        out.append(r[:-1] + ["1" if r[-1] == "4" else "0"])
    groups = [(c, [c], 1.0) for c in BREAST_COLUMNS]
    _write("breast", BREAST_COLUMNS + ["malignant"], out, groups, "malignant")


def build_heart(orange):
    text = orange.read("Orange/datasets/heart_disease.tab").decode()
    lines = text.splitlines()
    head = lines[0].split("\t")
    out = []
    for line in lines[3:]:
        if not line.strip():
            continue
        rec = dict(zip(head, line.split("\t")))
        vals = [
            rec["age"],
            "1" if rec["gender"] == "male" else "0",
            str(CP[rec["chest pain"]]),
            rec["rest SBP"],
            rec["cholesterol"],
            rec["fasting blood sugar > 120"],
            str(RESTECG[rec["rest ECG"]]),
            rec["max HR"],
            rec["exerc ind ang"],
            rec["ST by exercise"],
            str(SLOPE[rec["slope peak exc ST"]]),
        ]
        if any(v in ("", "?") for v in vals):
            continue
        out.append(vals + ["1" if rec["diameter narrowing"] == "1" else "0"])
    names = list(HEART_COSTS)
    groups = [(c, [c], HEART_COSTS[c]) for c in names]
    _write("heart", names + ["disease"], out, groups, "disease")


if __name__ == "__main__":
    src = sys.argv[1] if len(sys.argv) > 1 else "."
    os.makedirs(OUT, exist_ok=True)
    keel = _wheel(src, "keel_ds")
    build_spam(keel)
    build_breast(keel)
    build_heart(_wheel(src, "orange3"))
