import json, os
from pathlib import Path

import streamlit as st

RUNS_DIR = Path(os.getenv("CCDET_RUNS_DIR", "runs"))

st.set_page_config(page_title="CC detector - runs", layout="wide")
st.title("CC detector - run browser")

def safe_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8")), None
    except FileNotFoundError:
        return None, f"{path.name} not written yet."
    except json.JSONDecodeError:
        return None, f"{path.name} is not valid JSON (run still in progress?)."
    except OSError as e:
        return None, f"Could not read {path.name}: {e}"

def fmt(v, digits=3):
    return "n/a" if v is None else f"{v:.{digits}f}"

def list_runs(root: Path):
    if not root.is_dir():
        return []
    return sorted((p for p in root.iterdir() if (p / "manifest.json").is_file()), reverse=True)

with st.sidebar:
    st.header("Runs")
    root = Path(st.text_input("Runs directory", str(RUNS_DIR)))
    runs = list_runs(root)
    if not runs:
        st.info(f"No runs under {root}. Start one with `python -m app.main train --data <corpus>`.")
        st.stop()
    run = st.selectbox("Run", runs, format_func=lambda p: p.name)
    manifest, err = safe_json(run / "manifest.json")
    if manifest:
        st.caption(f"{manifest['command']} · v{manifest['version']} · {manifest['started']}")

summary, err = safe_json(run / "summary.json")
if summary:
    h = summary["holdout"]
    c1, c2, c3 = st.columns(3)
    c1.metric("Mean accuracy", fmt(h["mean_accuracy"]))
    c2.metric("Mean AUC", fmt(h.get("mean_auc")))
    c3.metric("IoU >= 0.5", fmt(h.get("mean_iou_at_least_05")))
    st.caption(f"Corpus: {summary['corpus']['n_images']} images, {summary['corpus']['n_subjects']} subjects")
    if h.get("subject_level_supplementary"):
        with st.expander("Subject-level majority vote (supplementary)"):
            st.json(h["subject_level_supplementary"])
    round_dirs = [run / r["report"].split("/")[0] for r in summary["rounds"]]
else:
    st.info(err)
    round_dirs = [run] if (run / "report.json").is_file() else []

for rdir in round_dirs:
    st.subheader(rdir.name if rdir != run else "Evaluation")
    report, err = safe_json(rdir / "report.json")
    if not report:
        st.info(err)
        continue
    left, right = st.columns(2)
    with left:
        st.markdown("**Confusion (rows = true, cols = predicted)**")
        st.table({"pred HC": [row[0] for row in report["confusion"]],
                  "pred APD": [row[1] for row in report["confusion"]],
                  "abstained": report["abstained"]})
        st.write(f"accuracy {fmt(report['accuracy'])} · AUC {fmt(report.get('auc'))}")
        st.write({"precision": report["precision"], "recall": report["recall"], "f1": report["f1"]})
        for note in report.get("notes", []):
            st.warning(note)
    with right:
        for name in ("roc.svg", "pr.svg"):
            svg = rdir / name
            if svg.is_file():
                st.image(str(svg))
    log_csv = rdir / "train_log.csv"
    if log_csv.is_file():
        with st.expander("Training log"):
            st.code(log_csv.read_text(encoding="utf-8"), language="text")

pngs = sorted(run.glob("*.png"))
if pngs:
    st.subheader("Images")
    cols = st.columns(4)
    for i, png in enumerate(pngs[:48]):
        cols[i % 4].image(str(png), caption=png.name)
