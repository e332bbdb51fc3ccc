# main_app.py - Streamlit Results Dashboard
"""
Shear Stability Lab - Results Dashboard
Browses the CSV artifacts written by experiment_cli.py
"""

from pathlib import Path

import streamlit as st

from config import get_settings
from report_figures import list_experiments, read_result_csv, scaling_figure, timeseries_figure

settings = get_settings()

# Page Configuration
st.set_page_config(
    page_title=settings.app_name,
    page_icon="🌊",
    layout="wide",
)

# (x, y, group) plotted per experiment
SCALING_VIEWS = {
    "resolvent_audit": ("nu", "ratio", ["profile", "k", "estimate_id"]),
    "rho_identity": ("nu", "value", ["k"]),
    "decay_rates": ("nu", "gamma", ["profile", "k"]),
    "slab_decomposition": ("nu", "weighted_sum", ["profile", "k"]),
    "threshold": ("nu", "sum_E", ["profile"]),
    "appendix_lemmas": ("k", "kernel_max_norm", ["nu"]),
}


def main():
    st.title(f"🌊 {settings.app_name}")
    st.markdown("**Enhanced dissipation, resolvent estimates and transition thresholds for monotone shear flows**")

    with st.sidebar:
        st.header("🎛️ Control Panel")
        results_dir = st.text_input("Results directory", settings.output_dir)
        experiments = list_experiments(results_dir)
        if not experiments:
            st.warning("⚠️ No result CSVs found. Run experiment_cli.py first.")
            return
        experiment = st.radio("Experiment", experiments)

    show_experiment(Path(results_dir), experiment)


def show_experiment(results_dir: Path, experiment: str):
    """Table, scaling plot and fitted exponents of one experiment"""
    st.header(f"📊 {experiment}")
    rows = read_result_csv(results_dir / f"{experiment}.csv")
    failed = [row for row in rows if row.get("error")]

    col1, col2 = st.columns(2)
    with col1:
        st.metric("Rows", len(rows))
    with col2:
        st.metric("Failed points", len(failed))

    tab1, tab2, tab3 = st.tabs(["📈 Scaling", "📋 Table", "⏱️ Time Series"])

    with tab1:
        view = SCALING_VIEWS.get(experiment)
        if view:
            x, y, group = view
            st.plotly_chart(scaling_figure(rows, x, y, group), use_container_width=True)
        summary_path = results_dir / f"{experiment}_summary.csv"
        if summary_path.exists():
            st.subheader("Fitted exponents")
            st.dataframe(read_result_csv(summary_path))

    with tab2:
        st.dataframe(rows)

    with tab3:
        series_files = sorted((results_dir / "series").glob(f"{experiment}_*.csv"))
        if not series_files:
            st.info("No time series for this experiment")
            return
        chosen = st.selectbox("Run", [p.stem for p in series_files])
        series = read_result_csv(results_dir / "series" / f"{chosen}.csv")
        columns = [c for c in series[0] if c != "t"] if series else []
        picked = st.multiselect("Columns", columns, default=columns[:2])
        if picked:
            st.plotly_chart(timeseries_figure(series, picked, title=chosen), use_container_width=True)


if __name__ == "__main__":
    main()
