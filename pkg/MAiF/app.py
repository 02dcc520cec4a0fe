import os

import numpy as np
import streamlit as st

from config.settings import OUTPUT_DIR, TIME_LIMIT
from core.error_handler import handle_errors
from core.gridworld import Scenario, formation_preset, generate_map
from core.logger import setup_logger
from services.bench import parse_results_csv, summary_table
from services.planners import PLANNERS, plan_scenario
from services.scalarization import WEIGHT_REPORT, load_weight_report

# Initialize logger
logger = setup_logger(__name__)

# Streamlit UI setup
st.set_page_config(page_title="MAiF Console", layout="wide")
st.title("🧭 MAiF Operator Console")
st.markdown("Browse benchmark runs and plan small scenarios with CBS or joint-state A*.")


# Cache the run listing (refresh every minute)
@st.cache_data(ttl=60)
def list_runs(root: str):
    if not os.path.isdir(root):
        return []
    return sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))


@handle_errors(fallback=lambda e: None)
def read_rows(path: str):
    return parse_results_csv(path)


@handle_errors(fallback=None)
def read_weight_report(path: str):
    return load_weight_report(path)


def render_grid(scenario: Scenario, positions) -> str:
    """Text rendering: '#' obstacle, digits for agents, 'g' for unoccupied goals."""
    grid = np.where(scenario.grid_map.cells, "#", ".").astype(object)
    for gx, gy in scenario.goals:
        grid[gy, gx] = "g"
    for i, (x, y) in enumerate(positions):
        grid[y, x] = str(i % 10)
    return "\n".join("".join(row) for row in grid)


@handle_errors(fallback=lambda e: str(e))
def plan_generated(size: int, density: float, agents: int, seed: int, shape: str, method: str,
                   weight: float, time_limit: float):
    grid_map = generate_map(size, density, seed, agent_count=agents)
    scenario = Scenario.from_map(grid_map, formation_preset(shape, agents), seed)
    return scenario, plan_scenario(method, scenario, weight, time_limit)


# Sidebar
with st.sidebar:
    st.title("Runs")
    root = st.text_input("Output directory", value=OUTPUT_DIR)
    runs = list_runs(root)
    if not runs:
        st.warning("⚠️ No runs found in this directory.")
    run = st.selectbox("Run", [""] + runs)

if run:
    run_dir = os.path.join(root, run)
    results_path = os.path.join(run_dir, "results.csv")
    if os.path.exists(results_path):
        rows = read_rows(results_path)
        if rows is None:
            st.error("❌ Could not parse results.csv.")
        else:
            st.subheader("Results")
            st.dataframe([vars(r) for r in rows])
            st.code(summary_table(rows))
    pareto_path = os.path.join(run_dir, "pareto.csv")
    if os.path.exists(pareto_path):
        st.subheader("Pareto points")
        with open(pareto_path) as f:
            st.code(f.read())
    weight_path = os.path.join(run_dir, WEIGHT_REPORT)
    if os.path.exists(weight_path):
        report = read_weight_report(weight_path)
        if report is None:
            st.error("❌ Could not read weight_report.yaml.")
        else:
            st.info(f"📊 Base weight w_f = {report.w_f:.4f} ± {report.confidence_halfwidth:.4f} (T={report.T})")

# Interactive planning
st.subheader("Plan a scenario")
col1, col2, col3, col4 = st.columns(4)
size = col1.number_input("Map size", min_value=10, max_value=64, value=10)
density = col2.number_input("Density", min_value=0.0, max_value=0.45, value=0.05, step=0.05)
agents = col3.number_input("Agents", min_value=1, max_value=4, value=3)
seed = col4.number_input("Seed", min_value=0, value=0)
method = st.selectbox("Method", PLANNERS)
weight = st.number_input("Formation weight (joint A* only)", min_value=0.0, value=0.0)
shape = st.selectbox("Formation", ["line", "column", "wedge", "square"])

if st.button("🚀 Plan"):
    with st.spinner("Planning..."):
        st.session_state.planned = plan_generated(int(size), float(density), int(agents), int(seed),
                                                  shape, method, float(weight), TIME_LIMIT)

planned = st.session_state.get("planned")
if isinstance(planned, str):
    st.error(f"❌ Planning failed: {planned}")
elif planned is not None:
    scenario, plan = planned
    st.success(f"✅ makespan {plan.makespan}, total formation loss {plan.total_formation_loss:.3f}, "
               f"{plan.runtime:.2f}s")
    t = st.slider("Timestep", 0, max(plan.length - 1, 1), 0)
    st.code(render_grid(scenario, plan.positions_at(t)))
