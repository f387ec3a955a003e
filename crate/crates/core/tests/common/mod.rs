#![allow(dead_code)]

use std::path::PathBuf;

use mfc_lab::cli::{load_config, ExperimentConfig};
use minilp::{ComparisonOp, OptimizationDirection, Problem};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn shipped_config(name: &str) -> ExperimentConfig {
    let text = std::fs::read_to_string(config_path(name)).expect("shipped config");
    load_config(&text, &[])
        .expect("valid shipped config")
        .config
}

/// Optimal transport cost `min Σ c_ij π_ij` between uniform measures on `a` and `b`
/// (`|x − y|^p` ground cost), solved as a dense LP.
pub fn lp_transport_cost(a: &[f64], b: &[f64], p: i32) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = a
        .iter()
        .map(|x| {
            b.iter()
                .map(|y| lp.add_var((x - y).abs().powi(p), (0.0, f64::INFINITY)))
                .collect()
        })
        .collect();
    for row in &vars {
        let terms: Vec<_> = row.iter().map(|v| (*v, 1.0)).collect();
        lp.add_constraint(&terms[..], ComparisonOp::Eq, 1.0 / n as f64);
    }
    for j in 0..m {
        let terms: Vec<_> = vars.iter().map(|row| (row[j], 1.0)).collect();
        lp.add_constraint(&terms[..], ComparisonOp::Eq, 1.0 / m as f64);
    }
    lp.solve().expect("feasible transport LP").objective()
}
