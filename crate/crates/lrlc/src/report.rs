//! Cost tables for a configured model.

use lrlc_core::cost::{model_costs, CostMode, CostReport, CostRow};
use lrlc_core::model::ModelSpec;

pub const COST_HEADER: &str =
    "mode,component,basis_params,combining_params,bias_params,trainable_params,macs,elementwise_ops,inference_params,inference_bytes";

pub const MODES: [CostMode; 3] = [CostMode::Train, CostMode::LoweredInference, CostMode::Dynamic];

/// `all` or a single mode name.
pub fn parse_modes(s: &str) -> Option<Vec<CostMode>> {
    if s == "all" {
        return Some(MODES.to_vec());
    }
    CostMode::parse(s).map(|m| vec![m])
}

/// Per-component rows followed by a `total` row.
pub fn report_costs(spec: &ModelSpec, mode: CostMode) -> Vec<CostRow> {
    let mut rows = model_costs(spec, mode);
    let total: CostReport = rows.iter().map(|r| r.report).sum();
    rows.push(CostRow { name: String::from("total"), report: total });
    rows
}

pub fn cost_csv(spec: &ModelSpec, modes: &[CostMode]) -> String {
    let mut s = format!("{COST_HEADER}\n");
    for &mode in modes {
        for row in report_costs(spec, mode) {
            let r = row.report;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                mode.name(),
                row.name,
                r.basis_params,
                r.combining_params,
                r.bias_params,
                r.trainable_params,
                r.macs,
                r.elementwise_ops,
                r.inference_params,
                r.inference_bytes
            ));
        }
    }
    s
}
