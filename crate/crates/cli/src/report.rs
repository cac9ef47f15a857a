//! Report assembly and emission. A report is the resolved config, the seed,
//! the tool version, and a list of result rows; JSON and CSV emissions carry
//! the same values.

use serde::Serialize;

use crate::spec::RunSpec;

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum Row {
    Gradcheck {
        layer: usize,
        quantity: String,
        fast_vs_exact: f64,
        exact_vs_fd: f64,
    },
    Errsweep {
        degree: usize,
        f_err: f64,
        gt_err: f64,
        bound: f64,
    },
    Degenerate {
        degree: usize,
        degenerate: bool,
    },
    ScalingPoint {
        series: String,
        n: usize,
        flops: u64,
        wall_ns: u128,
    },
    Slope {
        series: String,
        slope: f64,
    },
    TrainStep {
        step: usize,
        loss: f64,
    },
    Scalar {
        name: String,
        value: f64,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub config: RunSpec,
    pub seed: u64,
    pub version: String,
    pub results: Vec<Row>,
}

impl Report {
    pub fn new(config: RunSpec, results: Vec<Row>) -> Self {
        let seed = config.seed;
        Self {
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            results,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    /// CSV: one row per result. Columns are the union of the row keys in
    /// alphabetical order; floats carry 17 significant digits.
    pub fn to_csv(&self) -> String {
        let values: Vec<serde_json::Map<String, serde_json::Value>> = self
            .results
            .iter()
            .map(|r| match serde_json::to_value(r).expect("row serialization") {
                serde_json::Value::Object(m) => m,
                other => panic!("row did not serialize to an object: {other}"),
            })
            .collect();

        let mut columns: Vec<String> = Vec::new();
        for row in &values {
            for key in row.keys() {
                if !columns.iter().any(|c| c == key) {
                    columns.push(key.clone());
                }
            }
        }
        columns.sort();

        let mut out = String::new();
        out.push_str(&columns.join(","));
        out.push('\n');
        for row in &values {
            let cells: Vec<String> = columns
                .iter()
                .map(|c| row.get(c).map_or(String::new(), format_cell))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn format_cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Number(num) => {
            if let Some(u) = num.as_u64() {
                u.to_string()
            } else if let Some(i) = num.as_i64() {
                i.to_string()
            } else {
                format!("{:.16e}", num.as_f64().unwrap())
            }
        }
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Bool(b) => b.to_string(),
        other => other.to_string(),
    }
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in points {
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
