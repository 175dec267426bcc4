use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{improvement, Evaluation, Setting};

/// One evaluation record; serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub setting: Setting,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    /// Percentage MSE reduction against Repeat-Last.
    pub imp_mse: f64,
    pub imp_mae: f64,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
    pub samples: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(eval: &Evaluation, dataset: &str, seed: u64, config_hash: &str) -> Self {
        Self {
            dataset: dataset.to_string(),
            setting: eval.setting,
            horizon: eval.horizon,
            seed,
            mse: eval.mse,
            mae: eval.mae,
            imp_mse: improvement(eval.baseline_mse, eval.mse),
            imp_mae: improvement(eval.baseline_mae, eval.mae),
            baseline_mse: eval.baseline_mse,
            baseline_mae: eval.baseline_mae,
            samples: eval.samples,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Human-readable table of reports, with a seed-averaged row for every
/// (dataset, setting, horizon) group that has more than one seed.
pub fn format_summary(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<7} {:>5} {:>6} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "dataset", "setting", "H", "seed", "MSE", "MAE", "RL MSE", "RL MAE", "IMP%"
    );
    let mut groups: BTreeMap<(String, &'static str, usize), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.dataset.clone(), r.setting.name(), r.horizon)).or_default().push(r);
    }
    for ((dataset, setting, horizon), rows) in &groups {
        for r in rows {
            let _ = writeln!(
                out,
                "{:<16} {:<7} {:>5} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.2}",
                dataset, setting, horizon, r.seed, r.mse, r.mae, r.baseline_mse, r.baseline_mae, r.imp_mse
            );
        }
        if rows.len() > 1 {
            let n = rows.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let (m, a, bm, ba) = (mean(|r| r.mse), mean(|r| r.mae), mean(|r| r.baseline_mse), mean(|r| r.baseline_mae));
            let _ = writeln!(
                out,
                "{:<16} {:<7} {:>5} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.2}",
                dataset,
                setting,
                horizon,
                "mean",
                m,
                a,
                bm,
                ba,
                improvement(bm, m)
            );
        }
    }
    out
}

/// Two-column `step,loss` table.
pub fn write_history<W: Write>(mut out: W, history: &[(usize, f64)]) -> io::Result<()> {
    writeln!(out, "step,loss")?;
    for (step, loss) in history {
        writeln!(out, "{step},{loss}")?;
    }
    Ok(())
}
