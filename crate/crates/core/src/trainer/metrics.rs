use std::io::{self, Write};

use serde::Serialize;

pub const METRICS_HEADER: &str =
    "epoch,q_loss,v_loss,policy_loss,alpha,beta,mean_q_dataset,mean_q_policy,eval_return,normalized_score";

/// Per-epoch averages of the training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub q_loss: f64,
    pub v_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mean_q_dataset: f64,
    pub mean_q_policy: f64,
    pub eval_return: f64,
    pub normalized_score: f64,
}

impl MetricsRow {
    pub fn values(&self) -> [f64; 9] {
        [
            self.q_loss,
            self.v_loss,
            self.policy_loss,
            self.alpha,
            self.beta,
            self.mean_q_dataset,
            self.mean_q_policy,
            self.eval_return,
            self.normalized_score,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|x| x.is_finite())
    }

    pub fn csv_line(&self) -> String {
        let mut line = self.epoch.to_string();
        for v in self.values() {
            line.push(',');
            line.push_str(&fmt_g6(v));
        }
        line
    }
}

/// C `%g` with six significant digits.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        trim_zeros(format!("{:.*}", (5 - exp) as usize, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()
}
