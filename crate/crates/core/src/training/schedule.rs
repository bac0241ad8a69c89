use serde::{Deserialize, Serialize};

/// Piecewise-constant learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Base until 50% of the run, base/10 until 75%, base/100 after.
    Mse,
    /// Base until 50% of the run, base/10 after.
    Gan,
    Constant,
}

impl Schedule {
    pub fn lr(self, epoch: usize, total: usize, base: f64) -> f64 {
        lr_schedule(self, epoch, total, base)
    }
}

pub fn lr_schedule(kind: Schedule, epoch: usize, total: usize, base: f64) -> f64 {
    // Integer comparisons keep the breakpoints exact for any total.
    let half = 2 * epoch >= total;
    let three_quarters = 4 * epoch >= 3 * total;
    match kind {
        Schedule::Constant => base,
        Schedule::Gan if half => base / 10.0,
        Schedule::Gan => base,
        Schedule::Mse if three_quarters => base / 100.0,
        Schedule::Mse if half => base / 10.0,
        Schedule::Mse => base,
    }
}
