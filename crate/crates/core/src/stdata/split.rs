use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Chronological ranges over the time axis: `pre | tun | val | tst`, where
/// `tun` is the trailing slice of the training window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub pre: Range<usize>,
    pub tun: Range<usize>,
    pub val: Range<usize>,
    pub tst: Range<usize>,
}

impl SplitPlan {
    pub fn ranges(&self) -> [(&'static str, &Range<usize>); 4] {
        [("pre", &self.pre), ("tun", &self.tun), ("val", &self.val), ("tst", &self.tst)]
    }
}

/// `tun_tail` steps at 5-minute cadence: 288 = one day, 2016 = one week, 4032 = two weeks.
pub fn split_chronological(n_steps: usize, fr: SplitFractions, tun_tail: usize) -> Result<SplitPlan> {
    if ((fr.train + fr.val + fr.test) - 1.0).abs() > 1e-9 || fr.train < 0.0 || fr.val < 0.0 || fr.test < 0.0 {
        return Err(Error::InvalidArgument("split fractions must be non-negative and sum to 1".into()));
    }
    let train_end = (fr.train * n_steps as f64).floor() as usize;
    if tun_tail > train_end {
        return Err(Error::InvalidArgument(format!(
            "tun_tail {tun_tail} exceeds the training window of {train_end} steps"
        )));
    }
    let val_len = (fr.val * n_steps as f64).floor() as usize;
    let plan = SplitPlan {
        pre: 0..train_end - tun_tail,
        tun: train_end - tun_tail..train_end,
        val: train_end..(train_end + val_len).min(n_steps),
        tst: (train_end + val_len).min(n_steps)..n_steps,
    };
    for (name, r) in plan.ranges() {
        if r.is_empty() {
            return Err(Error::InvalidArgument(format!("empty {name} range")));
        }
    }
    Ok(plan)
}
