use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const MASK_RATIOS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

/// Pretraining objectives, differing in how history and future are masked
/// and which positions are reconstructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "ae-h")]
    AeH,
    #[serde(rename = "mae-h")]
    MaeH,
    #[serde(rename = "mae-f")]
    MaeF,
    #[serde(rename = "mae-rc")]
    MaeRc,
    #[serde(rename = "mae-all")]
    MaeAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Absent,
    Unmasked,
    Random,
    Full,
}

impl Objective {
    pub const ALL: [Objective; 5] = [Objective::AeH, Objective::MaeH, Objective::MaeF, Objective::MaeRc, Objective::MaeAll];

    pub fn name(self) -> &'static str {
        match self {
            Objective::AeH => "ae-h",
            Objective::MaeH => "mae-h",
            Objective::MaeF => "mae-f",
            Objective::MaeRc => "mae-rc",
            Objective::MaeAll => "mae-all",
        }
    }

    pub fn history(self) -> Segment {
        match self {
            Objective::AeH | Objective::MaeF => Segment::Unmasked,
            Objective::MaeH | Objective::MaeRc | Objective::MaeAll => Segment::Random,
        }
    }

    pub fn future(self) -> Segment {
        match self {
            Objective::AeH | Objective::MaeH => Segment::Absent,
            Objective::MaeF | Objective::MaeRc => Segment::Full,
            Objective::MaeAll => Segment::Random,
        }
    }

    /// Whether future positions are reconstruction targets.
    pub fn predicts_future(self) -> bool {
        self.future() != Segment::Absent
    }

    /// Whether future tokens are ever visible to the encoder.
    pub fn encodes_future(self) -> bool {
        self.future() == Segment::Random
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}; expected one of ae-h, mae-h, mae-f, mae-rc, mae-all")))
    }
}

/// Realized mask for one sample. Flags are indexed over the `k + p` window
/// positions regardless of objective; `input_mask` is meaningful only for
/// positions the objective feeds to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub objective: Objective,
    pub k: usize,
    pub p: usize,
    pub input_mask: Vec<bool>,
    pub target: Vec<bool>,
    pub ratio: f64,
}

impl MaskSpec {
    /// Input-mask flags over the segments present in the encoder input:
    /// `k` entries, or `k + p` when the future segment exists.
    pub fn input_layout(&self) -> &[bool] {
        if self.objective.future() == Segment::Absent {
            &self.input_mask[..self.k]
        } else {
            &self.input_mask
        }
    }

    /// Window positions fed to the encoder, with their mask flag.
    /// Fully masked segments carry no information and are left out.
    pub fn encoder_positions(&self) -> Vec<(usize, bool)> {
        let n = if self.objective.encodes_future() { self.k + self.p } else { self.k };
        (0..n).map(|i| (i, self.input_mask[i])).collect()
    }

    /// Unmasked history, as used when encoding for the policy.
    pub fn unmasked(objective: Objective, k: usize, p: usize) -> Self {
        MaskSpec { objective, k, p, input_mask: vec![false; k + p], target: vec![false; k + p], ratio: 0.0 }
    }
}

fn random_segment(flags: &mut [bool], ratio: f64, rng: &mut RngStream) {
    let count = (ratio * flags.len() as f64).round() as usize;
    for i in rng.choose_distinct(flags.len(), count) {
        flags[i] = true;
    }
}

pub fn build_mask(objective: Objective, k: usize, p: usize, rng: &mut RngStream) -> Result<MaskSpec> {
    if k == 0 {
        return Err(Error::Config("history length k must be at least 1".into()));
    }
    if objective.predicts_future() && p == 0 {
        return Err(Error::Config(format!("objective {objective} needs a future window p >= 1")));
    }
    let uses_ratio = objective.history() == Segment::Random || objective.future() == Segment::Random;
    let ratio = if uses_ratio { MASK_RATIOS[rng.index(MASK_RATIOS.len())] } else { 0.0 };
    let mut input_mask = vec![false; k + p];
    let (hist, fut) = input_mask.split_at_mut(k);
    if objective.history() == Segment::Random {
        random_segment(hist, ratio, rng);
    }
    match objective.future() {
        Segment::Absent | Segment::Unmasked => {}
        Segment::Full => fut.fill(true),
        Segment::Random => random_segment(fut, ratio, rng),
    }
    let mut target = vec![true; k + p];
    if !objective.predicts_future() {
        target[k..].fill(false);
    }
    Ok(MaskSpec { objective, k, p, input_mask, target, ratio })
}
