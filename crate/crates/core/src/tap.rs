//! Model of the physical tap: link loss, attachment gaps, signal attenuation
//! and the 100BASE-TX insertion-loss budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::FrameStream;

/// Insertion loss allowed for a 100BASE-TX link segment, 2-16 MHz.
pub const ALLOWED_INSERTION_LOSS_DB: f64 = 14.6;
/// Category 3 cable insertion loss at 16 MHz, per 100 m.
pub const CAT3_LOSS_DB_PER_100M: f64 = 13.1;
/// Category 5e cable insertion loss, per 100 m.
pub const CAT5E_LOSS_DB_PER_100M: f64 = 8.2;
/// Budgets passing with less headroom than this are flagged as marginal.
pub const MARGINAL_HEADROOM_DB: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapError {
    #[error("voltages must be positive (got {tapped} V / {baseline} V)")]
    NonPositiveVoltage { tapped: f64, baseline: f64 },
    #[error("loss probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("observation gaps must be ordered, non-empty and non-overlapping")]
    InvalidGaps,
    #[error("cable length must be positive (got {0} m)")]
    InvalidLength(f64),
}

/// Attenuation in decibels of a tapped signal relative to its baseline.
pub fn attenuation_db(v_tapped: f64, v_baseline: f64) -> Result<f64, TapError> {
    if !(v_tapped > 0.0 && v_baseline > 0.0) {
        return Err(TapError::NonPositiveVoltage {
            tapped: v_tapped,
            baseline: v_baseline,
        });
    }
    Ok(20.0 * (v_tapped / v_baseline).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CableCategory {
    Cat3,
    Cat5e,
}

impl CableCategory {
    pub fn loss_db_per_100m(self) -> f64 {
        match self {
            CableCategory::Cat3 => CAT3_LOSS_DB_PER_100M,
            CableCategory::Cat5e => CAT5E_LOSS_DB_PER_100M,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    pub cable_category: CableCategory,
    pub length_m: f64,
    /// Loss added by the tap, as a positive number of dB.
    pub tap_loss_db: f64,
    pub allowed_db: f64,
}

impl LossBudget {
    pub fn new(
        cable_category: CableCategory,
        length_m: f64,
        tap_loss_db: f64,
    ) -> Result<Self, TapError> {
        if length_m.is_nan() || length_m <= 0.0 {
            return Err(TapError::InvalidLength(length_m));
        }
        Ok(Self {
            cable_category,
            length_m,
            tap_loss_db,
            allowed_db: ALLOWED_INSERTION_LOSS_DB,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetVerdict {
    pub pass: bool,
    pub margin_db: f64,
    /// Passes, but with less than [`MARGINAL_HEADROOM_DB`] to spare.
    pub marginal: bool,
}

pub fn budget_check(budget: &LossBudget) -> BudgetVerdict {
    let cable_loss = budget.cable_category.loss_db_per_100m() * budget.length_m / 100.0;
    let margin_db = budget.allowed_db - (cable_loss + budget.tap_loss_db);
    let pass = margin_db >= 0.0;
    BudgetVerdict {
        pass,
        margin_db,
        marginal: pass && margin_db < MARGINAL_HEADROOM_DB,
    }
}

/// Loss behaviour of the tap. Gaps are half-open `[start_ns, end_ns)`
/// windows during which the tap sees nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapLossProfile {
    pub link_loss_probability: f64,
    #[serde(default)]
    pub observation_gaps: Vec<(u64, u64)>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TapLossProfile {
    pub fn new(
        link_loss_probability: f64,
        observation_gaps: Vec<(u64, u64)>,
        rng_seed: u64,
    ) -> Result<Self, TapError> {
        let profile = Self {
            link_loss_probability,
            observation_gaps,
            rng_seed,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn lossless() -> Self {
        Self {
            link_loss_probability: 0.0,
            observation_gaps: Vec::new(),
            rng_seed: 0,
        }
    }

    /// Per-frame loss such that a request/response exchange (two frames)
    /// is lost with probability `exchange_loss`.
    pub fn calibrated_for_exchange_loss(
        exchange_loss: f64,
        rng_seed: u64,
    ) -> Result<Self, TapError> {
        if !(0.0..=1.0).contains(&exchange_loss) {
            return Err(TapError::InvalidProbability(exchange_loss));
        }
        Self::new(1.0 - (1.0 - exchange_loss).sqrt(), Vec::new(), rng_seed)
    }

    pub fn with_gaps(mut self, gaps: Vec<(u64, u64)>) -> Result<Self, TapError> {
        self.observation_gaps = gaps;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }

    pub fn validate(&self) -> Result<(), TapError> {
        if !(0.0..=1.0).contains(&self.link_loss_probability) {
            return Err(TapError::InvalidProbability(self.link_loss_probability));
        }
        let ordered = self.observation_gaps.iter().all(|(s, e)| s < e)
            && self.observation_gaps.windows(2).all(|w| w[0].1 <= w[1].0);
        if !ordered {
            return Err(TapError::InvalidGaps);
        }
        Ok(())
    }

    pub fn in_gap(&self, offset_ns: u64) -> bool {
        // Gaps are sorted, so binary search on start.
        let idx = self
            .observation_gaps
            .partition_point(|(s, _)| *s <= offset_ns);
        idx > 0 && offset_ns < self.observation_gaps[idx - 1].1
    }
}

/// Splits `[0, duration_ns)` into `switches + 1` equal segments and marks
/// every other one, starting with the second, as a gap. Models a tap being
/// moved between wire pairs `switches` times over the capture.
pub fn alternating_gaps(duration_ns: u64, switches: u32) -> Vec<(u64, u64)> {
    let segments = u64::from(switches) + 1;
    let bound = |i: u64| ((u128::from(duration_ns) * u128::from(i)) / u128::from(segments)) as u64;
    (1..segments)
        .step_by(2)
        .map(|i| (bound(i), bound(i + 1)))
        .filter(|(s, e)| s < e)
        .collect()
}

/// The intermittent-attachment run: 102 switches in 108 s.
pub const ATTACHMENT_SWITCHES: u32 = 102;
pub const ATTACHMENT_RUN_NS: u64 = 108_000_000_000;

/// Drops frames the tap would not have seen. One uniform draw is made per
/// input frame, in order, so the drop pattern depends only on the seed and
/// the frame's position, not on the gaps.
pub fn apply_tap(stream: FrameStream, profile: &TapLossProfile) -> FrameStream {
    let profile = profile.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.rng_seed);
    stream.filter_frames(move |frame| {
        let draw: f64 = rng.random();
        let lost = draw < profile.link_loss_probability;
        !lost && !profile.in_gap(frame.capture_offset_ns())
    })
}

/// Echo-request/response experiment over the tapped link: each exchange
/// succeeds if both the request and the response survive. Observation gaps
/// do not affect the link itself and are ignored here.
pub fn icmp_experiment(sent: u64, profile: &TapLossProfile) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.rng_seed);
    let p = profile.link_loss_probability;
    (0..sent)
        .filter(|_| {
            let request: f64 = rng.random();
            let response: f64 = rng.random();
            request >= p && response >= p
        })
        .count() as u64
}
