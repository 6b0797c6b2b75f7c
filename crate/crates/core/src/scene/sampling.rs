//! Frame-interval curriculum and context/target view sampling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleShape {
    /// Rounded linear ramp.
    Linear,
    /// Floored ramp: the interval only grows once a full unit is earned.
    Staircase,
}

/// Context frame interval growing from `start` to `end` over `ramp_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub start: usize,
    pub end: usize,
    pub ramp_steps: usize,
    #[serde(default = "default_shape")]
    pub shape: ScheduleShape,
}

fn default_shape() -> ScheduleShape {
    ScheduleShape::Linear
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            start: 25,
            end: 45,
            ramp_steps: 100_000,
            shape: ScheduleShape::Linear,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.start < 1 || self.start > self.end || self.ramp_steps < 1 {
            return Err(Error::Argument(format!(
                "curriculum needs 1 <= start <= end and ramp_steps >= 1, got ({}, {}, {})",
                self.start, self.end, self.ramp_steps
            )));
        }
        Ok(())
    }
}

pub fn curriculum_interval(step: usize, schedule: &CurriculumSchedule) -> Result<usize> {
    schedule.validate()?;
    let progress = (step as f64 / schedule.ramp_steps as f64).min(1.0);
    let delta = (schedule.end as f64 - schedule.start as f64) * progress;
    let delta = match schedule.shape {
        ScheduleShape::Linear => delta.round(),
        ScheduleShape::Staircase => delta.floor(),
    };
    Ok(schedule.start + delta as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiViewSample {
    pub sequence: String,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
}

/// Picks `num_context` evenly spread context frames spanning at most
/// `interval * (num_context - 1)` frames, then `num_target` sorted distinct
/// targets between the outer context frames (or anywhere outside the
/// context set when `extrapolate` is on).
pub fn sample_context_target(
    sequence: &str,
    seq_len: usize,
    num_context: usize,
    num_target: usize,
    interval: usize,
    extrapolate: bool,
    rng: &mut impl Rng,
) -> Result<MultiViewSample> {
    if num_context < 2 || num_target < 1 || interval < 1 {
        return Err(Error::Argument(format!(
            "need at least 2 context views, 1 target and interval 1, got {num_context}, {num_target}, {interval}"
        )));
    }
    let gaps = num_context - 1;
    if seq_len < gaps + 2 {
        return Err(Error::Sampling(format!(
            "sequence `{sequence}` has {seq_len} frames, too few for {num_context} context views and a target"
        )));
    }
    let span = (interval * gaps).min(seq_len - 1);
    if span < gaps {
        return Err(Error::Sampling(format!(
            "interval {interval} leaves no room for {num_context} distinct context views"
        )));
    }
    let start = rng.random_range(0..=seq_len - 1 - span);
    let context: Vec<usize> = (0..num_context)
        .map(|k| start + (k as f64 * span as f64 / gaps as f64).round() as usize)
        .collect();
    let (lo, hi) = if extrapolate {
        (0, seq_len)
    } else {
        (start + 1, start + span)
    };
    let candidates: Vec<usize> = (lo..hi).filter(|i| !context.contains(i)).collect();
    if candidates.len() < num_target {
        return Err(Error::Sampling(format!(
            "sequence `{sequence}`: only {} target candidates for {num_target} targets",
            candidates.len()
        )));
    }
    let mut target: Vec<usize> = index::sample(rng, candidates.len(), num_target)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    target.sort_unstable();
    Ok(MultiViewSample {
        sequence: sequence.to_string(),
        context,
        target,
    })
}
