//! The session MDP: segments are states, actions propose an RT, a tracer
//! blends proposals into a traced RT, and covered segments pay the negative
//! absolute tracing error.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preproc::SegmentState;

/// Discrete RT proposals, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActionSpace {
    proposals: Vec<f64>,
}

pub const RT_MIN: f64 = 0.5;
pub const RT_MAX: f64 = 8.0;

impl ActionSpace {
    pub fn new(proposals: Vec<f64>) -> Result<Self> {
        if proposals.len() < 2 {
            return Err(Error::InvalidArgument("action space needs at least two proposals".into()));
        }
        if proposals.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("proposals must be strictly increasing".into()));
        }
        if proposals.iter().any(|p| !(RT_MIN..=RT_MAX).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "proposals must lie within [{RT_MIN}, {RT_MAX}] s"
            )));
        }
        Ok(ActionSpace { proposals })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn proposals(&self) -> &[f64] {
        &self.proposals
    }

    pub fn min(&self) -> f64 {
        self.proposals[0]
    }

    pub fn max(&self) -> f64 {
        self.proposals[self.proposals.len() - 1]
    }

    pub fn action_to_prt(&self, index: usize) -> Result<f64> {
        self.proposals.get(index).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "action {index} is out of range for {} proposals",
                self.proposals.len()
            ))
        })
    }
}

impl Default for ActionSpace {
    /// 16 proposals from 0.5 s to 8.0 s in 0.5 s steps.
    fn default() -> Self {
        ActionSpace {
            proposals: (1..=16).map(|i| i as f64 * 0.5).collect(),
        }
    }
}

impl TryFrom<Vec<f64>> for ActionSpace {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ActionSpace::new(v)
    }
}

impl From<ActionSpace> for Vec<f64> {
    fn from(a: ActionSpace) -> Self {
        a.proposals
    }
}

/// Exponential tracer `tRT <- beta * tRT + (1 - beta) * pRT`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracerState {
    pub traced_rt: f64,
    pub beta: f64,
}

impl TracerState {
    pub fn new(initial: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(TracerState {
            traced_rt: initial,
            beta,
        })
    }

    pub fn update(&mut self, proposal: f64) -> f64 {
        self.traced_rt = self.beta * self.traced_rt + (1.0 - self.beta) * proposal;
        self.traced_rt
    }
}

/// `beta^t * initial + (1 - beta) * sum_k beta^(t-k) * p_k` after all
/// proposals have been applied.
pub fn traced_closed_form(initial: f64, beta: f64, proposals: &[f64]) -> f64 {
    let t = proposals.len() as i32;
    let blended: f64 = proposals
        .iter()
        .enumerate()
        .map(|(k, p)| beta.powi(t - 1 - k as i32) * p)
        .sum();
    beta.powi(t) * initial + (1.0 - beta) * blended
}

/// `-|measured - traced|` on covered segments, otherwise 0.
pub fn coverage_reward(measured: Option<f64>, traced: f64) -> f64 {
    match measured {
        Some(m) => -(m - traced).abs(),
        None => 0.0,
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    /// `None` once the final segment has been consumed.
    pub next_state: Option<Arc<SegmentState>>,
    pub reward: f64,
    pub done: bool,
    pub traced_rt: f64,
}

/// One pass over a session's segments.
#[derive(Clone, Debug)]
pub struct Environment {
    actions: ActionSpace,
    segments: Vec<Arc<SegmentState>>,
    tracer: TracerState,
    cursor: usize,
}

impl Environment {
    pub fn new(actions: ActionSpace) -> Self {
        Environment {
            actions,
            segments: Vec::new(),
            tracer: TracerState {
                traced_rt: 1.0,
                beta: 0.0,
            },
            cursor: 0,
        }
    }

    pub fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    /// Start an episode at segment 0 with the tracer at `initial_trt`.
    pub fn reset(
        &mut self,
        segments: &[Arc<SegmentState>],
        beta: f64,
        initial_trt: f64,
    ) -> Result<Arc<SegmentState>> {
        if segments.is_empty() {
            return Err(Error::InvalidArgument("cannot start an episode on an empty session".into()));
        }
        if !(self.actions.min()..=self.actions.max()).contains(&initial_trt) {
            return Err(Error::InvalidArgument(format!(
                "initial traced RT {initial_trt} lies outside the proposal range [{}, {}]",
                self.actions.min(),
                self.actions.max()
            )));
        }
        self.tracer = TracerState::new(initial_trt, beta)?;
        self.segments = segments.to_vec();
        self.cursor = 0;
        Ok(Arc::clone(&self.segments[0]))
    }

    pub fn traced_rt(&self) -> f64 {
        self.tracer.traced_rt
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.segments.len()
    }

    pub fn current(&self) -> Option<&Arc<SegmentState>> {
        self.segments.get(self.cursor)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::Precondition("step called after the episode finished".into()));
        }
        let proposal = self.actions.action_to_prt(action)?;
        let traced = self.tracer.update(proposal);
        let reward = coverage_reward(self.segments[self.cursor].measured_rt, traced);
        self.cursor += 1;
        let next_state = self.segments.get(self.cursor).cloned();
        Ok(StepResult {
            done: next_state.is_none(),
            next_state,
            reward,
            traced_rt: traced,
        })
    }
}
