//! Test-time metrics: summed negative log-likelihood, per-step nll,
//! bits per character and perplexity.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Frame, HiddenState, ModelConfig, Network, ParamSet};
use crate::par::{self, Execution};

/// All losses are in nats; `bpc` and `perplexity` are derived from
/// `nll_per_step`. For piano rolls `nll_per_step` is the per-frame loss
/// summed over the 88 keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub total_nll_nats: f64,
    pub steps: usize,
    pub nll_per_step: f64,
    pub bpc: f64,
    pub perplexity: f64,
}

impl MetricReport {
    pub fn from_total(total_nll_nats: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("nothing to evaluate: no prediction steps"));
        }
        let nll_per_step = total_nll_nats / steps as f64;
        Ok(MetricReport {
            total_nll_nats,
            steps,
            nll_per_step,
            bpc: nll_per_step / LN_2,
            perplexity: nll_per_step.exp(),
        })
    }

    /// `key=value` lines in a fixed order.
    pub fn to_key_value(&self) -> String {
        format!(
            "total_nll_nats={}\nsteps={}\nnll_per_step={}\nbpc={}\nperplexity={}\n",
            self.total_nll_nats, self.steps, self.nll_per_step, self.bpc, self.perplexity
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Sequential pass over one sequence with state carried across chunks.
/// Losses are accumulated step by step, so the result does not depend on
/// `max_len`.
fn score_sequence(net: &Network<'_>, frames: &[Frame], max_len: usize) -> Result<(f64, usize)> {
    let n = frames.len().saturating_sub(1);
    let mut total = 0.0;
    let mut state = HiddenState::zeros(net.config());
    let mut pos = 0;
    while pos < n {
        let end = (pos + max_len).min(n);
        state = net.run(&frames[pos..end], &frames[pos + 1..=end], &state, |_, nll, _| total += nll)?;
        pos = end;
    }
    Ok((total, n))
}

pub fn evaluate(params: &ParamSet, config: &ModelConfig, sequences: &[Vec<Frame>], max_len: usize) -> Result<MetricReport> {
    evaluate_with(params, config, sequences, max_len, Execution::default())
}

/// Sequences are scored independently (in parallel when enabled) and
/// their totals summed in sequence order.
pub fn evaluate_with(
    params: &ParamSet,
    config: &ModelConfig,
    sequences: &[Vec<Frame>],
    max_len: usize,
    exec: Execution,
) -> Result<MetricReport> {
    if max_len == 0 {
        return Err(Error::config("chunk length must be at least 1"));
    }
    let net = Network::new(config, params)?;
    let parts = par::map(exec, sequences, |seq| score_sequence(&net, seq, max_len));
    let mut total = 0.0;
    let mut steps = 0;
    for part in parts {
        let (t, s) = part?;
        total += t;
        steps += s;
    }
    MetricReport::from_total(total, steps)
}
