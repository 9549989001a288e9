use serde::{Deserialize, Serialize};

use crate::sequence::{n_segments, token_count, TokenMethod};

/// Predicted transformer work for one evaluation setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    /// Longest single transformer context needed for one generated action.
    pub max_context: usize,
    /// Longest high-level context (IDT only).
    pub max_high: usize,
    /// Longest low-level context (IDT only).
    pub max_low: usize,
    /// Token positions processed over an episode with a full context.
    pub per_episode: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Idt,
    FlatAd,
    FlatAt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Idt => "idt",
            Method::FlatAd => "flat-ad",
            Method::FlatAt => "flat-at",
        }
    }
}

/// Token positions processed while generating episode `index` (zero
/// based) when at most `n - 1` earlier episodes stay in context.
///
/// IDT counts one high-level pass per decision, one low-level pass per
/// action and one reviewing pass per executed window. Flat layouts make one
/// pass per action.
pub fn episode_tokens(method: Method, n: usize, t: usize, c: usize, index: usize) -> u64 {
    let past = index.min(n.saturating_sub(1));
    match method {
        Method::Idt => {
            let s = n_segments(t, c);
            let mut total = 0u64;
            for j in 0..s {
                let len = c.min(t - j * c);
                total += (5 * (past * s + j + 1)) as u64;
                total += (1..=len).map(|k| 4 * k as u64).sum::<u64>();
                total += 2 * len as u64;
            }
            total
        }
        Method::FlatAd | Method::FlatAt => {
            let per = if method == Method::FlatAd { 4 } else { 5 };
            (1..=t).map(|s| (per * (past * t + s)) as u64).sum()
        }
    }
}

/// Context sizes and steady-state per-episode work.
pub fn token_accounting(method: Method, n: usize, t: usize, c: usize) -> TokenBudget {
    let per_episode = episode_tokens(method, n, t, c, n.saturating_sub(1));
    match method {
        Method::Idt => {
            let max_high = token_count(TokenMethod::IdtHigh, n, t, c);
            let max_low = token_count(TokenMethod::IdtLow, n, t, c.min(t));
            TokenBudget { max_context: max_high.max(max_low), max_high, max_low, per_episode }
        }
        Method::FlatAd => {
            let m = token_count(TokenMethod::AdFlat, n, t, c);
            TokenBudget { max_context: m, max_high: 0, max_low: 0, per_episode }
        }
        Method::FlatAt => {
            let m = token_count(TokenMethod::AtFlat, n, t, c);
            TokenBudget { max_context: m, max_high: 0, max_low: 0, per_episode }
        }
    }
}
