//! Return-to-go, chains of experience and the token layouts fed to the
//! decoders.
//!
//! Layouts per step (or per decision):
//!
//! | stream          | tokens                  |
//! |-----------------|-------------------------|
//! | high level      | `R̂, o, z, r̂, d` every `c` steps |
//! | low level       | `z, o, a, r`            |
//! | reviewing       | `o, a`                  |
//! | flat AD         | `o, a, r, d`            |
//! | flat AT         | `R̂, o, a, r, d`         |

use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::env::Pos;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `R̂_t = target - sum_{j<t} r_j`.
pub fn compute_rtg<T: Scalar>(rewards: &[T], target: T) -> Vec<T> {
    let mut out = Vec::with_capacity(rewards.len());
    let mut remaining = target;
    for &r in rewards {
        out.push(remaining);
        remaining -= r;
    }
    out
}

/// Episodes in ascending return order sharing the best return as target.
#[derive(Clone, Debug)]
pub struct ChainOfExperience<'a> {
    pub episodes: Vec<&'a Trajectory>,
    pub target: f64,
    pub rtg: Vec<Vec<f64>>,
}

impl<'a> ChainOfExperience<'a> {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Chain in the given order with an explicit target.
    pub fn in_order(episodes: Vec<&'a Trajectory>, target: f64) -> Self {
        let rtg = episodes
            .iter()
            .map(|e| {
                let r: Vec<f64> = e.rewards.iter().map(|&v| f64::from(v)).collect();
                compute_rtg(&r, target)
            })
            .collect();
        Self { episodes, target, rtg }
    }
}

/// Stable ascending sort by return; the target is the largest return.
pub fn sort_ascending<'a>(episodes: &[&'a Trajectory]) -> Result<ChainOfExperience<'a>> {
    if episodes.is_empty() {
        return Err(Error::MalformedSequence("chain needs at least one episode".into()));
    }
    let mut sorted = episodes.to_vec();
    sorted.sort_by(|a, b| a.total_return.total_cmp(&b.total_return));
    let target = f64::from(sorted.last().expect("non-empty").total_return);
    Ok(ChainOfExperience::in_order(sorted, target))
}

/// Number of `c`-step segments covering `t` steps.
pub fn n_segments(t: usize, c: usize) -> usize {
    t.div_ceil(c)
}

/// Summary of one `c`-step segment as seen by the high-level stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighLevelStep {
    pub start: usize,
    pub len: usize,
    pub rtg: f64,
    pub obs: Pos,
    pub reward_sum: f64,
    pub done: bool,
}

/// Segment summaries for one episode given its return-to-go vector.
pub fn high_level_steps(traj: &Trajectory, rtg: &[f64], c: usize) -> Vec<HighLevelStep> {
    let t = traj.len();
    (0..n_segments(t, c))
        .map(|j| {
            let start = j * c;
            let end = (start + c).min(t);
            HighLevelStep {
                start,
                len: end - start,
                rtg: rtg[start],
                obs: traj.observation(start),
                reward_sum: traj.rewards[start..end].iter().map(|&r| f64::from(r)).sum(),
                done: traj.dones[end - 1],
            }
        })
        .collect()
}

/// One token of any layout, used for inspection and counting.
#[derive(Clone, Debug, PartialEq)]
pub enum Token<Z> {
    Rtg(f64),
    Obs(Pos),
    Decision(Z),
    RewardSum(f64),
    Done(bool),
    Action(usize),
    Reward(f64),
}

#[derive(Clone, Debug)]
pub struct HighLevelSequence<Z> {
    /// Per episode, per decision.
    pub steps: Vec<Vec<HighLevelStep>>,
    pub z: Vec<Vec<Z>>,
}

impl<Z: Clone> HighLevelSequence<Z> {
    pub fn n_decisions(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn n_tokens(&self) -> usize {
        5 * self.n_decisions()
    }

    pub fn tokens(&self) -> Vec<Token<Z>> {
        let mut out = Vec::with_capacity(self.n_tokens());
        for (steps, zs) in self.steps.iter().zip(&self.z) {
            for (s, z) in steps.iter().zip(zs) {
                out.extend([
                    Token::Rtg(s.rtg),
                    Token::Obs(s.obs),
                    Token::Decision(z.clone()),
                    Token::RewardSum(s.reward_sum),
                    Token::Done(s.done),
                ]);
            }
        }
        out
    }
}

/// High-level stream over a chain. `z_for(episode, decision)` supplies every
/// z slot.
pub fn build_high_level_sequence<Z>(
    chain: &ChainOfExperience<'_>,
    c: usize,
    mut z_for: impl FnMut(usize, usize) -> Option<Z>,
) -> Result<HighLevelSequence<Z>> {
    if c == 0 {
        return Err(Error::InvalidConfig("c must be positive".into()));
    }
    let mut steps = Vec::with_capacity(chain.len());
    let mut z = Vec::with_capacity(chain.len());
    for (e, (traj, rtg)) in chain.episodes.iter().zip(&chain.rtg).enumerate() {
        let hs = high_level_steps(traj, rtg, c);
        let zs = (0..hs.len())
            .map(|j| z_for(e, j).ok_or(Error::MissingDecision { episode: e, step: j * c }))
            .collect::<Result<Vec<_>>>()?;
        steps.push(hs);
        z.push(zs);
    }
    Ok(HighLevelSequence { steps, z })
}

/// Steps `[start, start + len)` of one episode executed under a single
/// decision.
#[derive(Clone, Debug, PartialEq)]
pub struct LowLevelWindow<Z> {
    pub start: usize,
    pub z: Z,
    pub obs: Vec<Pos>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl<Z: Clone> LowLevelWindow<Z> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        4 * self.len()
    }

    /// `z, o, a, r` per step with the decision repeated.
    pub fn tokens(&self) -> Vec<Token<Z>> {
        let mut out = Vec::with_capacity(self.n_tokens());
        for i in 0..self.len() {
            out.extend([
                Token::Decision(self.z.clone()),
                Token::Obs(self.obs[i]),
                Token::Action(self.actions[i]),
                Token::Reward(self.rewards[i]),
            ]);
        }
        out
    }
}

/// Windows starting at `0, c, 2c, ...`; the last one is short when `c` does
/// not divide the episode length.
pub fn build_low_level_windows<Z>(traj: &Trajectory, c: usize, mut z_for: impl FnMut(usize) -> Z) -> Result<Vec<LowLevelWindow<Z>>> {
    if c == 0 {
        return Err(Error::InvalidConfig("c must be positive".into()));
    }
    if traj.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let t = traj.len();
    Ok((0..n_segments(t, c))
        .map(|j| {
            let start = j * c;
            let end = (start + c).min(t);
            LowLevelWindow {
                start,
                z: z_for(j),
                obs: (start..end).map(|i| traj.observation(i)).collect(),
                actions: traj.actions[start..end].iter().map(|&a| usize::from(a)).collect(),
                rewards: traj.rewards[start..end].iter().map(|&r| f64::from(r)).collect(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMethod {
    IdtHigh,
    IdtLow,
    IdtReview,
    AdFlat,
    AtFlat,
}

/// Tokens in one context of the given layout.
pub fn token_count(method: TokenMethod, n: usize, t: usize, c: usize) -> usize {
    match method {
        TokenMethod::IdtHigh => 5 * n * n_segments(t, c.max(1)),
        TokenMethod::IdtLow => 4 * c,
        TokenMethod::IdtReview => 2 * c,
        TokenMethod::AdFlat => 4 * n * t,
        TokenMethod::AtFlat => 5 * n * t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(task_id: usize, rewards: &[f32]) -> Trajectory {
        let t = rewards.len();
        Trajectory {
            task_id,
            observations: (0..t).map(|i| [i as u16, 0]).collect(),
            actions: (0..t).map(|i| (i % 5) as u16).collect(),
            rewards: rewards.to_vec(),
            dones: (0..t).map(|i| i + 1 == t).collect(),
            total_return: rewards.iter().sum(),
        }
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 0.0, 1.0], 20.0), vec![20.0, 19.0, 19.0]);
        assert_eq!(compute_rtg(&[0.0f32; 4], 3.5), vec![3.5; 4]);
        let r = [0.0, 1.0, 1.0, 1.0];
        let rtg = compute_rtg(&r, 3.0f64);
        assert_eq!(rtg[3], r[3]);
    }

    #[test]
    fn sort_examples() {
        let a = traj(0, &[5.0]);
        let b = traj(1, &[2.0]);
        let c = traj(2, &[9.0]);
        let chain = sort_ascending(&[&a, &b, &c]).unwrap();
        let returns: Vec<f32> = chain.episodes.iter().map(|e| e.total_return).collect();
        assert_eq!(returns, vec![2.0, 5.0, 9.0]);
        assert_eq!(chain.target, 9.0);
        assert!(chain.rtg.iter().all(|r| r[0] == 9.0));

        let x = traj(0, &[1.0, 0.0]);
        let y = traj(1, &[0.0, 1.0]);
        let z = traj(2, &[1.0, 0.0]);
        let chain = sort_ascending(&[&x, &y, &z]).unwrap();
        let ids: Vec<usize> = chain.episodes.iter().map(|e| e.task_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);

        let single = sort_ascending(&[&a]).unwrap();
        assert_eq!((single.len(), single.target), (1, 5.0));
        assert!(sort_ascending(&[]).is_err());
    }

    #[test]
    fn high_level_token_counts() {
        let eps: Vec<Trajectory> = (0..4).map(|i| traj(i, &[0.0; 20])).collect();
        let refs: Vec<&Trajectory> = eps.iter().collect();
        let chain = sort_ascending(&refs).unwrap();
        let seq = build_high_level_sequence(&chain, 5, |_, _| Some(0u8)).unwrap();
        assert_eq!(seq.n_decisions(), 16);
        assert_eq!(seq.tokens().len(), 80);
        let whole = build_high_level_sequence(&chain, 20, |_, _| Some(0u8)).unwrap();
        assert_eq!(whole.tokens().len(), 20);

        let large: Vec<Trajectory> = (0..4).map(|i| traj(i, &[0.0; 200])).collect();
        let refs: Vec<&Trajectory> = large.iter().collect();
        let chain = sort_ascending(&refs).unwrap();
        let seq = build_high_level_sequence(&chain, 10, |_, _| Some(())).unwrap();
        assert_eq!(seq.n_tokens(), 400);
        assert_eq!(token_count(TokenMethod::IdtHigh, 4, 200, 10), 400);
    }

    #[test]
    fn high_level_interleaving_and_reward_sums() {
        let e = traj(0, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let chain = sort_ascending(&[&e]).unwrap();
        let seq = build_high_level_sequence(&chain, 3, |_, j| Some(j)).unwrap();
        let toks = seq.tokens();
        assert_eq!(
            toks[..5],
            [Token::Rtg(3.0), Token::Obs((0, 0)), Token::Decision(0), Token::RewardSum(2.0), Token::Done(false)]
        );
        assert_eq!(toks[5..10], [Token::Rtg(1.0), Token::Obs((3, 0)), Token::Decision(1), Token::RewardSum(1.0), Token::Done(false)]);
        assert_eq!(toks[14], Token::Done(true));
        let total: f64 = seq.steps[0].iter().map(|s| s.reward_sum).sum();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn missing_decision_is_reported() {
        let e = traj(0, &[0.0; 10]);
        let chain = sort_ascending(&[&e]).unwrap();
        let err = build_high_level_sequence(&chain, 5, |_, j| (j == 0).then_some(1.0)).unwrap_err();
        assert!(matches!(err, Error::MissingDecision { episode: 0, step: 5 }));
    }

    #[test]
    fn low_level_windows() {
        let e = traj(0, &[0.0; 20]);
        let w = build_low_level_windows(&e, 5, |j| j).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|w| w.len() == 5 && w.tokens().len() == 20));
        assert_eq!(token_count(TokenMethod::IdtLow, 10, 20, 5), 20);

        let short = traj(0, &[0.0; 7]);
        let w = build_low_level_windows(&short, 5, |j| j).unwrap();
        assert_eq!(w.iter().map(LowLevelWindow::len).collect::<Vec<_>>(), vec![5, 2]);
        assert_eq!(w[1].start, 5);

        let zs: Vec<Token<usize>> = w[0].tokens().into_iter().filter(|t| matches!(t, Token::Decision(_))).collect();
        assert!(zs.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn flat_token_counts() {
        assert_eq!(token_count(TokenMethod::AdFlat, 4, 200, 10), 3200);
        assert_eq!(token_count(TokenMethod::AtFlat, 4, 1000, 10), 20_000);
        assert_eq!(token_count(TokenMethod::AdFlat, 4, 20, 5), 320);
        assert_eq!(token_count(TokenMethod::IdtHigh, 4, 200, 1), token_count(TokenMethod::AtFlat, 4, 200, 1));
        assert_eq!(token_count(TokenMethod::IdtReview, 1, 20, 5), 10);
    }
}
