use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rollout::EvalConfig;
use super::tokens::Method;
use crate::error::{Error, Result};

/// Outcome of one multi-episode rollout on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub task_id: usize,
    pub seed: u64,
    pub context_episodes: usize,
    pub decision_interval: usize,
    pub episode_len: usize,
    pub returns: Vec<f64>,
    pub best_return: f64,
    pub wall_ms: Vec<f64>,
    pub tokens_processed: Vec<u64>,
    pub max_context_tokens: Vec<usize>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn new(method: Method, task_id: usize, config: &EvalConfig, n: usize, c: usize, episode_len: usize) -> Self {
        Self {
            method,
            task_id,
            seed: config.seed,
            context_episodes: n,
            decision_interval: c,
            episode_len,
            returns: Vec::new(),
            best_return: f64::NEG_INFINITY,
            wall_ms: Vec::new(),
            tokens_processed: Vec::new(),
            max_context_tokens: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn push(&mut self, ret: f64, wall_ms: f64, tokens: u64, max_context: usize) {
        self.returns.push(ret);
        self.best_return = self.best_return.max(ret);
        self.wall_ms.push(wall_ms);
        self.tokens_processed.push(tokens);
        self.max_context_tokens.push(max_context);
    }

    pub fn mean_return(&self) -> f64 {
        mean(&self.returns)
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens_processed.iter().sum()
    }

    pub fn max_context(&self) -> usize {
        self.max_context_tokens.iter().copied().max().unwrap_or(0)
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.wall_ms.iter().sum()
    }

    pub fn lines(&self) -> impl Iterator<Item = EpisodeLine> + '_ {
        (0..self.returns.len()).map(move |i| EpisodeLine {
            method: self.method,
            task_id: self.task_id,
            seed: self.seed,
            episode: i + 1,
            episode_return: self.returns[i],
            wall_ms: self.wall_ms[i],
            tokens_processed: self.tokens_processed[i],
            max_context_tokens: self.max_context_tokens[i],
            config_hash: None,
        })
    }
}

/// One JSON Lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeLine {
    pub method: Method,
    pub task_id: usize,
    pub seed: u64,
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub wall_ms: f64,
    pub tokens_processed: u64,
    pub max_context_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard error of the mean; zero for fewer than two values.
pub fn std_error(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    (var / x.len() as f64).sqrt()
}

/// Aggregate over reports of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: Method,
    pub n_rollouts: usize,
    pub tasks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub mean_return_by_episode: Vec<f64>,
    pub std_error_by_episode: Vec<f64>,
    pub mean_return: f64,
    pub mean_best_return: f64,
    pub tokens_processed: u64,
    pub max_context_tokens: usize,
    pub mean_episode_wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalSummary {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::InvalidConfig("no reports to summarize".into()))?;
        let episodes = first.returns.len();
        if reports.iter().any(|r| r.returns.len() != episodes || r.method != first.method) {
            return Err(Error::InvalidConfig("reports differ in method or episode count".into()));
        }
        let by_ep = |i: usize| reports.iter().map(|r| r.returns[i]).collect::<Vec<_>>();
        let mut tasks: Vec<usize> = reports.iter().map(|r| r.task_id).collect();
        tasks.sort_unstable();
        tasks.dedup();
        let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let all_ms: Vec<f64> = reports.iter().flat_map(|r| r.wall_ms.iter().copied()).collect();
        Ok(Self {
            method: first.method,
            n_rollouts: reports.len(),
            tasks,
            seeds,
            episodes,
            mean_return_by_episode: (0..episodes).map(|i| mean(&by_ep(i))).collect(),
            std_error_by_episode: (0..episodes).map(|i| std_error(&by_ep(i))).collect(),
            mean_return: mean(&reports.iter().map(EvalReport::mean_return).collect::<Vec<_>>()),
            mean_best_return: mean(&reports.iter().map(|r| r.best_return).collect::<Vec<_>>()),
            tokens_processed: reports.iter().map(EvalReport::total_tokens).sum(),
            max_context_tokens: reports.iter().map(EvalReport::max_context).max().unwrap_or(0),
            mean_episode_wall_ms: mean(&all_ms),
            config_hash: None,
        })
    }
}

/// Writes one line per episode, tagging each with `config_hash` when given.
pub fn write_jsonl(path: &Path, reports: &[EvalReport], config_hash: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        for mut line in r.lines() {
            line.config_hash = config_hash.map(str::to_owned);
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpisodeLine>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_summary(path: &Path, summary: &EvalSummary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        let mut r = EvalReport::new(Method::Idt, 3, &EvalConfig::default(), 4, 5, 20);
        for (i, ret) in [1.0, 7.0, 4.0].into_iter().enumerate() {
            r.push(ret, 2.0, 100 + i as u64, 40);
        }
        r
    }

    #[test]
    fn best_is_max_of_returns() {
        let r = report();
        assert_eq!(r.best_return, 7.0);
        assert_eq!(r.total_tokens(), 303);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval.jsonl");
        write_jsonl(&p, &[report()], Some("abc")).unwrap();
        let lines = read_jsonl(&p).unwrap();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].episode, 2);
        assert_eq!(lines[1].episode_return, 7.0);
        assert_eq!(lines[2].config_hash.as_deref(), Some("abc"));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains("\"return\":1.0"));
    }

    #[test]
    fn summary_statistics() {
        let mut a = report();
        let mut b = report();
        a.returns = vec![0.0, 2.0, 4.0];
        b.returns = vec![2.0, 4.0, 6.0];
        b.seed = 1;
        let s = EvalSummary::from_reports(&[a, b]).unwrap();
        assert_eq!(s.mean_return_by_episode, vec![1.0, 3.0, 5.0]);
        assert!((s.std_error_by_episode[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.seeds, vec![0, 1]);
        assert!(EvalSummary::from_reports(&[]).is_err());
    }
}
