//! Test-time rollouts, demonstration prefill, token accounting, reports and
//! ablation drivers.

mod ablation;
mod report;
mod rollout;
mod tokens;

pub use ablation::{run_ablation, write_ablation_csv, AblationConfig, AblationKind, AblationRow, CONTEXT_SWEEP, CSV_HEADER, C_SWEEP, MIN_SEEDS};
pub use report::{mean, read_jsonl, std_error, write_jsonl, write_summary, EpisodeLine, EvalReport, EvalSummary};
pub use rollout::{prefill_context, rollout_flat_baseline, rollout_idt, rollout_idt_from, EpisodeRecord, EvalConfig, RolloutContext};
pub use tokens::{episode_tokens, token_accounting, Method, TokenBudget};
