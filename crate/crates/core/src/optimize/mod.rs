//! Policy optimization for the toy researcher: group-normalized advantages,
//! the clipped surrogate objective with exact KL regularization, the
//! rejection-sampling harvest, and supervised losses for both toy agents.

mod grpo;
mod policy;
mod rft;

pub use grpo::{
    group_advantages, grpo_objective, grpo_step, train, GrpoEvaluation, OptimError, PreparedTask,
    RolloutGroup, StepMetrics, TrainConfig,
};
pub use policy::{ActionTemplate, ReferenceSnapshot, ToyPolicy, TEMPLATE_COUNT};
pub use rft::{
    refiner_examples, refiner_nll, refiner_sft_step, researcher_nll, researcher_sft_step,
    rft_harvest, rft_losses, AcceptAll, RefinerExample, RuleBasedVerifier, ToyRefinerScorer,
    TrajectoryVerifier,
};

use std::io::Write;

/// Columns of the per-step metrics CSV, schema v1.
pub const METRICS_CSV_HEADER: &str = "step,mean_reward,mean_sub_reward,density,kl,solve_none_rate";

/// Writes step metrics with a versioned header comment carrying the run's
/// config fingerprint, so curves can be regenerated and compared.
pub fn write_metrics_csv<W: Write>(
    mut w: W,
    metrics: &[StepMetrics],
    fingerprint: &str,
) -> std::io::Result<()> {
    writeln!(w, "# searchrl-metrics v1 fingerprint={fingerprint}")?;
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.step, m.mean_reward, m.mean_sub_reward, m.density, m.kl, m.solve_none_rate
        )?;
    }
    Ok(())
}

/// Reads back a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(content: &str) -> Vec<StepMetrics> {
    content
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("step,") && !l.trim().is_empty())
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return None;
            }
            Some(StepMetrics {
                step: f[0].parse().ok()?,
                mean_reward: f[1].parse().ok()?,
                mean_sub_reward: f[2].parse().ok()?,
                density: f[3].parse().ok()?,
                kl: f[4].parse().ok()?,
                solve_none_rate: f[5].parse().ok()?,
            })
        })
        .collect()
}
