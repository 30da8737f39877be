use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{max_batch, MemoryInputs, MethodKind};
use crate::error::{Error, Result};

/// Wall-clock seconds spent in each phase of one PPO iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub inference: f64,
    pub update: f64,
}

/// Something that can run one PPO iteration at a given shape.
pub trait LatencyTarget {
    fn method(&self) -> MethodKind;
    fn run(&mut self, seq_len: usize, batch: usize) -> Result<PhaseTimes>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyPlan {
    pub seq_lens: Vec<usize>,
    pub budget_bytes: f64,
    /// Samples per optimizer step, reached by accumulation when the
    /// budgeted batch is smaller.
    pub effective_batch: usize,
    pub warmup: usize,
    pub iterations: usize,
    /// Shape of the model the budget is checked against (batch and seq_len
    /// are filled in per measurement).
    pub memory: MemoryInputs,
}

impl LatencyPlan {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 20 || self.warmup < 3 {
            return Err(Error::InvalidArgument(
                "latency needs >= 3 warmup and >= 20 timed iterations".into(),
            ));
        }
        if self.effective_batch == 0 || self.seq_lens.is_empty() {
            return Err(Error::InvalidArgument(
                "latency needs an effective batch and sequence lengths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub method: MethodKind,
    pub seq_len: usize,
    /// Budgeted micro-batch; 0 when batch 1 does not fit.
    pub batch: usize,
    pub accumulation: usize,
    pub feasible: bool,
    pub inference_s_per_sample: f64,
    pub update_s_per_sample: f64,
    pub total_s_per_sample: f64,
}

/// Times every target at every sequence length. Each target's micro-batch is
/// the largest that fits the budget; micro-batches are repeated so every
/// method processes the same effective batch per iteration. Targets run
/// round-robin within an iteration, in alternating order, so slow drift in
/// machine load falls on all of them alike.
pub fn measure_latency(
    targets: &mut [&mut dyn LatencyTarget],
    plan: &LatencyPlan,
) -> Result<Vec<LatencyRecord>> {
    plan.validate()?;
    let mut out = Vec::new();
    for &seq_len in &plan.seq_lens {
        let inputs = MemoryInputs {
            seq_len,
            ..plan.memory
        };
        let batches: Vec<usize> = targets
            .iter()
            .map(|t| max_batch(t.method(), &inputs, plan.budget_bytes, plan.effective_batch))
            .collect();
        let mut sums = vec![PhaseTimes::default(); targets.len()];
        let mut order: Vec<usize> = (0..targets.len()).filter(|&i| batches[i] > 0).collect();
        for it in 0..plan.warmup + plan.iterations {
            for &i in &order {
                let batch = batches[i];
                for _ in 0..plan.effective_batch.div_ceil(batch) {
                    let p = targets[i].run(seq_len, batch)?;
                    if it >= plan.warmup {
                        sums[i].inference += p.inference;
                        sums[i].update += p.update;
                    }
                }
            }
            order.reverse();
        }
        for (i, t) in targets.iter().enumerate() {
            let (method, batch) = (t.method(), batches[i]);
            if batch == 0 {
                out.push(LatencyRecord {
                    method,
                    seq_len,
                    batch: 0,
                    accumulation: 0,
                    feasible: false,
                    inference_s_per_sample: f64::NAN,
                    update_s_per_sample: f64::NAN,
                    total_s_per_sample: f64::NAN,
                });
                continue;
            }
            let accumulation = plan.effective_batch.div_ceil(batch);
            let samples = (batch * accumulation) as f64;
            let n = plan.iterations as f64;
            let inference = sums[i].inference / n / samples;
            let update = sums[i].update / n / samples;
            out.push(LatencyRecord {
                method,
                seq_len,
                batch,
                accumulation,
                feasible: true,
                inference_s_per_sample: inference,
                update_s_per_sample: update,
                total_s_per_sample: inference + update,
            });
        }
    }
    Ok(out)
}

/// Times `f` in seconds.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}

/// `method,seq_len,batch,inference,update,total`; infeasible rows carry
/// empty timing cells.
pub fn latency_csv(records: &[LatencyRecord]) -> String {
    let mut s = String::from("method,seq_len,batch,inference,update,total\n");
    for r in records {
        if r.feasible {
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e}\n",
                r.method,
                r.seq_len,
                r.batch,
                r.inference_s_per_sample,
                r.update_s_per_sample,
                r.total_s_per_sample
            ));
        } else {
            s.push_str(&format!("{},{},infeasible,,,\n", r.method, r.seq_len));
        }
    }
    s
}
