use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::datagen::QuestionInstance;
use crate::error::{ApeError, Result};
use crate::numerics::Rng;
use crate::scheduler::{run_episode, BudgetConfig, Policy, ProbTable, ScheduleTrace, SchedulerParams};

use super::metrics::{answer_recall_at_k, RetainedSet};

pub const EVAL_HEADER: &str = "policy,k,B,recall_at_k,mean_layers,mean_layers_relevant,wall_ms,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub policy: String,
    pub k: usize,
    pub budget: usize,
    pub recall_at_k: f64,
    pub mean_layers: f64,
    pub mean_layers_relevant: f64,
    pub wall_ms: u128,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.policy, r.k, r.budget, r.recall_at_k, r.mean_layers, r.mean_layers_relevant, r.wall_ms, r.seed
            );
        }
        s
    }

    pub fn find(&self, policy: &str, k: usize, budget: usize) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.k == k && r.budget == budget)
    }
}

/// A named policy with the parameters it scores passages with.
#[derive(Clone, Debug)]
pub struct PolicyEntry<'a> {
    pub name: String,
    pub policy: Policy,
    pub params: &'a SchedulerParams,
}

/// Traces of one evaluated configuration, in dataset order.
#[derive(Clone, Debug)]
pub struct EvalRun {
    pub row: EvalRow,
    pub traces: Vec<ScheduleTrace>,
}

/// Layer totals recomputed from traces: `(mean layers per passage, mean
/// layers per relevant passage)`.
pub fn layer_stats(dataset: &[QuestionInstance], traces: &[ScheduleTrace]) -> (f64, f64) {
    let mut passages = 0usize;
    let mut layers = 0usize;
    let mut relevant = 0usize;
    let mut relevant_layers = 0usize;
    for (q, t) in dataset.iter().zip(traces) {
        let mut per = vec![0usize; q.num_passages()];
        for s in &t.steps {
            per[s.rank] += 1;
        }
        passages += per.len();
        layers += per.iter().sum::<usize>();
        for (p, l) in q.passages.iter().zip(&per) {
            if p.has_answer {
                relevant += 1;
                relevant_layers += l;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(layers, passages), ratio(relevant_layers, relevant))
}

pub fn recall_from_traces(dataset: &[QuestionInstance], traces: &[ScheduleTrace], k: usize) -> Result<f64> {
    let retained: Vec<RetainedSet> = dataset
        .iter()
        .zip(traces)
        .map(|(q, t)| RetainedSet {
            question_id: q.id.clone(),
            ranks: t.retained.clone(),
        })
        .collect();
    answer_recall_at_k(dataset, &retained, k)
}

/// Evaluates one `(policy, k, B)` cell on precomputed probability tables.
pub fn evaluate_cell(
    dataset: &[QuestionInstance],
    tables: &[ProbTable],
    entry: &PolicyEntry<'_>,
    k: usize,
    budget: usize,
    seed: u64,
    timing: bool,
) -> Result<EvalRun> {
    if dataset.len() != tables.len() {
        return Err(ApeError::Argument(format!(
            "{} questions but {} probability tables",
            dataset.len(),
            tables.len()
        )));
    }
    let cfg = BudgetConfig {
        budget,
        k,
        policy: entry.policy,
        step_cost: 0.1,
    };
    let start = Instant::now();
    let traces = dataset
        .par_iter()
        .zip(tables)
        .enumerate()
        .map(|(i, (q, t))| {
            let mut t = t.clone();
            t.reset();
            let mut rng = Rng::derive(seed, i as u64);
            run_episode(&mut t, &q.labels(), entry.params, &cfg, &mut rng).map(|r| r.trace)
        })
        .collect::<Result<Vec<_>>>()?;
    let wall_ms = if timing { start.elapsed().as_millis() } else { 0 };
    let recall_at_k = recall_from_traces(dataset, &traces, k)?;
    let (mean_layers, mean_layers_relevant) = layer_stats(dataset, &traces);
    Ok(EvalRun {
        row: EvalRow {
            policy: entry.name.clone(),
            k,
            budget,
            recall_at_k,
            mean_layers,
            mean_layers_relevant,
            wall_ms,
            seed,
        },
        traces,
    })
}

/// `B = round(m * L * k)` for each multiplier `m`.
pub fn budgets_for(num_layers: usize, k: usize, multipliers: &[f64]) -> Vec<usize> {
    multipliers
        .iter()
        .map(|m| (m * (num_layers * k) as f64).round() as usize)
        .collect()
}

/// Runs every policy over every `(k, B)` combination.
#[allow(clippy::too_many_arguments)]
pub fn run_eval(
    dataset: &[QuestionInstance],
    tables: &[ProbTable],
    policies: &[PolicyEntry<'_>],
    ks: &[usize],
    budget_multipliers: &[f64],
    num_layers: usize,
    seed: u64,
    timing: bool,
) -> Result<(EvalReport, Vec<EvalRun>)> {
    let mut report = EvalReport::default();
    let mut runs = Vec::new();
    for &k in ks {
        for budget in budgets_for(num_layers, k, budget_multipliers) {
            for entry in policies {
                let run = evaluate_cell(dataset, tables, entry, k, budget, seed, timing)?;
                report.rows.push(run.row.clone());
                runs.push(run);
            }
        }
    }
    Ok((report, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Passage;

    fn instance(id: &str, labels: &[bool]) -> QuestionInstance {
        QuestionInstance {
            id: id.to_string(),
            question: vec![1, 8],
            passages: labels
                .iter()
                .enumerate()
                .map(|(rank, &has_answer)| Passage {
                    rank,
                    tokens: vec![64],
                    has_answer,
                })
                .collect(),
        }
    }

    #[test]
    fn static_topk_full_budget_saturates() {
        let data = vec![instance("q0", &[false, false, true]), instance("q1", &[false, false, false])];
        let tables: Vec<ProbTable> = (0..2)
            .map(|_| ProbTable::from_probs(vec![vec![0.5, 0.4], vec![0.3, 0.2], vec![0.1, 0.9]]))
            .collect();
        let params = SchedulerParams::zeros(3, 1, 4, 2);
        let entry = PolicyEntry {
            name: "static_topk".into(),
            policy: Policy::StaticTopK,
            params: &params,
        };
        let run = evaluate_cell(&data, &tables, &entry, 3, 3, 0, false).unwrap();
        assert_eq!(run.row.recall_at_k, 0.5);
        assert_eq!(run.row.mean_layers, 1.0);
        assert_eq!(run.row.mean_layers_relevant, 1.0);
        assert_eq!(run.row.wall_ms, 0);

        let run = evaluate_cell(&data, &tables, &entry, 1, 1, 0, false).unwrap();
        assert_eq!(run.traces[0].retained, vec![0]);
        assert_eq!(run.row.recall_at_k, 0.0);
    }

    #[test]
    fn budgets_round() {
        assert_eq!(budgets_for(6, 3, &[0.5, 1.0, 2.0]), vec![9, 18, 36]);
        assert_eq!(budgets_for(6, 1, &[0.25]), vec![2]);
    }

    #[test]
    fn csv_layout() {
        let report = EvalReport {
            rows: vec![EvalRow {
                policy: "round_robin".into(),
                k: 3,
                budget: 18,
                recall_at_k: 0.75,
                mean_layers: 0.9,
                mean_layers_relevant: 1.5,
                wall_ms: 0,
                seed: 2,
            }],
        };
        assert_eq!(
            report.to_csv(),
            format!("{EVAL_HEADER}\nround_robin,3,18,0.75,0.9,1.5,0,2\n")
        );
        assert!(report.find("round_robin", 3, 18).is_some());
        assert!(report.find("round_robin", 2, 18).is_none());
    }
}
