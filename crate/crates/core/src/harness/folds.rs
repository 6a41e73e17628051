//! Train/eval fold plans: seeded half-splits, each used in both directions.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldRun {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub runs: Vec<FoldRun>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldOptions {
    pub splits: usize,
    pub train_fraction: f64,
    pub stratify: bool,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self {
            splits: 2,
            train_fraction: 0.5,
            stratify: false,
        }
    }
}

/// Two seeded half-splits, each in both directions: four runs.
pub fn make_folds(task_ids: &[String], seed: u64) -> Result<FoldPlan> {
    let tasks: Vec<(String, Option<String>)> =
        task_ids.iter().map(|id| (id.clone(), None)).collect();
    plan(&tasks, seed, FoldOptions::default())
}

/// Folds over `tasks`; with `stratify` each task type is split on its own.
pub fn make_folds_for(tasks: &[Task], seed: u64, options: FoldOptions) -> Result<FoldPlan> {
    let tasks: Vec<(String, Option<String>)> = tasks
        .iter()
        .map(|t| (t.id.clone(), t.task_type.clone()))
        .collect();
    plan(&tasks, seed, options)
}

fn plan(tasks: &[(String, Option<String>)], seed: u64, options: FoldOptions) -> Result<FoldPlan> {
    let n = tasks.len();
    if n < 2 {
        return Err(Error::usage(format!(
            "folds need at least 2 tasks, got {n}"
        )));
    }
    if options.splits == 0 || !(options.train_fraction > 0.0 && options.train_fraction < 1.0) {
        return Err(Error::Config(
            "folds need at least one split and a train fraction in (0, 1)".into(),
        ));
    }
    let unique: BTreeSet<&str> = tasks.iter().map(|t| t.0.as_str()).collect();
    if unique.len() != n {
        return Err(Error::usage("duplicate task ids in fold input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(options.splits * 2);
    for _ in 0..options.splits {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        if options.stratify {
            // Group by type, keeping shuffled order within each group.
            let mut groups: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
            for i in order {
                groups.entry(tasks[i].1.as_deref()).or_default().push(i);
            }
            order = groups.into_values().flatten().collect();
        }
        // Position j joins the first part when ceil((j+1)f) > ceil(jf); the first
        // part ends up with ceil(nf) members, spread evenly along the order.
        let f = options.train_fraction;
        let mut in_first = vec![false; n];
        for (j, &i) in order.iter().enumerate() {
            in_first[i] = ((j + 1) as f64 * f).ceil() > (j as f64 * f).ceil();
        }
        let first: Vec<String> = (0..n)
            .filter(|&i| in_first[i])
            .map(|i| tasks[i].0.clone())
            .collect();
        let second: Vec<String> = (0..n)
            .filter(|&i| !in_first[i])
            .map(|i| tasks[i].0.clone())
            .collect();
        if first.is_empty() || second.is_empty() {
            return Err(Error::Config(format!(
                "train fraction {f} leaves one side of a {n}-task split empty"
            )));
        }
        runs.push(FoldRun {
            train: first.clone(),
            eval: second.clone(),
        });
        runs.push(FoldRun {
            train: second,
            eval: first,
        });
    }
    Ok(FoldPlan { runs })
}

impl FoldPlan {
    /// A single run with given halves.
    pub fn fixed(all: &[String], train: Vec<String>, eval: Vec<String>) -> Result<Self> {
        let plan = FoldPlan {
            runs: vec![FoldRun { train, eval }],
        };
        plan.check(all)?;
        Ok(plan)
    }

    /// Every run partitions `all` into non-empty, disjoint train and eval sets.
    pub fn check(&self, all: &[String]) -> Result<()> {
        let universe: HashMap<&str, ()> = all.iter().map(|s| (s.as_str(), ())).collect();
        for (i, run) in self.runs.iter().enumerate() {
            let train: BTreeSet<&str> = run.train.iter().map(String::as_str).collect();
            let eval: BTreeSet<&str> = run.eval.iter().map(String::as_str).collect();
            let bad = |what: &str| Err(Error::Config(format!("fold run {i}: {what}")));
            if train.len() != run.train.len() || eval.len() != run.eval.len() {
                return bad("duplicate task ids");
            }
            if train.is_empty() || eval.is_empty() {
                return bad("empty train or eval set");
            }
            if let Some(id) = train.intersection(&eval).next() {
                return bad(&format!("task `{id}` is in both train and eval"));
            }
            if let Some(id) = train.union(&eval).find(|id| !universe.contains_key(*id)) {
                return bad(&format!("unknown task `{id}`"));
            }
            if train.len() + eval.len() != universe.len() {
                return bad("train and eval do not cover every task");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i:02}")).collect()
    }

    #[test]
    fn eight_tasks_give_four_even_runs() {
        let plan = make_folds(&ids(8), 1).unwrap();
        assert_eq!(plan.runs.len(), 4);
        assert!(plan
            .runs
            .iter()
            .all(|r| r.train.len() == 4 && r.eval.len() == 4));
        assert_eq!(plan.runs[0].train, plan.runs[1].eval);
        plan.check(&ids(8)).unwrap();
    }

    #[test]
    fn odd_counts_and_errors() {
        let plan = make_folds(&ids(9), 3).unwrap();
        assert_eq!((plan.runs[0].train.len(), plan.runs[0].eval.len()), (5, 4));
        assert!(make_folds(&ids(1), 0).is_err());
        assert!(make_folds(&["a".into(), "a".into()], 0).is_err());
    }

    #[test]
    fn stratified_splits_halve_each_type() {
        let tasks: Vec<Task> = (0..12)
            .map(|i| {
                Task::new(format!("t{i}"), "household", "x")
                    .with_type(["put", "heat", "cool"][i % 3])
            })
            .collect();
        let opts = FoldOptions {
            stratify: true,
            ..Default::default()
        };
        let plan = make_folds_for(&tasks, 5, opts).unwrap();
        for run in &plan.runs {
            for ty in ["put", "heat", "cool"] {
                let count = run
                    .train
                    .iter()
                    .filter(|id| {
                        tasks
                            .iter()
                            .any(|t| &t.id == *id && t.task_type.as_deref() == Some(ty))
                    })
                    .count();
                assert_eq!(count, 2, "{ty}");
            }
        }
    }

    #[test]
    fn fixed_plans_are_checked() {
        let all = ids(4);
        assert!(FoldPlan::fixed(&all, all[..2].to_vec(), all[2..].to_vec()).is_ok());
        assert!(FoldPlan::fixed(&all, all[..3].to_vec(), all[2..].to_vec()).is_err());
        assert!(FoldPlan::fixed(&all, all[..1].to_vec(), all[2..].to_vec()).is_err());
    }

    proptest! {
        #[test]
        fn plans_partition_and_repeat(n in 2usize..40, seed: u64, splits in 1usize..4, stratify: bool) {
            let all = ids(n);
            let tasks: Vec<Task> = all.iter().enumerate()
                .map(|(i, id)| Task::new(id.clone(), "toyqa", "q").with_type(if i % 3 == 0 { "a" } else { "b" }))
                .collect();
            let opts = FoldOptions { splits, train_fraction: 0.5, stratify };
            let plan = make_folds_for(&tasks, seed, opts).unwrap();
            prop_assert_eq!(plan.runs.len(), 2 * splits);
            prop_assert!(plan.check(&all).is_ok());
            prop_assert_eq!(plan.runs[0].train.len(), n.div_ceil(2));
            prop_assert_eq!(&plan, &make_folds_for(&tasks, seed, opts).unwrap());
        }
    }
}
