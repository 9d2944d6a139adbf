use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::seed;

/// A seeded class permutation cut into equal, disjoint tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub seed: u64,
    pub class_order: Vec<usize>,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn build(num_classes: usize, num_tasks: usize, seed: u64) -> Result<Self> {
        if num_tasks == 0 || num_classes == 0 {
            return Err(config(format!(
                "need at least one class and one task (num_classes={num_classes}, num_tasks={num_tasks})"
            )));
        }
        if !num_classes.is_multiple_of(num_tasks) {
            return Err(config(format!(
                "num_classes={num_classes} is not divisible by num_tasks={num_tasks}"
            )));
        }
        let mut class_order: Vec<usize> = (0..num_classes).collect();
        class_order.shuffle(&mut seed::derived_rng(seed, "class-order", &[]));
        let per = num_classes / num_tasks;
        let tasks = class_order.chunks(per).map(<[usize]>::to_vec).collect();
        Ok(Self {
            seed,
            class_order,
            tasks,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Classes of task `n` (0-based).
    pub fn task(&self, n: usize) -> Result<&[usize]> {
        self.tasks
            .get(n)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("task {n} outside [0, {})", self.tasks.len())))
    }

    /// Union of tasks `0..=n`, in schedule order.
    pub fn cumulative(&self, n: usize) -> Result<Vec<usize>> {
        self.task(n)?;
        Ok(self.tasks[..=n].concat())
    }

    /// Union of tasks `0..n` (empty for `n = 0`).
    pub fn past(&self, n: usize) -> Vec<usize> {
        self.tasks[..n.min(self.tasks.len())].concat()
    }

    /// Task index owning `class`.
    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class))
    }
}
