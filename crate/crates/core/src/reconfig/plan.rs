use serde::{Deserialize, Serialize};

use crate::model::ModelSpec;

/// Assignment of parameters to reducer groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkPlan {
    pub n_workers: u32,
    pub groups: Vec<Vec<String>>,
    pub cost: Vec<u64>,
}

impl WorkPlan {
    pub fn max_cost(&self) -> u64 {
        self.cost.iter().copied().max().unwrap_or(0)
    }

    pub fn worker_of(&self, param: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.iter().any(|p| p == param))
    }
}

/// Longest-processing-time greedy balancing on `(name, numel)` items: largest
/// first (ties by name), each to the currently lightest group (ties to the
/// lowest index).
pub fn plan_items(items: &[(String, u64)], n_workers: u32) -> WorkPlan {
    let n = n_workers.max(1) as usize;
    let mut order: Vec<&(String, u64)> = items.iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut groups = vec![Vec::new(); n];
    let mut cost = vec![0u64; n];
    for (name, numel) in order {
        let lightest = (0..n).min_by_key(|&w| (cost[w], w)).unwrap();
        groups[lightest].push(name.clone());
        cost[lightest] += numel;
    }
    WorkPlan {
        n_workers: n as u32,
        groups,
        cost,
    }
}

pub fn plan_work(spec: &ModelSpec, n_workers: u32) -> WorkPlan {
    let items: Vec<(String, u64)> = spec.params.iter().map(|p| (p.name.clone(), p.numel() as u64)).collect();
    plan_items(&items, n_workers)
}
