//! Task assignment for every device count from one to `n_max`.
//!
//! Planning runs in three steps. [`model_to_layers`] cuts the graph into
//! atomic groups. [`find_min_load_tasks`] packs them into the fewest tasks
//! that fit device memory. For each `n`, the task set is then either merged
//! down onto fewer devices ([`minimize_load_time`]) or grown with model and
//! data parallelism ([`model_vs_data`], [`choose_best`]) until it uses `n`
//! devices.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostProfile;
use crate::engine::ClipSpec;
use crate::error::Result;

pub mod groups;
pub mod plan;
pub mod predict;
pub mod split;
pub mod table;
pub mod tasks;

pub use groups::{model_to_layers, LayerGroup};
pub use plan::{
    apply, candidates, choose_best, model_vs_data, plan_units, replicable, task_assign, Candidate,
    ParallelGain, Transform, Unit, UnitSplit,
};
pub use predict::expand;
pub use split::{dispatch_replica, replicate_task, split_fc, split_rows, FcSplit};
pub use table::{dump_assignment, plan_dump};
pub use tasks::{find_min_load_tasks, minimize_load_time};

pub type DeviceId = u16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Replica {
    pub index: usize,
    pub count: usize,
}

impl Replica {
    pub const NONE: Replica = Replica { index: 0, count: 1 };
}

/// One output-row slice of a split fc layer, plus the elementwise layers
/// applied to that slice on the same device.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitPart {
    pub layer: String,
    pub glue: Vec<String>,
    pub part_index: usize,
    pub part_count: usize,
}

impl SplitPart {
    /// Whether `name` is computed only for this part's rows.
    pub fn is_partial(&self, name: &str) -> bool {
        self.layer == name || self.glue.iter().any(|g| g == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Parallelism {
    None,
    ModelSplit {
        part_index: usize,
        part_count: usize,
    },
    DataReplica {
        replica_index: usize,
        replica_count: usize,
    },
    /// First part of a split whose task is also replicated.
    SplitReplica {
        part_index: usize,
        part_count: usize,
        replica_index: usize,
        replica_count: usize,
    },
}

impl fmt::Display for Parallelism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Parallelism::None => write!(f, "-"),
            Parallelism::ModelSplit {
                part_index,
                part_count,
            } => write!(f, "split {}/{}", part_index + 1, part_count),
            Parallelism::DataReplica {
                replica_index,
                replica_count,
            } => write!(f, "replica {}/{}", replica_index + 1, replica_count),
            Parallelism::SplitReplica {
                part_index,
                part_count,
                replica_index,
                replica_count,
            } => write!(
                f,
                "split {}/{} replica {}/{}",
                part_index + 1,
                part_count,
                replica_index + 1,
                replica_count
            ),
        }
    }
}

/// Virtual timings of a task, computed on the planning graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    /// Seconds per firing of each layer, swap penalty included.
    pub layer_seconds: BTreeMap<String, f64>,
    /// Bytes of each layer's output as sent by this task.
    pub out_bytes: BTreeMap<String, u64>,
    /// Layer sets that fit in memory together. More than one means the task
    /// reloads weights as it moves between sets.
    pub resident_sets: Vec<Vec<String>>,
    pub set_load_seconds: Vec<f64>,
}

impl TaskTiming {
    pub fn reloads(&self) -> bool {
        self.resident_sets.len() > 1
    }

    pub fn set_of(&self, layer: &str) -> Option<usize> {
        self.resident_sets
            .iter()
            .position(|s| s.iter().any(|l| l == layer))
    }

    /// Load time when the task starts: every set the first time round.
    pub fn initial_load_seconds(&self) -> f64 {
        self.set_load_seconds.first().copied().unwrap_or(0.0)
    }

    pub fn reload_seconds_per_cycle(&self) -> f64 {
        if self.reloads() {
            self.set_load_seconds.iter().sum()
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowInput {
    pub input: String,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    /// Index of the logical stage this task belongs to.
    pub unit: usize,
    /// Every layer this task evaluates, in topological order.
    pub layers: Vec<String>,
    pub split: Option<SplitPart>,
    pub replica: Replica,
    /// External inputs that need more than one item per firing.
    pub window_specs: Vec<WindowInput>,
    pub timing: TaskTiming,
}

impl Task {
    pub fn parallelism(&self) -> Parallelism {
        match (&self.split, self.replica.count) {
            (None, 1) => Parallelism::None,
            (None, _) => Parallelism::DataReplica {
                replica_index: self.replica.index,
                replica_count: self.replica.count,
            },
            (Some(s), 1) => Parallelism::ModelSplit {
                part_index: s.part_index,
                part_count: s.part_count,
            },
            (Some(s), _) => Parallelism::SplitReplica {
                part_index: s.part_index,
                part_count: s.part_count,
                replica_index: self.replica.index,
                replica_count: self.replica.count,
            },
        }
    }

    pub fn computes(&self, layer: &str) -> bool {
        self.layers.iter().any(|l| l == layer)
    }

    pub fn is_partial(&self, layer: &str) -> bool {
        self.split.as_ref().is_some_and(|s| s.is_partial(layer))
    }

    /// Key identifying the weights this task holds. Two tasks with equal
    /// keys can swap roles without reloading.
    pub fn weight_key(&self) -> (Vec<String>, Option<(String, usize, usize)>) {
        (
            self.layers.clone(),
            self.split
                .as_ref()
                .map(|s| (s.layer.clone(), s.part_index, s.part_count)),
        )
    }

    /// Key of the replica group this task belongs to.
    pub fn group_key(&self) -> (usize, usize) {
        (self.unit, self.split.as_ref().map_or(0, |s| s.part_index))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub producer: DeviceId,
    pub consumer: DeviceId,
    pub layer: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predicted {
    pub ips: f64,
    pub t_forward: f64,
    /// Initial weight-load time of each device.
    pub load_seconds: BTreeMap<DeviceId, f64>,
    /// Per-inference time each device spends, replicas already divided out.
    pub stage_seconds: BTreeMap<DeviceId, f64>,
    /// Weight reloading per inference, summed over devices.
    pub reload_seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub profile: CostProfile,
    pub clip: ClipSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub device_count: usize,
    pub tasks: BTreeMap<DeviceId, Task>,
    pub edges: Vec<Edge>,
    pub predicted: Predicted,
}

impl Assignment {
    pub fn task(&self, id: usize) -> Option<&Task> {
        self.tasks.values().find(|t| t.id == id)
    }

    /// Tasks in id order.
    pub fn task_list(&self) -> Vec<&Task> {
        let mut v: Vec<&Task> = self.tasks.values().collect();
        v.sort_by_key(|t| t.id);
        v
    }

    pub fn device_of(&self, task_id: usize) -> Option<DeviceId> {
        self.tasks
            .iter()
            .find(|(_, t)| t.id == task_id)
            .map(|(d, _)| *d)
    }

    /// Devices that hold any part of `layer`.
    pub fn devices_with(&self, layer: &str) -> Vec<DeviceId> {
        self.tasks
            .iter()
            .filter(|(_, t)| t.computes(layer))
            .map(|(d, _)| *d)
            .collect()
    }

    pub fn reloads(&self) -> bool {
        self.tasks.values().any(|t| t.timing.reloads())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSet {
    pub model: String,
    pub n_max: usize,
    pub config: PlanConfig,
    /// Entry `i` is the assignment for `i + 1` devices.
    pub assignments: Vec<Assignment>,
}

impl AssignmentSet {
    pub fn get(&self, n: usize) -> Option<&Assignment> {
        n.checked_sub(1).and_then(|i| self.assignments.get(i))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
