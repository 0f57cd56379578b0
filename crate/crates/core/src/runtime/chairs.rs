//! Role reassignment ("musical chairs").
//!
//! The master derives a new device-to-task mapping from the precomputed
//! assignment set, keeping as many devices on the weights they already hold
//! as possible, and broadcasts it as a new IP-table version.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{AssignmentSet, DeviceId, Task};

use super::cluster::{exports_of, recorder_task, slack_for, Cluster};
use super::iptable::IpTable;
use super::message::{Message, MessageKind};
use super::worker::Worker;

/// Delivery attempts per device before an update is abandoned.
pub const MAX_ATTEMPTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trigger {
    /// The object is now in view of this device, which becomes the recorder.
    MotionOn(DeviceId),
    /// This device left the cluster.
    DeviceLost(DeviceId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairsOutcome {
    pub version: u64,
    /// Devices that loaded new weights.
    pub reloaded: Vec<DeviceId>,
    /// Longest reload among them.
    pub setup_seconds: f64,
    pub mapping: BTreeMap<DeviceId, Option<usize>>,
    /// Broadcast rounds needed until every device acknowledged.
    pub rounds: usize,
}

type WeightKey = (Vec<String>, Option<(String, usize, usize)>);

/// Maximum bipartite matching of tasks to devices that already hold their
/// weights (Kuhn's augmenting paths).
fn retain_matching(tasks: &[&Task], devices: &[DeviceId], held: &BTreeMap<DeviceId, WeightKey>) -> BTreeMap<usize, DeviceId> {
    fn augment(
        t: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &d in &adj[t] {
            if seen[d] {
                continue;
            }
            seen[d] = true;
            if owner[d].is_none_or(|o| augment(o, adj, seen, owner)) {
                owner[d] = Some(t);
                return true;
            }
        }
        false
    }
    let adj: Vec<Vec<usize>> = tasks
        .iter()
        .map(|t| {
            let key = t.weight_key();
            devices
                .iter()
                .enumerate()
                .filter(|(_, d)| held.get(d) == Some(&key))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let mut owner = vec![None; devices.len()];
    for t in 0..tasks.len() {
        let mut seen = vec![false; devices.len()];
        augment(t, &adj, &mut seen, &mut owner);
    }
    owner
        .iter()
        .enumerate()
        .filter_map(|(d, t)| t.map(|t| (tasks[t].id, devices[d])))
        .collect()
}

/// Places `tasks` on `devices`: `pinned` first, then retention, then the
/// remaining tasks on the remaining devices in id order.
pub fn place(
    tasks: &BTreeMap<usize, Task>,
    devices: &[DeviceId],
    held: &BTreeMap<DeviceId, WeightKey>,
    pinned: Option<(usize, DeviceId)>,
) -> Result<BTreeMap<DeviceId, Option<usize>>> {
    if tasks.len() > devices.len() {
        return Err(Error::RoleUpdate(format!(
            "{} tasks for {} devices",
            tasks.len(),
            devices.len()
        )));
    }
    let mut mapping: BTreeMap<DeviceId, Option<usize>> = devices.iter().map(|d| (*d, None)).collect();
    let mut free_devices: Vec<DeviceId> = devices.to_vec();
    let mut free_tasks: Vec<&Task> = tasks.values().collect();
    if let Some((task, dev)) = pinned {
        if !mapping.contains_key(&dev) {
            return Err(Error::RoleUpdate(format!("device {dev} is not available")));
        }
        mapping.insert(dev, Some(task));
        free_devices.retain(|d| *d != dev);
        free_tasks.retain(|t| t.id != task);
    }
    let kept = retain_matching(&free_tasks, &free_devices, held);
    for (t, d) in &kept {
        mapping.insert(*d, Some(*t));
    }
    free_devices.retain(|d| !kept.values().any(|k| k == d));
    free_tasks.retain(|t| !kept.contains_key(&t.id));
    for (t, d) in free_tasks.iter().zip(&free_devices) {
        mapping.insert(*d, Some(t.id));
    }
    Ok(mapping)
}

impl Cluster {
    /// Drops the first delivery of every role update to these devices.
    /// Test hook for the retry path.
    pub fn drop_first_update_to(&mut self, devices: impl IntoIterator<Item = DeviceId>) {
        self.drop_updates = devices.into_iter().map(|d| (d, 1)).collect();
    }

    /// Number of table versions the master has written.
    pub fn master_writes(&self) -> u64 {
        self.master_writes
    }

    fn held_weights(&self) -> BTreeMap<DeviceId, WeightKey> {
        self.nodes
            .iter()
            .filter_map(|(d, n)| n.worker.as_ref().map(|w| (*d, w.task().weight_key())))
            .collect()
    }

    /// Runs one round of reassignment for `trigger`. `set` must be the
    /// assignment set the cluster was started from.
    pub fn musical_chairs(&mut self, trigger: Trigger, set: &AssignmentSet) -> Result<ChairsOutcome> {
        let master = self.table().master();
        let held = self.held_weights();
        let (tasks, mapping) = match trigger {
            Trigger::MotionOn(d) => {
                if !self.nodes.contains_key(&d) {
                    return Err(Error::RoleUpdate(format!("unknown device {d}")));
                }
                let rec = recorder_task(&self.graph, &self.tasks)?;
                let devices = self.devices();
                let mapping = place(&self.tasks, &devices, &held, Some((rec, d)))?;
                (self.tasks.clone(), mapping)
            }
            Trigger::DeviceLost(d) => {
                if d == master {
                    return Err(Error::RoleUpdate(format!(
                        "master device {d} lost; re-election is not supported"
                    )));
                }
                if self.nodes.remove(&d).is_none() {
                    return Err(Error::RoleUpdate(format!("unknown device {d}")));
                }
                let devices = self.devices();
                let a = set.get(devices.len()).ok_or_else(|| {
                    Error::RoleUpdate(format!("no plan for {} devices", devices.len()))
                })?;
                let tasks: BTreeMap<usize, Task> = a.tasks.values().map(|t| (t.id, t.clone())).collect();
                let rec = recorder_task(&self.graph, &tasks)?;
                let keep = self
                    .table()
                    .recorder()
                    .filter(|r| devices.contains(r))
                    .unwrap_or(devices[0]);
                let mapping = place(&tasks, &devices, &held, Some((rec, keep)))?;
                (tasks, mapping)
            }
        };
        let update = self.master_table_for(&mapping, &tasks)?;
        let rounds = self.broadcast(master, &update)?;
        self.tasks = tasks;
        let (reloaded, setup) = self.apply_roles(&mapping)?;
        log::info!(
            "table v{}: reloaded {:?}, setup {:.2}s",
            update.version,
            reloaded,
            setup
        );
        Ok(ChairsOutcome {
            version: update.version,
            reloaded,
            setup_seconds: setup,
            mapping,
            rounds,
        })
    }

    fn master_table_for(&mut self, mapping: &BTreeMap<DeviceId, Option<usize>>, tasks: &BTreeMap<usize, Task>) -> Result<IpTable> {
        let rec = recorder_task(&self.graph, tasks)?;
        let master = self.table().master();
        let mut t = self.table().clone();
        t.version += 1;
        t.entries.retain(|d, _| mapping.contains_key(d));
        for (d, e) in t.entries.iter_mut() {
            e.task = mapping[d];
            e.recorder = e.task == Some(rec);
        }
        t.check()?;
        self.nodes.get_mut(&master).unwrap().table = t.clone();
        self.master_writes += 1;
        Ok(t)
    }

    /// Sends `update` to every other device until all acknowledge.
    fn broadcast(&mut self, master: DeviceId, update: &IpTable) -> Result<usize> {
        let body = update.to_bytes()?;
        let mut missing: BTreeSet<DeviceId> = self.devices().into_iter().filter(|d| *d != master).collect();
        let mut rounds = 0;
        while !missing.is_empty() {
            rounds += 1;
            if rounds > MAX_ATTEMPTS {
                return Err(Error::RoleUpdate(format!(
                    "no acknowledgement from {missing:?} for version {}",
                    update.version
                )));
            }
            for d in missing.clone() {
                if let Some(left) = self.drop_updates.get_mut(&d) {
                    if *left > 0 {
                        *left -= 1;
                        continue;
                    }
                }
                let msg = Message::control(MessageKind::RoleUpdate, self.config.stream_id, master, body.clone());
                let got = self.transmit(master, d, &msg)?;
                if self.receive_update(d, &got)? {
                    let ack = Message::control(MessageKind::Ack, self.config.stream_id, d, update.version.to_le_bytes().to_vec());
                    let back = self.transmit(d, master, &ack)?;
                    if back.kind == MessageKind::Ack && back.body() == update.version.to_le_bytes() {
                        missing.remove(&d);
                    }
                }
            }
        }
        Ok(rounds)
    }

    /// Device `d` handles a role update. Returns whether it acknowledges.
    fn receive_update(&mut self, d: DeviceId, msg: &Message) -> Result<bool> {
        let table = IpTable::from_bytes(msg.body())?;
        let node = self.nodes.get_mut(&d).unwrap();
        match node.table.apply(&table, msg.source) {
            Ok(_) => Ok(true),
            Err(e) => {
                log::warn!("device {d} rejected update: {e}");
                Ok(false)
            }
        }
    }

    /// Proposes a table as if sent by `from`. Only the master's proposals
    /// are accepted; returns how many devices accepted it.
    pub fn propose_update(&mut self, from: DeviceId, update: &IpTable) -> Result<usize> {
        let mut accepted = 0;
        for d in self.devices() {
            if d == from {
                continue;
            }
            let msg = Message::control(MessageKind::RoleUpdate, self.config.stream_id, from, update.to_bytes()?);
            let got = self.transmit(from, d, &msg)?;
            if self.receive_update(d, &got)? {
                accepted += 1;
            }
        }
        if accepted == 0 {
            return Err(Error::RoleUpdate(format!("update from device {from} rejected")));
        }
        Ok(accepted)
    }

    /// Loads or retasks workers to match `mapping`.
    fn apply_roles(&mut self, mapping: &BTreeMap<DeviceId, Option<usize>>) -> Result<(Vec<DeviceId>, f64)> {
        let slack = slack_for(&self.tasks);
        let mut reloaded = Vec::new();
        let mut setup: f64 = 0.0;
        for (d, task) in mapping {
            let node = self.nodes.get_mut(d).unwrap();
            let Some(id) = task else {
                node.worker = None;
                continue;
            };
            let task = self.tasks[id].clone();
            let same = node
                .worker
                .as_ref()
                .is_some_and(|w| w.task().weight_key() == task.weight_key());
            if same {
                node.worker.as_mut().unwrap().retask(task, slack)?;
            } else {
                setup = setup.max(task.timing.initial_load_seconds());
                node.worker = Some(Worker::load(*d, self.graph.clone(), task, self.config.clip, slack)?);
                reloaded.push(*d);
            }
        }
        for node in self.nodes.values_mut() {
            if let Some(w) = &mut node.worker {
                w.set_exports(exports_of(&self.graph, &self.tasks, w.task()));
            }
        }
        self.set_trace(self.trace_enabled());
        self.setup_seconds = setup;
        Ok((reloaded, setup))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{Replica, TaskTiming};

    fn task(id: usize, layer: &str) -> Task {
        Task {
            id,
            unit: id,
            layers: vec![layer.to_string()],
            split: None,
            replica: Replica::NONE,
            window_specs: Vec::new(),
            timing: TaskTiming::default(),
        }
    }

    #[test]
    fn pinned_recorder_swaps_with_its_holder() {
        let tasks: BTreeMap<usize, Task> = [task(0, "src"), task(1, "a"), task(2, "b")]
            .into_iter()
            .map(|t| (t.id, t))
            .collect();
        let held = tasks.values().map(|t| ((t.id + 1) as DeviceId, t.weight_key())).collect();
        let m = place(&tasks, &[1, 2, 3], &held, Some((0, 3))).unwrap();
        assert_eq!(m[&3], Some(0));
        assert_eq!(m[&1], Some(2));
        assert_eq!(m[&2], Some(1));
    }

    #[test]
    fn identical_mapping_keeps_everyone() {
        let tasks: BTreeMap<usize, Task> = [task(0, "src"), task(1, "a")].into_iter().map(|t| (t.id, t)).collect();
        let held = tasks.values().map(|t| ((t.id + 1) as DeviceId, t.weight_key())).collect();
        let m = place(&tasks, &[1, 2, 3], &held, Some((0, 1))).unwrap();
        assert_eq!(m, BTreeMap::from([(1, Some(0)), (2, Some(1)), (3, None)]));
    }
}
