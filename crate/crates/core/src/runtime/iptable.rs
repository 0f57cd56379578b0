//! The shared device table: who runs which task, and who coordinates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::DeviceId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpEntry {
    pub address: String,
    /// Task id in the current assignment, if any.
    pub task: Option<usize>,
    pub master: bool,
    pub recorder: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpTable {
    pub version: u64,
    pub entries: BTreeMap<DeviceId, IpEntry>,
}

impl IpTable {
    /// Version 1: master is the lowest id, the recorder is whoever runs
    /// `recorder_task`.
    pub fn initial(
        roles: &BTreeMap<DeviceId, Option<usize>>,
        addresses: &BTreeMap<DeviceId, String>,
        recorder_task: usize,
    ) -> Result<Self> {
        let master = *roles
            .keys()
            .next()
            .ok_or_else(|| Error::Runtime("no devices".into()))?;
        let entries = roles
            .iter()
            .map(|(&d, &task)| {
                (
                    d,
                    IpEntry {
                        address: addresses.get(&d).cloned().unwrap_or_default(),
                        task,
                        master: d == master,
                        recorder: task == Some(recorder_task),
                    },
                )
            })
            .collect();
        let t = IpTable { version: 1, entries };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<()> {
        let masters = self.entries.values().filter(|e| e.master).count();
        let recorders = self.entries.values().filter(|e| e.recorder).count();
        if masters != 1 {
            return Err(Error::RoleUpdate(format!("table has {masters} masters")));
        }
        if recorders > 1 {
            return Err(Error::RoleUpdate(format!("table has {recorders} recorders")));
        }
        let mut seen = BTreeMap::new();
        for (d, e) in &self.entries {
            if let Some(t) = e.task {
                if let Some(other) = seen.insert(t, *d) {
                    return Err(Error::RoleUpdate(format!(
                        "task {t} held by devices {other} and {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn master(&self) -> DeviceId {
        self.entries
            .iter()
            .find(|(_, e)| e.master)
            .map(|(d, _)| *d)
            .expect("checked table has a master")
    }

    pub fn recorder(&self) -> Option<DeviceId> {
        self.entries.iter().find(|(_, e)| e.recorder).map(|(d, _)| *d)
    }

    pub fn device_for_task(&self, task: usize) -> Option<DeviceId> {
        self.entries
            .iter()
            .find(|(_, e)| e.task == Some(task))
            .map(|(d, _)| *d)
    }

    pub fn task_of(&self, device: DeviceId) -> Option<usize> {
        self.entries.get(&device).and_then(|e| e.task)
    }

    /// Accepts `update` if it comes from this table's master and is newer.
    /// Re-delivery of the current version is accepted as a no-op.
    pub fn apply(&mut self, update: &IpTable, from: DeviceId) -> Result<bool> {
        if from != self.master() {
            return Err(Error::RoleUpdate(format!(
                "device {from} is not the master ({})",
                self.master()
            )));
        }
        if update.version < self.version {
            return Err(Error::RoleUpdate(format!(
                "stale version {} (have {})",
                update.version, self.version
            )));
        }
        if update.version == self.version {
            return if update == self {
                Ok(false)
            } else {
                Err(Error::RoleUpdate(format!(
                    "conflicting tables at version {}",
                    update.version
                )))
            };
        }
        update.check()?;
        *self = update.clone();
        Ok(true)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> IpTable {
        let roles = (1..=3).map(|d| (d, Some(d as usize - 1))).collect();
        IpTable::initial(&roles, &BTreeMap::new(), 0).unwrap()
    }

    #[test]
    fn initial_roles() {
        let t = table();
        assert_eq!(t.version, 1);
        assert_eq!(t.master(), 1);
        assert_eq!(t.recorder(), Some(1));
        assert_eq!(t.device_for_task(2), Some(3));
    }

    #[test]
    fn only_master_updates_and_versions_grow() {
        let mut t = table();
        let mut u = t.clone();
        u.version = 2;
        u.entries.get_mut(&1).unwrap().task = Some(2);
        u.entries.get_mut(&3).unwrap().task = Some(0);
        u.entries.get_mut(&1).unwrap().recorder = false;
        u.entries.get_mut(&3).unwrap().recorder = true;
        assert!(t.apply(&u, 2).is_err());
        assert_eq!(t.version, 1);
        assert!(t.apply(&u, 1).unwrap());
        assert_eq!(t.recorder(), Some(3));
        assert!(!t.apply(&u, 1).unwrap());
        let mut old = u.clone();
        old.version = 1;
        assert!(t.apply(&old, 1).is_err());
    }
}
