//! Splitting the device pool between concurrent input streams.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model_ir::ModelGraph;
use crate::partition::{AssignmentSet, DeviceId};

use super::cluster::{Cluster, ClusterConfig, StreamRun};

/// Fewest devices a stream is given.
pub const MIN_DEVICES_PER_STREAM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRequest {
    pub id: u16,
    /// Higher values are served first when devices are short.
    pub priority: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPlan {
    /// Disjoint device sets of the active streams.
    pub active: BTreeMap<u16, Vec<DeviceId>>,
    pub deferred: Vec<u16>,
}

/// Divides `devices` evenly between as many requests as can get at least
/// two each, dropping the lowest priorities first. Earlier stream ids get
/// the remainder devices.
pub fn activate_streams(requests: &[StreamRequest], devices: &[DeviceId]) -> Result<StreamPlan> {
    let mut ids: Vec<u16> = requests.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Runtime("duplicate stream id".into()));
    }
    let mut ranked: Vec<&StreamRequest> = requests.iter().collect();
    ranked.sort_by(|a, b| b.priority.cmp(&a.priority).then(a.id.cmp(&b.id)));
    let fit = (devices.len() / MIN_DEVICES_PER_STREAM).min(ranked.len());
    let mut active: Vec<u16> = ranked[..fit].iter().map(|r| r.id).collect();
    let mut deferred: Vec<u16> = ranked[fit..].iter().map(|r| r.id).collect();
    active.sort_unstable();
    deferred.sort_unstable();
    let mut pool = devices.to_vec();
    pool.sort_unstable();
    let mut plan = StreamPlan {
        active: BTreeMap::new(),
        deferred,
    };
    if active.is_empty() {
        return Ok(plan);
    }
    let base = pool.len() / active.len();
    let extra = pool.len() % active.len();
    let mut at = 0;
    for (i, id) in active.iter().enumerate() {
        let take = base + usize::from(i < extra);
        plan.active.insert(*id, pool[at..at + take].to_vec());
        at += take;
    }
    Ok(plan)
}

/// One cluster per active stream, each on its own devices and running the
/// assignment for its device count.
pub fn start_streams(
    graph: Arc<ModelGraph>,
    set: &AssignmentSet,
    plan: &StreamPlan,
    config: ClusterConfig,
) -> Result<BTreeMap<u16, Cluster>> {
    let mut out = BTreeMap::new();
    for (id, devices) in &plan.active {
        let a = set
            .get(devices.len())
            .ok_or_else(|| Error::Runtime(format!("no plan for {} devices", devices.len())))?;
        let cfg = ClusterConfig {
            stream_id: *id,
            ..config
        };
        out.insert(*id, Cluster::start_on(graph.clone(), a, devices, cfg)?);
    }
    Ok(out)
}

/// Runs every stream on its own input.
pub fn run_streams(
    clusters: &mut BTreeMap<u16, Cluster>,
    inputs: &BTreeMap<u16, BTreeMap<String, Vec<Tensor>>>,
) -> Result<BTreeMap<u16, StreamRun>> {
    clusters
        .iter_mut()
        .map(|(id, c)| {
            let src = inputs
                .get(id)
                .ok_or_else(|| Error::MissingInput(format!("stream {id}")))?;
            Ok((*id, c.run_stream(src)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u16, priority: u32) -> StreamRequest {
        StreamRequest { id, priority }
    }

    #[test]
    fn twelve_devices_two_streams() {
        let devices: Vec<DeviceId> = (1..=12).collect();
        let p = activate_streams(&[req(0, 1), req(1, 1)], &devices).unwrap();
        assert_eq!(p.active[&0], (1..=6).collect::<Vec<_>>());
        assert_eq!(p.active[&1], (7..=12).collect::<Vec<_>>());
        assert!(p.deferred.is_empty());
    }

    #[test]
    fn single_stream_takes_all() {
        let p = activate_streams(&[req(3, 0)], &[4, 2, 9]).unwrap();
        assert_eq!(p.active[&3], vec![2, 4, 9]);
    }

    #[test]
    fn short_pool_defers_lowest_priority() {
        let p = activate_streams(&[req(0, 5), req(1, 1)], &[1, 2, 3]).unwrap();
        assert_eq!(p.active.keys().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(p.deferred, vec![1]);
        let p = activate_streams(&[req(0, 1), req(1, 5)], &[1, 2, 3]).unwrap();
        assert_eq!(p.deferred, vec![0]);
    }
}
