//! A cluster of workers driven by a discrete-event clock.
//!
//! Compute and communication costs come from the plan's timing model, so the
//! clock is virtual; the tensors themselves are really computed and, with the
//! loopback transport, really sent over TCP.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use crate::cost::{comm_latency, CommModel};
use crate::engine::{ClipSpec, Outputs, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{Breakdown, RunMetrics};
use crate::model_ir::ModelGraph;
use crate::partition::{dispatch_replica, Assignment, DeviceId, PlanConfig, Task};

use super::inbox::{BoundedInbox, Push};
use super::iptable::IpTable;
use super::message::{pack_role, unpack_role, Message, MessageKind, CAMERA};
use super::wire::{read_frame, write_frame};
use super::worker::{Account, Emitted, TraceEntry, Worker};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Transport {
    #[default]
    InProcess,
    /// Every message is framed and sent over a 127.0.0.1 TCP connection.
    Loopback,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    pub transport: Transport,
    /// Charge `comm_latency` for every data message.
    pub simulate_latency: bool,
    pub inbox_capacity: usize,
    pub fps: f64,
    /// How long the camera samples at half rate after an almost-full signal.
    pub cooldown_seconds: f64,
    pub clip: ClipSpec,
    pub comm: CommModel,
    pub stream_id: u16,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            transport: Transport::InProcess,
            simulate_latency: false,
            inbox_capacity: 10,
            fps: 30.0,
            cooldown_seconds: 2.0,
            clip: ClipSpec::default(),
            comm: CommModel::default(),
            stream_id: 0,
        }
    }
}

impl ClusterConfig {
    /// Clip and comm model taken from the plan.
    pub fn for_plan(plan: &PlanConfig) -> Self {
        Self {
            clip: plan.clip,
            comm: plan.profile.comm,
            ..Self::default()
        }
    }
}

/// A data message plus the latency bookkeeping that rides along with it.
/// The bookkeeping never touches the wire.
#[derive(Clone, Debug)]
pub(crate) struct Envelope {
    pub(crate) msg: Message,
    pub(crate) account: Account,
}

pub(crate) struct Node {
    pub(crate) device: DeviceId,
    pub(crate) worker: Option<Worker>,
    /// This device's copy of the IP table.
    pub(crate) table: IpTable,
    pub(crate) inbox: BoundedInbox<Envelope>,
    pub(crate) control: VecDeque<Message>,
    outbox: VecDeque<(DeviceId, Envelope)>,
    pending: Vec<Emitted>,
    busy: bool,
    busy_seconds: f64,
    /// Devices blocked on a full inbox here.
    waiters: BTreeSet<DeviceId>,
    almost_full_received: u64,
    pub(crate) listener: Option<TcpListener>,
}

/// Persistent loopback connections, one per directed device pair.
#[derive(Default)]
pub(crate) struct Links {
    conns: BTreeMap<(DeviceId, DeviceId), (TcpStream, TcpStream)>,
    pub(crate) bytes: u64,
}

impl Links {
    fn send(&mut self, nodes: &BTreeMap<DeviceId, Node>, from: DeviceId, to: DeviceId, msg: &Message) -> Result<Message> {
        let key = (from, to);
        if let std::collections::btree_map::Entry::Vacant(e) = self.conns.entry(key) {
            let dest = nodes
                .get(&to)
                .ok_or_else(|| Error::Runtime(format!("no device {to}")))?;
            let listener = dest
                .listener
                .as_ref()
                .ok_or_else(|| Error::Runtime(format!("device {to} is not listening")))?;
            let writer = TcpStream::connect(listener.local_addr()?)?;
            writer.set_nodelay(true)?;
            let (reader, _) = listener.accept()?;
            e.insert((writer, reader));
        }
        let (writer, reader) = self.conns.get_mut(&key).unwrap();
        let back = std::thread::scope(|s| {
            let sent = s.spawn(|| write_frame(writer, msg));
            let got = read_frame(reader);
            sent.join()
                .map_err(|_| Error::Runtime("sender thread panicked".into()))??;
            got
        })?;
        self.bytes += super::wire::encode(msg)?.len() as u64;
        Ok(back)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Event {
    Tick(u64),
    Work(DeviceId),
    Done(DeviceId),
    Flush(DeviceId),
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, o: &Self) -> Ordering {
        o.time.total_cmp(&self.time).then(o.seq.cmp(&self.seq))
    }
}

/// Result of one stream run.
#[derive(Clone, Debug, Default)]
pub struct StreamRun {
    /// Completed inferences by tag.
    pub outputs: BTreeMap<u64, Outputs>,
    pub metrics: RunMetrics,
    /// Frames the camera recorded, which are the frames the outputs cover.
    pub recorded_frames: usize,
    /// Highest inbox occupancy each device reached.
    pub max_occupancy: BTreeMap<DeviceId, usize>,
    pub almost_full_signals: u64,
    /// Data messages dropped for naming a role the receiver does not hold.
    pub misrouted: u64,
    /// Bytes framed onto loopback sockets.
    pub wire_bytes: u64,
    /// Per-device trace, when tracing is enabled.
    pub trace: BTreeMap<DeviceId, Vec<TraceEntry>>,
}

struct RunState<'a> {
    sources: &'a BTreeMap<String, Vec<Tensor>>,
    frames: usize,
    next_frame: usize,
    drops: u64,
    idle_ticks: u64,
    cooldown_until: f64,
    partial: BTreeMap<u64, Outputs>,
    done: BTreeMap<u64, (Outputs, f64, Account)>,
    almost_full: u64,
    misrouted: u64,
}

/// Ticks in a row the camera may find the recorder full before the run is
/// declared stalled.
const STALL_TICKS: u64 = 1_000_000;

pub struct Cluster {
    pub(crate) graph: Arc<ModelGraph>,
    pub(crate) config: ClusterConfig,
    pub(crate) tasks: BTreeMap<usize, Task>,
    pub(crate) nodes: BTreeMap<DeviceId, Node>,
    pub(crate) links: Links,
    pub(crate) setup_seconds: f64,
    pub(crate) master_writes: u64,
    pub(crate) drop_updates: BTreeMap<DeviceId, usize>,
    trace: bool,
    clock: f64,
    seq: u64,
    events: BinaryHeap<Scheduled>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("devices", &self.nodes.keys().collect::<Vec<_>>())
            .field("tasks", &self.tasks.len())
            .finish()
    }
}

pub(crate) fn recorder_task(graph: &ModelGraph, tasks: &BTreeMap<usize, Task>) -> Result<usize> {
    let src = graph
        .inputs
        .first()
        .ok_or_else(|| Error::Graph("graph has no source".into()))?;
    tasks
        .values()
        .find(|t| t.computes(src))
        .map(|t| t.id)
        .ok_or_else(|| Error::Runtime(format!("no task records `{src}`")))
}

/// Layers of `task` that some other task consumes.
pub(crate) fn exports_of(graph: &ModelGraph, tasks: &BTreeMap<usize, Task>, task: &Task) -> BTreeSet<String> {
    task.layers
        .iter()
        .filter(|l| {
            graph.consumers(l).iter().any(|c| {
                tasks
                    .values()
                    .any(|t| t.id != task.id && t.computes(c) && !t.computes(l))
            })
        })
        .cloned()
        .collect()
}

pub(crate) fn slack_for(tasks: &BTreeMap<usize, Task>) -> usize {
    2 * tasks.values().map(|t| t.replica.count).max().unwrap_or(1).max(1)
}

impl Cluster {
    /// One worker per device of `assignment`, device ids as planned.
    pub fn start(graph: Arc<ModelGraph>, assignment: &Assignment, config: ClusterConfig) -> Result<Self> {
        let devices: Vec<DeviceId> = (1..=assignment.device_count as DeviceId).collect();
        Self::start_on(graph, assignment, &devices, config)
    }

    /// Like [`Cluster::start`], running planned device `i + 1` on
    /// `devices[i]`.
    pub fn start_on(
        graph: Arc<ModelGraph>,
        assignment: &Assignment,
        devices: &[DeviceId],
        config: ClusterConfig,
    ) -> Result<Self> {
        if devices.len() != assignment.device_count {
            return Err(Error::Runtime(format!(
                "assignment needs {} devices, got {}",
                assignment.device_count,
                devices.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &d in devices {
            if d == CAMERA {
                return Err(Error::Runtime(format!("device id {CAMERA} is reserved for the camera")));
            }
            if !seen.insert(d) {
                return Err(Error::Runtime(format!("duplicate device id {d}")));
            }
        }
        if config.inbox_capacity == 0 || !(config.fps > 0.0) {
            return Err(Error::Runtime("inbox capacity and fps must be positive".into()));
        }
        let tasks: BTreeMap<usize, Task> = assignment.tasks.values().map(|t| (t.id, t.clone())).collect();
        let slack = slack_for(&tasks);
        let mut roles = BTreeMap::new();
        let mut addresses = BTreeMap::new();
        let mut nodes = BTreeMap::new();
        let mut setup: f64 = 0.0;
        for (i, &d) in devices.iter().enumerate() {
            let planned = (i + 1) as DeviceId;
            let task = assignment.tasks.get(&planned);
            let worker = match task {
                Some(t) => {
                    setup = setup.max(t.timing.initial_load_seconds());
                    let mut w = Worker::load(d, graph.clone(), t.clone(), config.clip, slack)?;
                    w.set_exports(exports_of(&graph, &tasks, t));
                    Some(w)
                }
                None => None,
            };
            let listener = match config.transport {
                Transport::InProcess => None,
                Transport::Loopback => {
                    let l = TcpListener::bind("127.0.0.1:0")?;
                    addresses.insert(d, l.local_addr()?.to_string());
                    Some(l)
                }
            };
            if config.transport == Transport::InProcess {
                addresses.insert(d, format!("inproc://{d}"));
            }
            roles.insert(d, task.map(|t| t.id));
            nodes.insert(
                d,
                Node {
                    device: d,
                    worker,
                    table: IpTable {
                        version: 0,
                        entries: BTreeMap::new(),
                    },
                    inbox: BoundedInbox::new(config.inbox_capacity),
                    control: VecDeque::new(),
                    outbox: VecDeque::new(),
                    pending: Vec::new(),
                    busy: false,
                    busy_seconds: 0.0,
                    waiters: BTreeSet::new(),
                    almost_full_received: 0,
                    listener,
                },
            );
        }
        let table = IpTable::initial(&roles, &addresses, recorder_task(&graph, &tasks)?)?;
        for n in nodes.values_mut() {
            n.table = table.clone();
        }
        log::info!(
            "cluster up: {} devices, master {}, recorder {:?}",
            nodes.len(),
            table.master(),
            table.recorder()
        );
        Ok(Self {
            graph,
            config,
            tasks,
            nodes,
            links: Links::default(),
            setup_seconds: setup,
            master_writes: 1,
            drop_updates: BTreeMap::new(),
            trace: false,
            clock: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        self.nodes.keys().copied().collect()
    }

    /// The master's copy of the IP table.
    pub fn table(&self) -> &IpTable {
        let master = self
            .nodes
            .values()
            .find(|n| n.table.entries.get(&n.device).is_some_and(|e| e.master))
            .expect("some node is master");
        &master.table
    }

    /// Every device's local copy.
    pub fn tables(&self) -> BTreeMap<DeviceId, &IpTable> {
        self.nodes.iter().map(|(d, n)| (*d, &n.table)).collect()
    }

    pub fn task_of(&self, device: DeviceId) -> Option<&Task> {
        self.nodes.get(&device)?.worker.as_ref().map(|w| w.task())
    }

    /// Weight-load time of the most recent (re)configuration.
    pub fn setup_seconds(&self) -> f64 {
        self.setup_seconds
    }

    pub fn trace_enabled(&self) -> bool {
        self.trace
    }

    pub fn set_trace(&mut self, on: bool) {
        self.trace = on;
        for n in self.nodes.values_mut() {
            if let Some(w) = &mut n.worker {
                if on {
                    w.enable_trace();
                }
            }
        }
    }

    /// Fault hook: perturbs one weight of `layer` on `device`.
    pub fn corrupt_weight(&mut self, device: DeviceId, layer: &str) -> Result<()> {
        self.nodes
            .get_mut(&device)
            .and_then(|n| n.worker.as_mut())
            .ok_or_else(|| Error::Runtime(format!("device {device} runs no task")))?
            .corrupt_weight(layer)
    }

    fn schedule(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.events.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    pub(crate) fn transmit(&mut self, from: DeviceId, to: DeviceId, msg: &Message) -> Result<Message> {
        match self.config.transport {
            Transport::InProcess => Ok(msg.clone()),
            Transport::Loopback => self.links.send(&self.nodes, from, to, msg),
        }
    }

    /// Feeds `sources` (one frame sequence per graph source) through the
    /// cluster at the configured frame rate and collects every output.
    pub fn run_stream(&mut self, sources: &BTreeMap<String, Vec<Tensor>>) -> Result<StreamRun> {
        let mut frames = None;
        for s in &self.graph.inputs {
            let seq = sources.get(s).ok_or_else(|| Error::MissingInput(s.clone()))?;
            if frames.is_some_and(|f| f != seq.len()) {
                return Err(Error::Dimension("sources differ in frame count".into()));
            }
            frames = Some(seq.len());
        }
        let frames = frames.unwrap_or(0);
        for n in self.nodes.values_mut() {
            if let Some(w) = &mut n.worker {
                w.reset()?;
                if self.trace {
                    w.take_trace();
                }
            }
            n.inbox = BoundedInbox::new(self.config.inbox_capacity);
            n.control.clear();
            n.outbox.clear();
            n.pending.clear();
            n.busy = false;
            n.busy_seconds = 0.0;
            n.waiters.clear();
            n.almost_full_received = 0;
        }
        self.clock = 0.0;
        self.events.clear();
        self.links.bytes = 0;
        let mut st = RunState {
            sources,
            frames,
            next_frame: 0,
            drops: 0,
            idle_ticks: 0,
            cooldown_until: f64::NEG_INFINITY,
            partial: BTreeMap::new(),
            done: BTreeMap::new(),
            almost_full: 0,
            misrouted: 0,
        };
        if frames > 0 {
            self.schedule(0.0, Event::Tick(0));
        }
        while let Some(ev) = self.events.pop() {
            self.clock = ev.time;
            match ev.event {
                Event::Tick(i) => self.on_tick(i, &mut st)?,
                Event::Work(d) => self.on_work(d, &mut st)?,
                Event::Done(d) => self.on_done(d, &mut st)?,
                Event::Flush(d) => self.flush(d, &mut st)?,
            }
        }
        if let Some(n) = self.nodes.values().find(|n| !n.outbox.is_empty() || n.inbox.occupancy() > 0) {
            return Err(Error::Runtime(format!("device {} did not drain", n.device)));
        }
        Ok(self.finish(st))
    }

    fn finish(&mut self, st: RunState<'_>) -> StreamRun {
        let mut m = RunMetrics {
            setup_seconds: self.setup_seconds,
            drops: st.drops,
            inferences: st.done.len(),
            per_device_busy_seconds: self.nodes.values().map(|n| n.busy_seconds).collect(),
            ..RunMetrics::default()
        };
        if !st.done.is_empty() {
            let ends: Vec<f64> = st.done.values().map(|d| d.1).collect();
            let first = ends.iter().copied().fold(f64::INFINITY, f64::min);
            let last = ends.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m.wall_seconds = last.max(self.clock);
            if ends.len() > 1 && last > first {
                m.ips = (ends.len() - 1) as f64 / (last - first);
            }
            let mut sum = Breakdown::default();
            for (_, _, acc) in st.done.values() {
                sum.add(&acc.breakdown);
            }
            m.breakdown = sum.scaled(1.0 / st.done.len() as f64);
            m.t_forward_seconds = m.breakdown.total();
        } else {
            m.wall_seconds = self.clock;
        }
        let trace = if self.trace {
            self.nodes
                .iter_mut()
                .filter_map(|(d, n)| n.worker.as_mut().map(|w| (*d, w.take_trace())))
                .collect()
        } else {
            BTreeMap::new()
        };
        StreamRun {
            outputs: st.done.into_iter().map(|(t, (o, _, _))| (t, o)).collect(),
            metrics: m,
            recorded_frames: st.next_frame,
            max_occupancy: self.nodes.iter().map(|(d, n)| (*d, n.inbox.high_water())).collect(),
            almost_full_signals: st.almost_full,
            misrouted: st.misrouted,
            wire_bytes: self.links.bytes,
            trace,
        }
    }

    fn recorder_device(&self) -> Result<DeviceId> {
        self.table()
            .recorder()
            .ok_or_else(|| Error::Runtime("no recorder".into()))
    }

    fn on_tick(&mut self, i: u64, st: &mut RunState<'_>) -> Result<()> {
        if st.next_frame >= st.frames {
            return Ok(());
        }
        let now = self.clock;
        let halved = now < st.cooldown_until && i % 2 == 1;
        let recorder = self.recorder_device()?;
        let table = self.nodes[&recorder].table.clone();
        let mut recorded = false;
        if !halved {
            // Each source goes to the task that records it; all live on the
            // recorder in every plan this crate produces.
            let mut targets = Vec::new();
            for s in &self.graph.inputs {
                let task = self
                    .tasks
                    .values()
                    .find(|t| t.computes(s))
                    .ok_or_else(|| Error::Runtime(format!("no task records `{s}`")))?;
                let dev = table
                    .device_for_task(task.id)
                    .ok_or_else(|| Error::Runtime(format!("task {} has no device", task.id)))?;
                let slot = self.nodes[&dev]
                    .worker
                    .as_ref()
                    .and_then(|w| w.slot_of(s))
                    .ok_or_else(|| Error::Runtime(format!("device {dev} has no port `{s}`")))?;
                targets.push((s.clone(), dev, pack_role(task.id, slot)));
            }
            if targets.iter().all(|(_, d, _)| !self.nodes[d].inbox.is_full()) {
                let tag = st.next_frame as u64;
                for (s, dev, role) in targets {
                    let frame = st.sources[&s][st.next_frame].clone();
                    let env = Envelope {
                        msg: Message::data(self.config.stream_id, tag, CAMERA, role, frame),
                        account: Account {
                            origin: now,
                            breakdown: Breakdown::default(),
                        },
                    };
                    if let Ok(Push::AlmostFull) = self.nodes.get_mut(&dev).unwrap().inbox.push(env) {
                        st.almost_full += 1;
                        self.start_cooldown(st);
                    }
                    self.schedule(now, Event::Work(dev));
                }
                st.next_frame += 1;
                recorded = true;
            }
        }
        if recorded {
            st.idle_ticks = 0;
        } else {
            st.drops += 1;
            st.idle_ticks += 1;
            if st.idle_ticks > STALL_TICKS {
                return Err(Error::Runtime(format!(
                    "pipeline stalled after {} of {} frames",
                    st.next_frame, st.frames
                )));
            }
        }
        if st.next_frame < st.frames {
            self.schedule((i + 1) as f64 / self.config.fps, Event::Tick(i + 1));
        }
        Ok(())
    }

    fn start_cooldown(&mut self, st: &mut RunState<'_>) {
        st.cooldown_until = self.clock + self.config.cooldown_seconds;
    }

    fn port_part(&self, table: &IpTable, source: DeviceId, port: &str) -> Option<(usize, usize)> {
        let task = self.tasks.get(&table.task_of(source)?)?;
        let s = task.split.as_ref()?;
        task.is_partial(port).then_some((s.part_index, s.part_count))
    }

    fn on_work(&mut self, d: DeviceId, st: &mut RunState<'_>) -> Result<()> {
        self.drain_control(d, st)?;
        let node = self.nodes.get_mut(&d).unwrap();
        if node.busy || !node.outbox.is_empty() {
            return Ok(());
        }
        let Some(env) = node.inbox.pop() else {
            return Ok(());
        };
        let waiters = std::mem::take(&mut node.waiters);
        let now = self.clock;
        for w in waiters {
            self.schedule(now, Event::Flush(w));
        }
        let node = &self.nodes[&d];
        let (task_id, slot) = unpack_role(env.msg.dest_role);
        if node.table.task_of(d) != Some(task_id) {
            log::warn!("device {d}: dropped tag {} for task {task_id}", env.msg.tag);
            st.misrouted += 1;
            self.schedule(now, Event::Work(d));
            return Ok(());
        }
        let port = node
            .worker
            .as_ref()
            .and_then(|w| w.ports().get(slot).cloned())
            .ok_or_else(|| Error::Runtime(format!("device {d}: no input slot {slot}")))?;
        let part = self.port_part(&node.table, env.msg.source, &port);
        let mut comm = 0.0;
        if self.config.simulate_latency && env.msg.source != CAMERA {
            let bytes = node
                .table
                .task_of(env.msg.source)
                .and_then(|t| self.tasks.get(&t))
                .and_then(|t| t.timing.out_bytes.get(&port).copied())
                .unwrap_or(0);
            comm = comm_latency(bytes, &self.config.comm);
        }
        let mut account = env.account;
        account.breakdown.comm += comm;
        let tensor = env
            .msg
            .tensor()
            .cloned()
            .ok_or_else(|| Error::Runtime("data message without tensor".into()))?;
        let node = self.nodes.get_mut(&d).unwrap();
        let worker = node.worker.as_mut().unwrap();
        let (out, spent) = worker
            .accept(&port, env.msg.tag, part, tensor, account)
            .map_err(|e| Error::Runtime(format!("device {d}: {e}")))?;
        let dur = comm + spent.total();
        node.busy = true;
        node.busy_seconds += dur;
        node.pending = out;
        self.schedule(now + dur, Event::Done(d));
        Ok(())
    }

    fn drain_control(&mut self, d: DeviceId, st: &mut RunState<'_>) -> Result<()> {
        let recorder = self.recorder_device()?;
        while let Some(msg) = self.nodes.get_mut(&d).unwrap().control.pop_front() {
            if msg.kind == MessageKind::AlmostFull {
                self.nodes.get_mut(&d).unwrap().almost_full_received += 1;
                if d == recorder {
                    self.start_cooldown(st);
                }
            }
        }
        Ok(())
    }

    fn on_done(&mut self, d: DeviceId, st: &mut RunState<'_>) -> Result<()> {
        let now = self.clock;
        let node = self.nodes.get_mut(&d).unwrap();
        node.busy = false;
        let out = std::mem::take(&mut node.pending);
        let table = node.table.clone();
        let from_task = node.worker.as_ref().map(|w| w.task().id);
        for e in out {
            if self.graph.outputs.contains(&e.layer) {
                let o = st.partial.entry(e.tag).or_default();
                o.insert(e.layer.clone(), e.value.clone());
                if o.len() == self.graph.outputs.len() {
                    let o = st.partial.remove(&e.tag).unwrap();
                    st.done.insert(e.tag, (o, now, e.account));
                }
                continue;
            }
            for (task, slot) in self.destinations(&e.layer, e.tag, from_task)? {
                let dev = table
                    .device_for_task(task)
                    .ok_or_else(|| Error::Runtime(format!("task {task} has no device")))?;
                let msg = Message::data(
                    self.config.stream_id,
                    e.tag,
                    d,
                    pack_role(task, slot),
                    e.value.clone(),
                );
                self.nodes.get_mut(&d).unwrap().outbox.push_back((
                    dev,
                    Envelope {
                        msg,
                        account: e.account,
                    },
                ));
            }
        }
        self.flush(d, st)
    }

    /// Tasks (and input slots) that receive `layer`'s value for `tag`: every
    /// group that consumes it, one replica per group chosen by tag.
    fn destinations(&self, layer: &str, tag: u64, from: Option<usize>) -> Result<Vec<(usize, usize)>> {
        let mut groups: BTreeMap<(usize, usize), Vec<&Task>> = BTreeMap::new();
        for c in self.graph.consumers(layer) {
            for t in self.tasks.values() {
                if Some(t.id) != from && t.computes(c) && !t.computes(layer) {
                    let g = groups.entry(t.group_key()).or_default();
                    if !g.iter().any(|x| x.id == t.id) {
                        g.push(t);
                    }
                }
            }
        }
        let mut out = Vec::new();
        for (_, mut g) in groups {
            g.sort_by_key(|t| t.replica.index);
            let t = g[dispatch_replica(tag, g.len())];
            let slot = self
                .nodes
                .values()
                .filter_map(|n| n.worker.as_ref())
                .find(|w| w.task().id == t.id)
                .and_then(|w| w.slot_of(layer))
                .ok_or_else(|| Error::Runtime(format!("task {} has no port `{layer}`", t.id)))?;
            out.push((t.id, slot));
        }
        Ok(out)
    }

    /// Devices whose tasks feed `d`'s task, plus the camera for the recorder.
    fn predecessors(&self, d: DeviceId) -> Vec<DeviceId> {
        let node = &self.nodes[&d];
        let Some(w) = &node.worker else {
            return Vec::new();
        };
        let mut out = BTreeSet::new();
        for port in w.ports() {
            if self.graph.inputs.contains(port) {
                out.insert(CAMERA);
                continue;
            }
            for t in self.tasks.values() {
                if t.id != w.task().id && t.computes(port) {
                    if let Some(dev) = node.table.device_for_task(t.id) {
                        out.insert(dev);
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    fn flush(&mut self, d: DeviceId, st: &mut RunState<'_>) -> Result<()> {
        let now = self.clock;
        loop {
            let node = self.nodes.get_mut(&d).unwrap();
            let Some((dest, _)) = node.outbox.front() else {
                break;
            };
            let dest = *dest;
            if self.nodes[&dest].inbox.is_full() {
                self.nodes.get_mut(&dest).unwrap().waiters.insert(d);
                return Ok(());
            }
            let (_, env) = self.nodes.get_mut(&d).unwrap().outbox.pop_front().unwrap();
            let msg = self.transmit(d, dest, &env.msg)?;
            let pushed = self
                .nodes
                .get_mut(&dest)
                .unwrap()
                .inbox
                .push(Envelope {
                    msg,
                    account: env.account,
                })
                .map_err(|_| Error::Runtime("inbox overflow".into()))?;
            if pushed == Push::AlmostFull {
                st.almost_full += 1;
                for p in self.predecessors(dest) {
                    if p == CAMERA {
                        self.start_cooldown(st);
                        continue;
                    }
                    let signal = Message::control(MessageKind::AlmostFull, self.config.stream_id, dest, Vec::new());
                    let signal = self.transmit(dest, p, &signal)?;
                    self.nodes.get_mut(&p).unwrap().control.push_back(signal);
                    self.schedule(now, Event::Work(p));
                }
            }
            self.schedule(now, Event::Work(dest));
        }
        self.schedule(now, Event::Work(d));
        Ok(())
    }
}

/// Feeds the same source to every stream input: the usual single-camera case.
pub fn single_source(graph: &ModelGraph, frames: Vec<Tensor>) -> Result<BTreeMap<String, Vec<Tensor>>> {
    let [s] = graph.inputs.as_slice() else {
        return Err(Error::Graph(format!("expected one source, graph has {}", graph.inputs.len())));
    };
    Ok(BTreeMap::from([(s.clone(), frames)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_clip, ModelParams};
    use crate::model_ir::{LayerKind, LayerSpec, TensorShape};
    use crate::partition::task_assign;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain() -> ModelGraph {
        let mut g = ModelGraph::new("chain", 5);
        g.push(LayerSpec::new(
            "in",
            LayerKind::Source {
                shape: TensorShape::new(vec![32]).unwrap(),
            },
            &[],
        ));
        let mut prev = "in".to_string();
        for i in 1..=4 {
            let name = format!("fc_{i}");
            g.push(LayerSpec::new(&name, LayerKind::FullyConnected { out_size: 64 }, &[&prev]));
            let r = format!("relu_{i}");
            g.push(LayerSpec::new(&r, LayerKind::ReLU, &[&name]));
            prev = r;
        }
        g.push(LayerSpec::new("out", LayerKind::Sink, &[&prev]));
        g.validate().unwrap()
    }

    fn frames(n: usize, len: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|_| Tensor::vector((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn chain_matches_reference_on_every_size() {
        let g = Arc::new(chain());
        let set = task_assign(&g, 4, &PlanConfig::default()).unwrap();
        let f = frames(12, 32);
        let want = run_clip(&g, &ModelParams::generate(&g).unwrap(), &single_source(&g, f.clone()).unwrap(), ClipSpec::default()).unwrap();
        for a in &set.assignments {
            for transport in [Transport::InProcess, Transport::Loopback] {
                let cfg = ClusterConfig {
                    transport,
                    ..ClusterConfig::default()
                };
                let mut c = Cluster::start(g.clone(), a, cfg).unwrap();
                let run = c.run_stream(&single_source(&g, f.clone()).unwrap()).unwrap();
                assert_eq!(run.outputs.len(), want.len());
                for (k, o) in &run.outputs {
                    assert!(o["out"].bit_eq(&want[*k as usize]["out"]));
                }
            }
        }
    }

    #[test]
    fn duplicate_device_is_rejected() {
        let g = Arc::new(chain());
        let set = task_assign(&g, 2, &PlanConfig::default()).unwrap();
        let err = Cluster::start_on(g, set.get(2).unwrap(), &[4, 4], ClusterConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn zero_frames_give_no_outputs() {
        let g = Arc::new(chain());
        let set = task_assign(&g, 1, &PlanConfig::default()).unwrap();
        let mut c = Cluster::start(g.clone(), set.get(1).unwrap(), ClusterConfig::default()).unwrap();
        let run = c.run_stream(&single_source(&g, Vec::new()).unwrap()).unwrap();
        assert!(run.outputs.is_empty());
        assert_eq!(run.metrics.ips, 0.0);
    }
}
