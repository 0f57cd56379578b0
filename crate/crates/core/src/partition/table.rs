//! Human-readable plan tables.

use std::fmt::Write;

use super::{Assignment, AssignmentSet, Task};

/// Compresses a layer list to "first .. last (count)" when long.
fn layer_summary(t: &Task) -> String {
    let mut names: Vec<String> = t
        .layers
        .iter()
        .map(|l| {
            if t.is_partial(l) {
                let s = t.split.as_ref().unwrap();
                format!("{l}[{}/{}]", s.part_index + 1, s.part_count)
            } else {
                l.clone()
            }
        })
        .collect();
    if names.len() > 6 {
        let n = names.len();
        let last = names.pop().unwrap();
        names = vec![names[0].clone(), format!("... {} more ...", n - 2), last];
    }
    names.join(", ")
}

/// One block per device count: device, task, parallelism, timings and the
/// layers each device runs. Devices that reload weights are marked `R`.
pub fn dump_assignment(a: &Assignment) -> String {
    let mut out = String::new();
    let p = &a.predicted;
    let _ = writeln!(
        out,
        "n={}  ips={:.4}  t_forward={:.3}s  reload/inf={:.3}s",
        a.device_count, p.ips, p.t_forward, p.reload_seconds
    );
    let _ = writeln!(
        out,
        "  {:>3} {:>4} {:<22} {:>8} {:>9} {:>1}  layers",
        "dev", "task", "parallelism", "load s", "stage s", ""
    );
    for d in 1..=a.device_count as u16 {
        match a.tasks.get(&d) {
            Some(t) => {
                let _ = writeln!(
                    out,
                    "  {:>3} {:>4} {:<22} {:>8.2} {:>9.4} {:>1}  {}",
                    d,
                    t.id,
                    t.parallelism().to_string(),
                    p.load_seconds.get(&d).copied().unwrap_or(0.0),
                    p.stage_seconds.get(&d).copied().unwrap_or(0.0),
                    if t.timing.reloads() { "R" } else { "" },
                    layer_summary(t)
                );
                if t.timing.reloads() {
                    for (i, set) in t.timing.resident_sets.iter().enumerate() {
                        let _ = writeln!(
                            out,
                            "  {:>8} set {} ({:.2}s load): {} .. {}",
                            "",
                            i,
                            t.timing.set_load_seconds[i],
                            set.first().map_or("", String::as_str),
                            set.last().map_or("", String::as_str)
                        );
                    }
                }
            }
            None => {
                let _ = writeln!(out, "  {d:>3}    - idle");
            }
        }
    }
    out
}

pub fn plan_dump(set: &AssignmentSet) -> String {
    let mut out = format!("plan for `{}`, 1..={} devices\n", set.model, set.n_max);
    for a in &set.assignments {
        out.push('\n');
        out.push_str(&dump_assignment(a));
    }
    out
}
