use serde::Serialize;

use super::PortModel;
use crate::error::{Result, TmuError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TaskKind {
    Load,
    Process,
    Store,
    Tile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Port {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Task {
    pub kind: TaskKind,
    pub stage: usize,
    pub segment: usize,
    pub engine: u32,
    pub duration: u64,
    pub port: Option<Port>,
    pub deps: Vec<usize>,
}

impl Task {
    pub fn new(kind: TaskKind, stage: usize, segment: usize, engine: u32, duration: u64) -> Self {
        let port = match kind {
            TaskKind::Load => Some(Port::Read),
            TaskKind::Store => Some(Port::Write),
            _ => None,
        };
        Self { kind, stage, segment, engine, duration, port, deps: Vec::new() }
    }

    pub fn after(mut self, deps: impl IntoIterator<Item = usize>) -> Self {
        self.deps.extend(deps);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Timeline {
    pub start: Vec<u64>,
    pub end: Vec<u64>,
    pub makespan: u64,
}

fn channel(ports: PortModel, p: Port) -> usize {
    match (ports, p) {
        (PortModel::Shared, _) | (PortModel::Split, Port::Read) => 0,
        (PortModel::Split, Port::Write) => 1,
    }
}

/// Runs the task graph to completion. A task starts once its dependencies
/// have finished and, for transfers, its DRAM channel is idle. On a shared
/// channel, competing loads and stores are granted in alternation; with
/// two TMUs in steady state one is loading while the other stores, so this
/// is round-robin between them.
pub fn schedule_tasks(tasks: &[Task], ports: PortModel) -> Result<Timeline> {
    let n = tasks.len();
    let mut end: Vec<Option<u64>> = vec![None; n];
    let mut start = vec![0u64; n];
    let mut pending: Vec<usize> = (0..n).collect();
    let mut busy: [Option<u64>; 2] = [None; 2];
    let mut last_grant: [Option<Port>; 2] = [None; 2];
    let mut t = 0u64;
    loop {
        loop {
            let done = |d: &usize| end[*d].is_some_and(|e| e <= t);
            let ready: Vec<usize> = pending.iter().copied().filter(|&i| tasks[i].deps.iter().all(done)).collect();
            let mut started = Vec::new();
            for &i in &ready {
                if tasks[i].port.is_none() {
                    started.push(i);
                }
            }
            for ch in 0..2 {
                if busy[ch].is_some_and(|e| e > t) {
                    continue;
                }
                let want: Vec<usize> =
                    ready.iter().copied().filter(|&i| tasks[i].port.is_some_and(|p| channel(ports, p) == ch)).collect();
                let Some(&first) = want.first() else { continue };
                let pick = want.iter().copied().find(|&i| tasks[i].port != last_grant[ch]).unwrap_or(first);
                last_grant[ch] = tasks[pick].port;
                busy[ch] = Some(t + tasks[pick].duration);
                started.push(pick);
            }
            if started.is_empty() {
                break;
            }
            for &i in &started {
                start[i] = t;
                end[i] = Some(t + tasks[i].duration);
            }
            pending.retain(|i| end[*i].is_none());
        }
        if pending.is_empty() {
            break;
        }
        let next = end.iter().flatten().copied().filter(|&e| e > t).min();
        match next {
            Some(e) => t = e,
            None => return Err(TmuError::Deadlock { cycle: t, pending: pending.len() }),
        }
    }
    let end: Vec<u64> = end.into_iter().map(|e| e.unwrap_or(0)).collect();
    let makespan = end.iter().copied().max().unwrap_or(0);
    Ok(Timeline { start, end, makespan })
}
