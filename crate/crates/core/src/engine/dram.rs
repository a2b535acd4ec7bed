use serde::{Deserialize, Serialize};

use crate::error::{Result, TmuError};

/// Bandwidth plus fixed issue latency per AXI transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DramModel {
    pub bytes_per_cycle: u32,
    pub fixed_latency: u32,
    /// Longest single transaction; longer contiguous runs are split.
    pub max_burst_bytes: u32,
}

impl Default for DramModel {
    fn default() -> Self {
        Self { bytes_per_cycle: 16, fixed_latency: 4, max_burst_bytes: 4096 }
    }
}

/// A contiguous byte range in simulated memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Run {
    pub addr: u64,
    pub len: u64,
}

impl Run {
    pub fn new(addr: u64, len: u64) -> Self {
        Self { addr, len }
    }

    pub fn end(&self) -> u64 {
        self.addr + self.len
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferCost {
    pub bytes: u64,
    pub bursts: u64,
    pub cycles: u64,
}

/// Sorts runs by address and merges touching ones.
pub fn coalesce(runs: &[Run]) -> Vec<Run> {
    let mut v: Vec<Run> = runs.iter().copied().filter(|r| r.len > 0).collect();
    v.sort_unstable_by_key(|r| r.addr);
    let mut out: Vec<Run> = Vec::with_capacity(v.len());
    for r in v {
        match out.last_mut() {
            Some(last) if last.end() >= r.addr => {
                let end = last.end().max(r.end());
                last.len = end - last.addr;
            }
            _ => out.push(r),
        }
    }
    out
}

impl DramModel {
    pub fn validate(&self) -> Result<()> {
        if self.bytes_per_cycle == 0 || self.max_burst_bytes == 0 {
            return Err(TmuError::InvalidParam("DRAM bandwidth and burst size must be positive".into()));
        }
        Ok(())
    }

    /// `ceil(n / bytes_per_cycle) + fixed_latency × bursts`.
    pub fn transfer_cycles(&self, bytes: u64, bursts: u64) -> u64 {
        bytes.div_ceil(self.bytes_per_cycle as u64) + self.fixed_latency as u64 * bursts
    }

    pub fn bursts(&self, runs: &[Run]) -> u64 {
        coalesce(runs).iter().map(|r| r.len.div_ceil(self.max_burst_bytes as u64)).sum()
    }

    /// Cost of issuing `runs` as given, one transaction chain each.
    pub fn cost_uncoalesced(&self, runs: &[Run]) -> TransferCost {
        let bytes = runs.iter().map(|r| r.len).sum();
        let bursts = runs.iter().map(|r| r.len.div_ceil(self.max_burst_bytes as u64)).sum();
        TransferCost { bytes, bursts, cycles: self.transfer_cycles(bytes, bursts) }
    }

    /// Cost after merging touching runs into shared transactions.
    pub fn cost(&self, runs: &[Run]) -> TransferCost {
        let merged = coalesce(runs);
        let bytes = merged.iter().map(|r| r.len).sum();
        let bursts = merged.iter().map(|r| r.len.div_ceil(self.max_burst_bytes as u64)).sum();
        TransferCost { bytes, bursts, cycles: self.transfer_cycles(bytes, bursts) }
    }
}
