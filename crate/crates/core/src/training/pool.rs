//! Per-class FIFO image pool that turns a stream of single patches into
//! single-class batches.

use std::collections::{BTreeMap, VecDeque};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmitRule {
    /// Emit once a queue holds more than `batch_size` items.
    #[default]
    StrictlyExceeds,
    /// Emit as soon as a queue holds `batch_size` items.
    Reaches,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LeftoverPolicy {
    /// Partial queues are cleared at epoch end and counted as dropped.
    #[default]
    Drop,
    /// Partial queues stay in the pool for the next epoch.
    Carry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub batch_size: usize,
    pub capacity: usize,
    pub emit_rule: EmitRule,
    pub leftover: LeftoverPolicy,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            capacity: 8,
            emit_rule: EmitRule::StrictlyExceeds,
            leftover: LeftoverPolicy::Drop,
        }
    }
}

impl PoolConfig {
    /// Largest queue length reachable before an emission.
    pub fn peak_len(&self) -> usize {
        match self.emit_rule {
            EmitRule::StrictlyExceeds => self.batch_size + 1,
            EmitRule::Reaches => self.batch_size,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.batch_size == 0 {
            return Err(crate::Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.peak_len() > self.capacity {
            return Err(crate::Error::Config(format!(
                "pool capacity {} cannot hold {} items before emitting",
                self.capacity,
                self.peak_len()
            )));
        }
        Ok(())
    }
}

/// Running totals for conservation checks: `offered = emitted + dropped + resident`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub offered: usize,
    pub emitted: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug)]
pub struct ImagePool<T> {
    config: PoolConfig,
    queues: BTreeMap<usize, VecDeque<T>>,
    stats: PoolStats,
}

impl<T> ImagePool<T> {
    pub fn new(config: PoolConfig) -> crate::Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            queues: BTreeMap::new(),
            stats: PoolStats::default(),
        })
    }

    pub fn config(&self) -> PoolConfig {
        self.config
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn len(&self, class_id: usize) -> usize {
        self.queues.get(&class_id).map_or(0, VecDeque::len)
    }

    pub fn resident(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.resident() == 0
    }

    /// Enqueues `item`; returns the oldest `batch_size` items of its class
    /// once the emit rule fires.
    pub fn offer(&mut self, class_id: usize, item: T) -> Option<Vec<T>> {
        let cfg = self.config;
        let queue = self.queues.entry(class_id).or_default();
        queue.push_back(item);
        self.stats.offered += 1;
        debug_assert!(queue.len() <= cfg.capacity);
        let fire = match cfg.emit_rule {
            EmitRule::StrictlyExceeds => queue.len() > cfg.batch_size,
            EmitRule::Reaches => queue.len() >= cfg.batch_size,
        };
        if fire {
            let batch: Vec<T> = queue.drain(..cfg.batch_size).collect();
            self.stats.emitted += batch.len();
            Some(batch)
        } else {
            None
        }
    }

    /// Epoch end: emits every remaining full batch (in class order), then
    /// applies the leftover policy to the partial queues.
    pub fn flush(&mut self) -> Vec<(usize, Vec<T>)> {
        let b = self.config.batch_size;
        let mut out = Vec::new();
        for (&class_id, queue) in self.queues.iter_mut() {
            while queue.len() >= b {
                let batch: Vec<T> = queue.drain(..b).collect();
                self.stats.emitted += batch.len();
                out.push((class_id, batch));
            }
            if self.config.leftover == LeftoverPolicy::Drop {
                self.stats.dropped += queue.len();
                queue.clear();
            }
        }
        out
    }
}
