//! Per-layer pipeline timestamps, shared by the simulator and the executor.

use serde::{Deserialize, Serialize};

use crate::time::{as_micros, Micros};

/// Timestamps of one layer, relative to execution start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTiming {
    #[serde(with = "as_micros")]
    pub io_start: Micros,
    #[serde(with = "as_micros")]
    pub io_end: Micros,
    /// The compute stage starts by decompressing, so this equals
    /// `compute_start`.
    #[serde(with = "as_micros")]
    pub decode_start: Micros,
    #[serde(with = "as_micros")]
    pub decode_end: Micros,
    #[serde(with = "as_micros")]
    pub compute_start: Micros,
    #[serde(with = "as_micros")]
    pub compute_end: Micros,
    /// `compute_start - compute_end` of the previous layer (or of time 0).
    #[serde(with = "as_micros")]
    pub stall: Micros,
    #[serde(default)]
    pub bytes_read: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StallSummary {
    #[serde(with = "as_micros")]
    pub total_stall: Micros,
    #[serde(with = "as_micros")]
    pub max_stall: Micros,
    /// Layers whose stall exceeded `threshold`.
    pub stalled_layers: Vec<usize>,
    #[serde(with = "as_micros")]
    pub threshold: Micros,
    pub idle_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub layers: Vec<LayerTiming>,
    #[serde(with = "as_micros")]
    pub makespan: Micros,
}

impl PipelineTrace {
    pub fn from_layers(layers: Vec<LayerTiming>) -> Self {
        let makespan = layers.last().map_or(Micros::ZERO, |l| l.compute_end);
        PipelineTrace { layers, makespan }
    }

    pub fn total_stall(&self) -> Micros {
        self.layers.iter().map(|l| l.stall).sum()
    }

    pub fn compute_busy(&self) -> Micros {
        self.layers.iter().map(|l| l.compute_end - l.compute_start).sum()
    }

    pub fn io_busy(&self) -> Micros {
        self.layers.iter().map(|l| l.io_end - l.io_start).sum()
    }

    pub fn bytes_read(&self) -> u64 {
        self.layers.iter().map(|l| l.bytes_read).sum()
    }

    /// Fraction of the makespan during which the compute stage was waiting.
    pub fn idle_fraction(&self) -> f64 {
        if self.makespan.0 <= 0 {
            return 0.0;
        }
        1.0 - self.compute_busy().0 as f64 / self.makespan.0 as f64
    }

    /// Stalls at or below `threshold` count as scheduling jitter.
    pub fn summary(&self, threshold: Micros) -> StallSummary {
        StallSummary {
            total_stall: self.total_stall(),
            max_stall: self.layers.iter().map(|l| l.stall).max().unwrap_or_default(),
            stalled_layers: self
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.stall > threshold)
                .map(|(i, _)| i)
                .collect(),
            threshold,
            idle_fraction: self.idle_fraction(),
        }
    }

    pub fn is_stall_free(&self) -> bool {
        self.layers.iter().all(|l| l.stall == Micros::ZERO)
    }

    /// Ordering invariants every trace must satisfy.
    pub fn check(&self) -> Result<(), String> {
        let mut prev_end = Micros::ZERO;
        let mut prev_io_start: Option<Micros> = None;
        for (j, l) in self.layers.iter().enumerate() {
            if l.io_end < l.io_start {
                return Err(format!("layer {j}: io ends before it starts"));
            }
            if l.io_end > l.compute_start {
                return Err(format!("layer {j}: compute starts before its IO ends"));
            }
            if l.compute_start < prev_end {
                return Err(format!("layer {j}: compute overlaps the previous layer"));
            }
            if l.stall != l.compute_start - prev_end {
                return Err(format!("layer {j}: stall disagrees with timestamps"));
            }
            if l.compute_end < l.compute_start {
                return Err(format!("layer {j}: compute ends before it starts"));
            }
            if prev_io_start.is_some_and(|p| l.io_start < p) {
                return Err(format!("layer {j}: IO issued out of layer order"));
            }
            prev_io_start = Some(l.io_start);
            prev_end = l.compute_end;
        }
        if self.makespan != prev_end {
            return Err("makespan differs from the last compute end".into());
        }
        Ok(())
    }
}
