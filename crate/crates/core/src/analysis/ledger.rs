//! Per-worker byte accounting with high-water marks.
//!
//! Categories follow the memory table: parameters, gradients, activations and
//! rotation buffers. Per-step kernel scratch (reorder partials, backward
//! temporaries) goes to `Other` and is reported separately from the tracked
//! total. A message in flight during a blocking in-place exchange is recorded
//! only in `in_flight_peak` and never counts towards duplication.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Category {
    Param,
    Grad,
    Activation,
    CommBuffer,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Param,
        Category::Grad,
        Category::Activation,
        Category::CommBuffer,
        Category::Other,
    ];

    fn idx(self) -> usize {
        self as usize
    }

    /// Param, Grad and CommBuffer: the parameter-state footprint of a unit.
    pub fn is_param_state(self) -> bool {
        matches!(
            self,
            Category::Param | Category::Grad | Category::CommBuffer
        )
    }

    pub fn is_tracked(self) -> bool {
        self != Category::Other
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Param => "Param",
            Category::Grad => "Grad",
            Category::Activation => "Activation",
            Category::CommBuffer => "CommBuffer",
            Category::Other => "Other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct UnitUsage {
    current: [u64; 5],
    state_peak: u64,
}

impl UnitUsage {
    fn state(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.is_param_state())
            .map(|c| self.current[c.idx()])
            .sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    current: [u64; 5],
    peak: [u64; 5],
    tracked_peak: u64,
    state_peak: u64,
    total_peak: u64,
    in_flight_peak: u64,
    units: BTreeMap<usize, UnitUsage>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, cat: Category, bytes: u64) {
        self.current[cat.idx()] += bytes;
        self.refresh_peaks();
    }

    pub fn free(&mut self, cat: Category, bytes: u64) {
        let cur = &mut self.current[cat.idx()];
        *cur = cur.checked_sub(bytes).unwrap_or_else(|| {
            panic!("ledger underflow: freeing {bytes} B of {cat} with {cur} B live")
        });
    }

    /// Allocation attributed to one layer unit (for per-unit parameter-state peaks).
    pub fn alloc_unit(&mut self, unit: usize, cat: Category, bytes: u64) {
        let u = self.units.entry(unit).or_default();
        u.current[cat.idx()] += bytes;
        u.state_peak = u.state_peak.max(u.state());
        self.alloc(cat, bytes);
    }

    pub fn free_unit(&mut self, unit: usize, cat: Category, bytes: u64) {
        let u = self
            .units
            .get_mut(&unit)
            .unwrap_or_else(|| panic!("ledger: free on unknown unit {unit}"));
        let cur = &mut u.current[cat.idx()];
        *cur = cur
            .checked_sub(bytes)
            .unwrap_or_else(|| panic!("ledger underflow on unit {unit}: {bytes} B of {cat}"));
        self.free(cat, bytes);
    }

    /// Records a transient message of `bytes` travelling during a blocking exchange.
    pub fn in_flight(&mut self, bytes: u64) {
        self.in_flight_peak = self.in_flight_peak.max(bytes);
    }

    fn refresh_peaks(&mut self) {
        for c in Category::ALL {
            self.peak[c.idx()] = self.peak[c.idx()].max(self.current[c.idx()]);
        }
        self.tracked_peak = self.tracked_peak.max(self.current_tracked());
        self.state_peak = self.state_peak.max(self.current_state());
        self.total_peak = self.total_peak.max(self.current_total());
    }

    pub fn current(&self, cat: Category) -> u64 {
        self.current[cat.idx()]
    }

    pub fn peak(&self, cat: Category) -> u64 {
        self.peak[cat.idx()]
    }

    pub fn current_state(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.is_param_state())
            .map(|c| self.current[c.idx()])
            .sum()
    }

    pub fn current_tracked(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.is_tracked())
            .map(|c| self.current[c.idx()])
            .sum()
    }

    pub fn current_total(&self) -> u64 {
        self.current.iter().sum()
    }

    /// High-water mark of Param + Grad + CommBuffer.
    pub fn peak_state(&self) -> u64 {
        self.state_peak
    }

    /// High-water mark of everything except `Other`.
    pub fn peak_tracked(&self) -> u64 {
        self.tracked_peak
    }

    pub fn peak_total(&self) -> u64 {
        self.total_peak
    }

    pub fn in_flight_peak(&self) -> u64 {
        self.in_flight_peak
    }

    pub fn unit_current(&self, unit: usize, cat: Category) -> u64 {
        self.units.get(&unit).map_or(0, |u| u.current[cat.idx()])
    }

    /// High-water mark of Param + Grad + CommBuffer attributed to `unit`.
    pub fn unit_state_peak(&self, unit: usize) -> u64 {
        self.units.get(&unit).map_or(0, |u| u.state_peak)
    }

    pub fn units(&self) -> impl Iterator<Item = usize> + '_ {
        self.units.keys().copied()
    }

    /// True when only persistent parameter and gradient storage is still live.
    pub fn only_persistent_live(&self) -> bool {
        [Category::Activation, Category::CommBuffer, Category::Other]
            .iter()
            .all(|&c| self.current(c) == 0)
    }
}

/// `N * per_worker_peak - serial_peak`: bytes held system-wide beyond the single-worker run.
pub fn duplication(n: usize, worker_peak: u64, serial_peak: u64) -> i64 {
    n as i64 * worker_peak as i64 - serial_peak as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaks_track_high_water_marks() {
        let mut l = MemoryLedger::new();
        l.alloc(Category::Activation, 100);
        l.alloc(Category::Other, 50);
        l.free(Category::Activation, 100);
        l.alloc(Category::Activation, 30);
        assert_eq!(l.peak(Category::Activation), 100);
        assert_eq!(l.current(Category::Activation), 30);
        assert_eq!(l.peak_total(), 150);
        assert_eq!(l.peak_tracked(), 100);
        assert!(l.peak(Category::Activation) >= l.current(Category::Activation));
    }

    #[test]
    fn unit_state_peak_counts_param_grad_and_buffers() {
        let mut l = MemoryLedger::new();
        l.alloc_unit(3, Category::Param, 8);
        l.alloc_unit(3, Category::Grad, 8);
        l.alloc_unit(3, Category::CommBuffer, 8);
        l.free_unit(3, Category::CommBuffer, 8);
        l.alloc_unit(4, Category::Param, 100);
        assert_eq!(l.unit_state_peak(3), 24);
        assert_eq!(l.unit_current(3, Category::CommBuffer), 0);
        assert_eq!(l.peak_state(), 116);
    }

    #[test]
    fn in_flight_does_not_touch_categories() {
        let mut l = MemoryLedger::new();
        l.in_flight(64);
        assert_eq!(l.peak_total(), 0);
        assert_eq!(l.in_flight_peak(), 64);
    }

    #[test]
    #[should_panic(expected = "ledger underflow")]
    fn underflow_is_a_bug() {
        let mut l = MemoryLedger::new();
        l.free(Category::Grad, 1);
    }

    #[test]
    fn duplication_metric() {
        assert_eq!(duplication(8, 36, 8), 280);
        assert_eq!(duplication(4, 2, 8), 0);
    }
}
