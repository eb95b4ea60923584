//! Memory accounting, analytic memory table, cost formulas and timeline simulation.

pub mod cost;
pub mod instrument;
pub mod ledger;
pub mod table1;
pub mod timeline;

pub use cost::{
    ring_allgather_ticks, rotation_comm_ticks, rotation_comm_time, sharded_gemm_time, CostModel,
};
pub use instrument::{
    batch_sweep, collinear, ledger_run, unit_costs, LedgerRow, LedgerRun, RunStrategy, SweepPoint,
};
pub use ledger::{duplication, Category, MemoryLedger};
pub use table1::{table1_all, table1_memory, MemoryInputs, Strategy, Table1Row};
pub use timeline::{
    simulate_timeline, Event, Schedule, Stream, Timeline, TimelineSummary, UnitCost,
};
