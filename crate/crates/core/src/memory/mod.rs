//! Byte accounting of training memory and analytic peak estimation.

mod estimate;
mod ledger;

pub use estimate::{compare_modes, estimate_peak, ConfigEstimate, EstimateConfig, ModeComparison};
pub use ledger::{replay_peak, BudgetExceeded, Category, LedgerEvent, MemoryLedger};
