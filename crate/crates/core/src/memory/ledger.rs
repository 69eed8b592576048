use std::fmt;

use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Parameters,
    Gradients,
    OptimizerState,
    Activations,
    ZCache,
    Data,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Parameters,
        Category::Gradients,
        Category::OptimizerState,
        Category::Activations,
        Category::ZCache,
        Category::Data,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Parameters => "parameters",
            Category::Gradients => "gradients",
            Category::OptimizerState => "optimizer_state",
            Category::Activations => "activations",
            Category::ZCache => "z_cache",
            Category::Data => "data",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEvent {
    pub ordinal: u64,
    pub category: Category,
    pub delta: i64,
    pub phase: &'static str,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error(
    "memory budget exceeded during {phase}: {category} +{requested} B would bring the total to {} B (budget {budget} B, event #{ordinal})",
    .current_total + .requested
)]
pub struct BudgetExceeded {
    pub category: Category,
    pub phase: &'static str,
    pub requested: u64,
    pub current_total: u64,
    pub budget: u64,
    /// Ordinal the rejected event would have had.
    pub ordinal: u64,
}

/// Byte ledger of live training memory by category with a running peak.
#[derive(Clone, Debug, Default)]
pub struct MemoryLedger {
    current: [u64; 6],
    peak: u64,
    events: Vec<LedgerEvent>,
    budget: Option<u64>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_budget(budget: Option<u64>) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }

    pub fn current(&self, c: Category) -> u64 {
        self.current[c.slot()]
    }

    pub fn total(&self) -> u64 {
        self.current.iter().sum()
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Install a budget; fails at once if the live total already exceeds it.
    pub fn enforce_budget(&mut self, budget: Option<u64>) -> Result<(), BudgetExceeded> {
        self.budget = budget;
        match budget {
            Some(b) if self.total() > b => Err(BudgetExceeded {
                category: Category::ALL
                    .into_iter()
                    .max_by_key(|c| self.current(*c))
                    .unwrap_or(Category::Data),
                phase: "enforce",
                requested: 0,
                current_total: self.total(),
                budget: b,
                ordinal: self.events.len() as u64,
            }),
            _ => Ok(()),
        }
    }

    pub fn record(&mut self, category: Category, delta: i64, phase: &'static str) -> Result<()> {
        let slot = category.slot();
        let ordinal = self.events.len() as u64;
        if delta < 0 {
            let dec = delta.unsigned_abs();
            if dec > self.current[slot] {
                return Err(Error::Accounting(format!(
                    "{category} would go negative: {} - {dec} (phase {phase}, event #{ordinal})",
                    self.current[slot]
                )));
            }
            self.current[slot] -= dec;
        } else {
            let inc = delta as u64;
            let total = self.total();
            if let Some(budget) = self.budget {
                if total + inc > budget {
                    return Err(BudgetExceeded {
                        category,
                        phase,
                        requested: inc,
                        current_total: total,
                        budget,
                        ordinal,
                    }
                    .into());
                }
            }
            self.current[slot] += inc;
            self.peak = self.peak.max(total + inc);
        }
        self.events.push(LedgerEvent {
            ordinal,
            category,
            delta,
            phase,
        });
        Ok(())
    }

    pub fn alloc(&mut self, category: Category, bytes: u64, phase: &'static str) -> Result<()> {
        self.record(category, bytes as i64, phase)
    }

    pub fn free(&mut self, category: Category, bytes: u64, phase: &'static str) -> Result<()> {
        self.record(category, -(bytes as i64), phase)
    }

    /// Human-readable `category current peak` table. The peak column holds
    /// the per-category maximum seen while replaying the event log.
    pub fn report_table(&self) -> String {
        let mut cat_peak = [0u64; 6];
        let mut cur = [0i64; 6];
        for e in &self.events {
            let s = e.category.slot();
            cur[s] += e.delta;
            cat_peak[s] = cat_peak[s].max(cur[s] as u64);
        }
        let mut out = format!("{:<16} {:>14} {:>14}\n", "category", "current", "peak");
        for c in Category::ALL {
            out += &format!(
                "{:<16} {:>14} {:>14}\n",
                c.name(),
                self.current(c),
                cat_peak[c.slot()]
            );
        }
        out += &format!("{:<16} {:>14} {:>14}\n", "total", self.total(), self.peak);
        out
    }

    /// Event log as CSV: `ordinal,category,delta,phase`.
    pub fn events_csv(&self) -> String {
        let mut out = String::from("ordinal,category,delta,phase\n");
        for e in &self.events {
            out += &format!("{},{},{},{}\n", e.ordinal, e.category, e.delta, e.phase);
        }
        out
    }
}

/// Peak of the running total obtained by replaying an event log from zero.
pub fn replay_peak(events: &[LedgerEvent]) -> u64 {
    let mut total: i64 = 0;
    let mut peak: i64 = 0;
    for e in events {
        total += e.delta;
        peak = peak.max(total);
    }
    peak as u64
}
