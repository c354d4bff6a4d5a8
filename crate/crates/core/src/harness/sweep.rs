use std::collections::BTreeSet;
use std::path::PathBuf;

use super::manifest::RunManifest;
use super::run::{run_condition, RunOptions, DONE_FILE};
use crate::corpus::ConditionSpec;
use crate::decipher::Regime;
use crate::error::{Error, Result};
use crate::lm::Objective;

#[derive(Debug, Clone, Default)]
pub struct SweepGrid {
    pub conditions: Vec<ConditionSpec>,
    pub objectives: Vec<Objective>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepSummary {
    /// Every run directory of the grid, in grid order.
    pub runs: Vec<PathBuf>,
    /// Cells trained (or continued) by this call.
    pub executed: usize,
    /// Cells already complete.
    pub skipped: usize,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.conditions.len() * self.objectives.len() * self.regimes.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One manifest per cell, all sharing the template's settings.
    pub fn manifests(&self, template: &RunManifest) -> Result<Vec<RunManifest>> {
        if self.is_empty() {
            return Err(Error::InvalidConfig("sweep grid is empty".into()));
        }
        let mut out = Vec::with_capacity(self.len());
        let mut keys = BTreeSet::new();
        for c in &self.conditions {
            for &objective in &self.objectives {
                for &regime in &self.regimes {
                    for &seed in &self.seeds {
                        let mut m = template.clone();
                        m.condition = c.clone();
                        m.objective = objective;
                        m.regime = regime;
                        m.seed = seed;
                        let m = m.normalized();
                        m.validate()?;
                        if keys.insert(m.cell_key()) {
                            out.push(m);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Runs every incomplete cell of the grid, one after another. Interrupted
/// cells are resumed from their last checkpoint.
pub fn sweep(grid: &SweepGrid, template: &RunManifest) -> Result<SweepSummary> {
    let mut summary = SweepSummary::default();
    for m in grid.manifests(template)? {
        let dir = m.run_dir();
        let finished = dir.join(DONE_FILE).exists();
        // Finished cells still go through the manifest check.
        run_condition(
            &m,
            RunOptions {
                resume: true,
                stop_after: None,
            },
        )?;
        if finished {
            summary.skipped += 1;
        } else {
            summary.executed += 1;
        }
        summary.runs.push(dir);
    }
    Ok(summary)
}
