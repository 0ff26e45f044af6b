use std::ops::{AddAssign, SubAssign};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{Family, OutcomeError};
use crate::data::SubjectRecord;
use crate::path::PathStats;

/// Tallies of the outcomes assigned to one (state, level) cell.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellStats {
    pub count: f64,
    pub sum: f64,
    pub sum_sq: f64,
    /// `sum ln(o!)`, only tallied for count data.
    pub log_fact: f64,
}

impl CellStats {
    fn add(&mut self, other: &CellStats) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.log_fact += other.log_fact;
    }

    fn sub(&mut self, other: &CellStats) {
        self.count -= other.count;
        self.sum -= other.sum;
        self.sum_sq -= other.sum_sq;
        self.log_fact -= other.log_fact;
    }
}

/// Additive sufficient statistics of a set of subjects given their latent
/// states and latent path segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSuffStats {
    pub num_states: usize,
    pub num_levels: usize,
    pub cells: Vec<CellStats>,
    /// Number of subjects whose first latent state is `k`.
    pub first_visit: Vec<f64>,
    /// Jump totals `sum N_lm`, row-major `l * K + m`.
    pub jumps: Vec<f64>,
    /// Occupancy totals `sum R_l`.
    pub holding: Vec<f64>,
}

impl OutcomeSuffStats {
    pub fn zeros(num_states: usize, num_levels: usize) -> Self {
        Self {
            num_states,
            num_levels,
            cells: vec![CellStats::default(); num_states * num_levels],
            first_visit: vec![0.0; num_states],
            jumps: vec![0.0; num_states * num_states],
            holding: vec![0.0; num_states],
        }
    }

    pub fn cell(&self, state: usize, level: usize) -> &CellStats {
        &self.cells[state * self.num_levels + level]
    }

    pub fn jumps(&self, from: usize, to: usize) -> f64 {
        self.jumps[from * self.num_states + to]
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|c| c.count == 0.0)
            && self.first_visit.iter().all(|c| *c == 0.0)
            && self.jumps.iter().all(|c| *c == 0.0)
            && self.holding.iter().all(|c| *c == 0.0)
    }

    /// Statistics of one subject.
    ///
    /// `states` holds the latent state at each observation and `paths` the
    /// path segment statistics of each interval between observations.
    pub fn from_subject(
        family: Family,
        num_states: usize,
        num_levels: usize,
        subject: &SubjectRecord,
        states: &[usize],
        paths: &[PathStats],
    ) -> Result<Self, OutcomeError> {
        let mut stats = Self::zeros(num_states, num_levels);
        stats.add_subject(family, subject, states, paths)?;
        Ok(stats)
    }

    /// Adds the observation and latent-state tallies of one subject.
    pub fn add_subject(
        &mut self,
        family: Family,
        subject: &SubjectRecord,
        states: &[usize],
        paths: &[PathStats],
    ) -> Result<(), OutcomeError> {
        let t = subject.len();
        if states.len() != t {
            return Err(OutcomeError::MisalignedInputs(format!(
                "subject {}: {} states for {t} observations",
                subject.id,
                states.len()
            )));
        }
        if paths.len() + 1 != t {
            return Err(OutcomeError::MisalignedInputs(format!(
                "subject {}: {} path segments for {t} observations",
                subject.id,
                paths.len()
            )));
        }
        let k = self.num_states;
        for (i, &s) in states.iter().enumerate() {
            let level = subject.level(i);
            if s >= k || level >= self.num_levels {
                return Err(OutcomeError::CellOutOfRange { state: s, level });
            }
            let o = subject.outcomes[i];
            let log_fact = match family {
                Family::Poisson => {
                    if o < 0.0 || o.fract() != 0.0 {
                        return Err(OutcomeError::NegativeCount(o));
                    }
                    ln_gamma(o + 1.0)
                }
                Family::Gaussian { .. } => 0.0,
            };
            self.cells[s * self.num_levels + level].add(&CellStats { count: 1.0, sum: o, sum_sq: o * o, log_fact });
        }
        self.first_visit[states[0]] += 1.0;
        for p in paths {
            if p.dim() != k {
                return Err(OutcomeError::MisalignedInputs(format!(
                    "path statistics of dimension {} for {k} states",
                    p.dim()
                )));
            }
            for l in 0..k {
                self.holding[l] += p.holding(l);
                for m in 0..k {
                    self.jumps[l * k + m] += f64::from(p.jumps(l, m));
                }
            }
        }
        Ok(())
    }

    /// Same statistics with states relabelled: new state `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.num_states;
        let mut out = Self::zeros(k, self.num_levels);
        for (new, &old) in perm.iter().enumerate() {
            out.first_visit[new] = self.first_visit[old];
            out.holding[new] = self.holding[old];
            for level in 0..self.num_levels {
                out.cells[new * self.num_levels + level] = *self.cell(old, level);
            }
            for (new_m, &old_m) in perm.iter().enumerate() {
                out.jumps[new * k + new_m] = self.jumps[old * k + old_m];
            }
        }
        out
    }
}

impl AddAssign<&OutcomeSuffStats> for OutcomeSuffStats {
    fn add_assign(&mut self, other: &OutcomeSuffStats) {
        debug_assert_eq!(self.cells.len(), other.cells.len());
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.add(b);
        }
        for (a, b) in self.first_visit.iter_mut().zip(&other.first_visit) {
            *a += b;
        }
        for (a, b) in self.jumps.iter_mut().zip(&other.jumps) {
            *a += b;
        }
        for (a, b) in self.holding.iter_mut().zip(&other.holding) {
            *a += b;
        }
    }
}

impl SubAssign<&OutcomeSuffStats> for OutcomeSuffStats {
    fn sub_assign(&mut self, other: &OutcomeSuffStats) {
        debug_assert_eq!(self.cells.len(), other.cells.len());
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.sub(b);
        }
        for (a, b) in self.first_visit.iter_mut().zip(&other.first_visit) {
            *a -= b;
        }
        for (a, b) in self.jumps.iter_mut().zip(&other.jumps) {
            *a -= b;
        }
        for (a, b) in self.holding.iter_mut().zip(&other.holding) {
            *a = (*a - b).max(0.0);
        }
    }
}

/// Sums per-subject statistics in slice order.
pub fn accumulate_suffstats<'a>(
    num_states: usize,
    num_levels: usize,
    parts: impl IntoIterator<Item = &'a OutcomeSuffStats>,
) -> OutcomeSuffStats {
    let mut total = OutcomeSuffStats::zeros(num_states, num_levels);
    for p in parts {
        total += p;
    }
    total
}
