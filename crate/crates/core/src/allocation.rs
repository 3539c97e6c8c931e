//! Per-round layer allocation matrices.
//!
//! Row `i` of an [`AllocationMatrix`] lists the layers dispatched to the
//! `i`-th participating client; its row sum is that client's capacity.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attempts before constrained generation falls back to repair.
pub const MAX_REJECTION_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationMatrix {
    layers: usize,
    capacities: Vec<usize>,
    entries: Vec<u8>,
}

impl AllocationMatrix {
    /// Builds a matrix from explicit rows of 0/1 entries; capacities are the
    /// row sums.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let layers = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != layers) {
            return Err(Error::Shape("allocation rows differ in length".into()));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Precondition("allocation entries must be 0 or 1".into()));
        }
        Ok(AllocationMatrix {
            layers,
            capacities: rows.iter().map(|r| r.iter().map(|&v| v as usize).sum()).collect(),
            entries: rows.concat(),
        })
    }

    /// Builds a matrix from each client's selected layer set.
    pub fn from_selections(selections: &[Vec<usize>], layers: usize) -> Result<Self> {
        let mut entries = vec![0u8; selections.len() * layers];
        for (i, sel) in selections.iter().enumerate() {
            for &j in sel {
                if j >= layers {
                    return Err(Error::Index(format!("layer {j} of {layers}")));
                }
                if entries[i * layers + j] == 1 {
                    return Err(Error::Index(format!("layer {j} selected twice for row {i}")));
                }
                entries[i * layers + j] = 1;
            }
        }
        Ok(AllocationMatrix {
            layers,
            capacities: selections.iter().map(Vec::len).collect(),
            entries,
        })
    }

    pub fn clients(&self) -> usize {
        self.capacities.len()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn capacities(&self) -> &[usize] {
        &self.capacities
    }

    pub fn get(&self, client: usize, layer: usize) -> bool {
        self.entries[client * self.layers + layer] == 1
    }

    pub fn row(&self, client: usize) -> &[u8] {
        &self.entries[client * self.layers..(client + 1) * self.layers]
    }

    /// Ascending layer indices of row `client`.
    pub fn selected(&self, client: usize) -> Vec<usize> {
        self.row(client)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn row_sum(&self, client: usize) -> usize {
        self.row(client).iter().map(|&v| v as usize).sum()
    }

    pub fn column_sum(&self, layer: usize) -> usize {
        (0..self.clients()).filter(|&i| self.get(i, layer)).count()
    }

    /// Γ_t per layer: how many clients train each layer this round.
    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.layers).map(|j| self.column_sum(j)).collect()
    }

    pub fn empty_columns(&self) -> Vec<usize> {
        (0..self.layers).filter(|&j| self.column_sum(j) == 0).collect()
    }

    /// Every row sum equals its recorded capacity.
    pub fn rows_consistent(&self) -> bool {
        (0..self.clients()).all(|i| self.row_sum(i) == self.capacities[i])
    }

    fn set(&mut self, client: usize, layer: usize, v: bool) {
        self.entries[client * self.layers + layer] = u8::from(v);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Each row is a uniform random `L_i`-subset, rows independent.
    RandomUniform,
    /// As `RandomUniform`, and every layer is held by at least one client.
    RandomConstrained,
    /// Row `i` is the first `L_i` layers.
    DepthPrefix,
    /// Every client holds every layer.
    AllLarge,
    /// Every client holds the first `min_i L_i` layers.
    AllSmall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationStrategy {
    pub kind: StrategyKind,
    /// Resample every capacity uniformly from `[1, L]` each round.
    pub dynamic: bool,
}

impl AllocationStrategy {
    pub fn fixed(kind: StrategyKind) -> Self {
        AllocationStrategy { kind, dynamic: false }
    }
}

fn check_capacities(capacities: &[usize], layers: usize) -> Result<()> {
    if layers == 0 {
        return Err(Error::Precondition("zero layers".into()));
    }
    if let Some(&c) = capacities.iter().find(|&&c| c == 0 || c > layers) {
        return Err(Error::Precondition(format!("capacity {c} outside [1, {layers}]")));
    }
    Ok(())
}

fn random_rows<R: Rng + ?Sized>(capacities: &[usize], layers: usize, rng: &mut R) -> AllocationMatrix {
    let selections: Vec<Vec<usize>> = capacities
        .iter()
        .map(|&c| {
            let mut s = index::sample(rng, layers, c).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    AllocationMatrix::from_selections(&selections, layers).expect("sampled indices are in range")
}

pub fn generate_allocation<R: Rng + ?Sized>(
    kind: StrategyKind,
    capacities: &[usize],
    layers: usize,
    rng: &mut R,
) -> Result<AllocationMatrix> {
    check_capacities(capacities, layers)?;
    let prefix = |caps: &[usize]| {
        let sel: Vec<Vec<usize>> = caps.iter().map(|&c| (0..c).collect()).collect();
        AllocationMatrix::from_selections(&sel, layers)
    };
    match kind {
        StrategyKind::RandomUniform => Ok(random_rows(capacities, layers, rng)),
        StrategyKind::RandomConstrained => {
            let total: usize = capacities.iter().sum();
            if total < layers {
                return Err(Error::Infeasible(format!(
                    "capacities sum to {total}, cannot cover {layers} layers"
                )));
            }
            let mut m = random_rows(capacities, layers, rng);
            for _ in 1..MAX_REJECTION_ATTEMPTS {
                if m.empty_columns().is_empty() {
                    return Ok(m);
                }
                m = random_rows(capacities, layers, rng);
            }
            repair_empty_columns(&m)
        }
        StrategyKind::DepthPrefix => prefix(capacities),
        StrategyKind::AllLarge => prefix(&vec![layers; capacities.len()]),
        StrategyKind::AllSmall => {
            let min = capacities.iter().copied().min().unwrap_or(layers);
            prefix(&vec![min; capacities.len()])
        }
    }
}

/// Fills every empty column, ascending: the lowest-index client holding some
/// layer whose column sum is at least 2 (lowest such layer) gives it up for
/// the empty one. Row sums are preserved.
pub fn repair_empty_columns(m: &AllocationMatrix) -> Result<AllocationMatrix> {
    let total: usize = m.capacities.iter().sum();
    if total < m.layers {
        return Err(Error::Infeasible(format!(
            "capacities sum to {total}, cannot cover {} layers",
            m.layers
        )));
    }
    let mut out = m.clone();
    let mut sums = out.column_sums();
    for empty in 0..out.layers {
        if sums[empty] > 0 {
            continue;
        }
        let donor = (0..out.clients()).find_map(|i| {
            (0..out.layers)
                .find(|&j| out.get(i, j) && sums[j] >= 2)
                .map(|j| (i, j))
        });
        let (i, j) = donor.ok_or_else(|| {
            Error::Invariant(format!("no donor layer while repairing column {empty}"))
        })?;
        out.set(i, j, false);
        out.set(i, empty, true);
        sums[j] -= 1;
        sums[empty] += 1;
    }
    debug_assert!(out.rows_consistent());
    Ok(out)
}

/// Uniform capacity in `[1, layers]` per client.
pub fn resample_capacities<R: Rng + ?Sized>(clients: usize, layers: usize, rng: &mut R) -> Vec<usize> {
    (0..clients).map(|_| rng.random_range(1..=layers)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionStats {
    pub rounds: usize,
    /// `counts[i][j]`: rounds in which row `i` held layer `j`.
    pub counts: Vec<Vec<u64>>,
}

impl SelectionStats {
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 / self.rounds as f64).collect())
            .collect()
    }
}

pub fn selection_stats(history: &[AllocationMatrix]) -> Result<SelectionStats> {
    let first = history
        .first()
        .ok_or_else(|| Error::Precondition("empty allocation history".into()))?;
    let (n, l) = (first.clients(), first.layers());
    let mut counts = vec![vec![0u64; l]; n];
    for m in history {
        if m.clients() != n || m.layers() != l {
            return Err(Error::Shape(format!(
                "allocation {}x{} in a {n}x{l} history",
                m.clients(),
                m.layers()
            )));
        }
        for (i, row) in counts.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c += u64::from(m.get(i, j));
            }
        }
    }
    Ok(SelectionStats {
        rounds: history.len(),
        counts,
    })
}

/// CSV rows `round,client,layer,selected`. `clients[t]` maps row index to
/// client id for round `t`; when absent rows are numbered from zero.
pub fn write_allocation_csv<W: Write>(
    out: W,
    history: &[AllocationMatrix],
    clients: Option<&[Vec<usize>]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "client", "layer", "selected"])?;
    for (t, m) in history.iter().enumerate() {
        for i in 0..m.clients() {
            let id = clients.map_or(i, |c| c[t][i]);
            for j in 0..m.layers() {
                w.write_record([
                    t.to_string(),
                    id.to_string(),
                    j.to_string(),
                    u8::from(m.get(i, j)).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<allocation csv>", e))?;
    Ok(())
}
