//! Social adjacency held by the social party: symmetric normalization and
//! the batch selection algebra used by the batched forward and backward.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::numerics::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("user index {index} out of range for {n_users} users")]
    OutOfRange { index: usize, n_users: usize },
    #[error("batch contains user {0} twice")]
    DuplicateUser(usize),
    #[error("batch of {batch} users exceeds graph size {n_users}")]
    BatchTooLarge { batch: usize, n_users: usize },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Undirected 0/1 social graph. Self-loops are never stored; the identity is
/// added by the normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SocialGraph {
    n_users: usize,
    neighbors: Vec<BTreeSet<usize>>,
}

impl SocialGraph {
    pub fn empty(n_users: usize) -> Self {
        Self {
            n_users,
            neighbors: vec![BTreeSet::new(); n_users],
        }
    }

    /// Symmetrizes and deduplicates `edges`, dropping self-loops.
    pub fn from_edges(n_users: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n_users);
        for &(i, j) in edges {
            g.insert_edge(i, j)?;
        }
        Ok(g)
    }

    /// Builds from a dense symmetric 0/1 adjacency (diagonal ignored).
    pub fn from_adjacency(adj: &[Vec<bool>]) -> Self {
        let n = adj.len();
        let mut g = Self::empty(n);
        for (i, row) in adj.iter().enumerate() {
            for (j, &on) in row.iter().enumerate() {
                if on && i != j {
                    g.neighbors[i].insert(j);
                    g.neighbors[j].insert(i);
                }
            }
        }
        g
    }

    pub fn insert_edge(&mut self, i: usize, j: usize) -> Result<bool> {
        self.check(i)?;
        self.check(j)?;
        if i == j {
            return Ok(false);
        }
        let fresh = self.neighbors[i].insert(j);
        self.neighbors[j].insert(i);
        Ok(fresh)
    }

    /// Flips the undirected link `{i, j}`.
    pub fn toggle_edge(&mut self, i: usize, j: usize) -> Result<()> {
        self.check(i)?;
        self.check(j)?;
        if i == j {
            return Ok(());
        }
        if !self.neighbors[i].remove(&j) {
            self.neighbors[i].insert(j);
            self.neighbors[j].insert(i);
        } else {
            self.neighbors[j].remove(&i);
        }
        Ok(())
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.n_users {
            return Err(GraphError::OutOfRange {
                index: i,
                n_users: self.n_users,
            });
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors.get(i).is_some_and(|s| s.contains(&j))
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[i].iter().copied()
    }

    /// `‖a_i‖₁`.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(BTreeSet::len).collect()
    }

    /// Number of undirected links.
    pub fn n_links(&self) -> usize {
        self.degrees().iter().sum::<usize>() / 2
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.range(i + 1..).map(|&j| (i, j)));
        }
        out
    }
}

/// `D^{-1/2}(A + I)D^{-1/2}` with `D_ii = 1 + ‖a_i‖₁`, optionally times `1/N`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedLaplacian {
    matrix: DenseMatrix,
    scale: f64,
}

pub fn normalized_laplacian(g: &SocialGraph, scale_by_inverse_n: bool) -> NormalizedLaplacian {
    let n = g.n_users();
    let d: Vec<f64> = g.degrees().iter().map(|&d| (1 + d) as f64).collect();
    let scale = if scale_by_inverse_n && n > 0 {
        1.0 / n as f64
    } else {
        1.0
    };
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = scale / d[i];
        for j in g.neighbors(i) {
            m[(i, j)] = scale / (d[i] * d[j]).sqrt();
        }
    }
    NormalizedLaplacian { matrix: m, scale }
}

impl NormalizedLaplacian {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    /// `1` or `1/N`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    /// `𝓑 · L̃`.
    pub fn batch_rows(&self, sel: &BatchSelector) -> Result<DenseMatrix> {
        sel.check_within(self.n())?;
        Ok(self
            .matrix
            .select_rows(sel.users())
            .expect("selector validated"))
    }

    /// `𝓑 · L̃ · 𝓑ᵀ`.
    pub fn batch_block(&self, sel: &BatchSelector) -> Result<DenseMatrix> {
        sel.check_within(self.n())?;
        let u = sel.users();
        Ok(DenseMatrix::from_fn(u.len(), u.len(), |r, c| {
            self.matrix[(u[r], u[c])]
        }))
    }
}

/// The distinct users of a batch, standing for the implicit 0/1 selection
/// matrix `𝓑 ∈ {0,1}^{|𝓑|×N}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSelector {
    users: Vec<usize>,
}

impl BatchSelector {
    /// Keeps `users` in the given order; rejects duplicates.
    pub fn new(users: Vec<usize>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &u in &users {
            if !seen.insert(u) {
                return Err(GraphError::DuplicateUser(u));
            }
        }
        Ok(Self { users })
    }

    /// Sorted distinct users of an arbitrary list.
    pub fn from_unsorted(users: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = users.into_iter().collect();
        Self {
            users: set.into_iter().collect(),
        }
    }

    pub fn all(n: usize) -> Self {
        Self {
            users: (0..n).collect(),
        }
    }

    pub fn users(&self) -> &[usize] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Position of a user inside the batch.
    pub fn position(&self, user: usize) -> Option<usize> {
        self.users.iter().position(|&u| u == user)
    }

    pub fn check_within(&self, n_users: usize) -> Result<()> {
        if self.users.len() > n_users {
            return Err(GraphError::BatchTooLarge {
                batch: self.users.len(),
                n_users,
            });
        }
        if let Some(&bad) = self.users.iter().find(|&&u| u >= n_users) {
            return Err(GraphError::OutOfRange {
                index: bad,
                n_users,
            });
        }
        Ok(())
    }
}
