//! Recommender-side network: bipartite backbone, the split social layer,
//! gated fusion, dot-product decoder, MSE loss and closed-form gradients.
//!
//! The social layer is `Y_B = (𝓑L̃)·M·W_P2`, computed by the social party and
//! consumed here through [`SocialBranch`]. `M` is either the clipped user
//! embeddings ([`StateMode::Fresh`]) or a separate table that the social party
//! keeps encrypted and the recommender mirrors ([`StateMode::Stored`]).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::RatingTriple;
use crate::numerics::{DenseMatrix, NumericsError, RngState};
use crate::sandwich::ProtocolError;
use crate::socialgraph::{BatchSelector, GraphError, NormalizedLaplacian};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("rating of user {0} outside the batch")]
    UserNotInBatch(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateMode {
    /// Separate social table, encrypted once and updated in place.
    Stored,
    /// Clipped user embeddings re-sent every step.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub clip: f64,
    pub rating_range: (f64, f64),
    pub fusion: bool,
    pub social: bool,
    pub state_mode: StateMode,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: 2 * dim,
            beta: 1.0,
            clip: 0.1,
            rating_range: (1.0, 5.0),
            fusion: true,
            social: true,
            state_mode: StateMode::Stored,
            init_std: 0.1,
        }
    }
}

/// Symmetric-normalized user–item propagation with self-loops,
/// `P = D^{-1/2}(A + I)D^{-1/2}` over the `N + M` nodes.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    self_weight: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl BipartiteGraph {
    pub fn new(n_users: usize, n_items: usize, ratings: &[RatingTriple]) -> Self {
        let n = n_users + n_items;
        let mut pairs: Vec<(usize, usize)> = ratings.iter().map(|r| (r.user, n_users + r.item)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        let mut deg = vec![1.0f64; n];
        for &(u, v) in &pairs {
            deg[u] += 1.0;
            deg[v] += 1.0;
        }
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in &pairs {
            let w = 1.0 / (deg[u] * deg[v]).sqrt();
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        Self {
            n_users,
            n_items,
            self_weight: deg.iter().map(|d| 1.0 / d).collect(),
            adj,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// `P · x` for a stacked `(N + M) × d` matrix.
    pub fn propagate(&self, x: &DenseMatrix) -> DenseMatrix {
        let d = x.cols();
        let mut out = DenseMatrix::zeros(x.rows(), d);
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let sw = self.self_weight[i];
            for (o, v) in row.iter_mut().zip(x.row(i)) {
                *o = sw * v;
            }
            for &(j, w) in &self.adj[i] {
                for (o, v) in row.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

/// Recommender-held parameters. `W_P2` lives with the social party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub user_emb: DenseMatrix,
    pub item_emb: DenseMatrix,
    /// Mirror of the stored social table in [`StateMode::Stored`].
    pub social_emb: Option<DenseMatrix>,
    pub w_p1: DenseMatrix,
    /// `1 × d`.
    pub bias: DenseMatrix,
    /// `2d × h`.
    pub w_f1: DenseMatrix,
    /// `h × 2d`. Starts at zero so every gate opens at `(1/2, 1/2)`.
    pub w_f2: DenseMatrix,
}

impl ModelState {
    pub fn init(n_users: usize, n_items: usize, config: ModelConfig, rng: &mut RngState) -> Self {
        let d = config.dim;
        let h = config.hidden;
        let user_emb = DenseMatrix::random_normal(n_users, d, config.init_std, rng);
        let item_emb = DenseMatrix::random_normal(n_items, d, config.init_std, rng);
        let social_emb = match config.state_mode {
            StateMode::Stored => Some(user_emb.clip_rows(config.clip)),
            StateMode::Fresh => None,
        };
        let w_p1 = DenseMatrix::random_normal(d, d, 1.0 / (d as f64).sqrt(), rng);
        let w_f1 = DenseMatrix::random_normal(2 * d, h, 1.0 / ((2 * d) as f64).sqrt(), rng);
        Self {
            user_emb,
            item_emb,
            social_emb,
            w_p1,
            bias: DenseMatrix::zeros(1, d),
            w_f1,
            w_f2: DenseMatrix::zeros(h, 2 * d),
            config,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    /// The middle operand `M` of the social product.
    pub fn social_input(&self) -> DenseMatrix {
        match &self.social_emb {
            Some(s) => s.clone(),
            None => self.user_emb.clip_rows(self.config.clip),
        }
    }
}

/// Source of the social layer output and its input gradient.
pub trait SocialBranch {
    /// `Y_B = (𝓑L̃)·M·W_P2`, rows in batch order, possibly noised.
    fn forward(&mut self, state: &ModelState, batch: &BatchSelector) -> Result<DenseMatrix>;
    /// `(𝓑L̃𝓑ᵀ)·∂𝓛/∂Y_B·W_P2ᵀ`, rows in batch order.
    fn backward(&mut self, state: &ModelState, batch: &BatchSelector, grad_y: &DenseMatrix) -> Result<DenseMatrix>;
}

/// In-memory social branch with direct access to `L̃` and `W_P2`.
#[derive(Clone, Debug)]
pub struct PlainSocial {
    pub laplacian: NormalizedLaplacian,
    pub w_p2: DenseMatrix,
}

impl SocialBranch for PlainSocial {
    fn forward(&mut self, state: &ModelState, batch: &BatchSelector) -> Result<DenseMatrix> {
        let rows = self.laplacian.batch_rows(batch)?;
        Ok(rows.matmul(&state.social_input())?.matmul(&self.w_p2)?)
    }

    fn backward(&mut self, _state: &ModelState, batch: &BatchSelector, grad_y: &DenseMatrix) -> Result<DenseMatrix> {
        let block = self.laplacian.batch_block(batch)?;
        Ok(block.matmul(grad_y)?.matmul(&self.w_p2.transpose())?)
    }
}

/// `(X_user1, X_item1) = ½(X⁰ + P·X⁰)` split back into users and items.
pub fn backbone_forward(state: &ModelState, graph: &BipartiteGraph) -> Result<(DenseMatrix, DenseMatrix)> {
    let stacked = stack(&state.user_emb, &state.item_emb)?;
    let out = stacked.add(&graph.propagate(&stacked))?.scale(0.5);
    Ok(unstack(&out, state.n_users()))
}

fn stack(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.cols() {
        return Err(ModelError::Shape(format!("stack {:?} over {:?}", a.shape(), b.shape())));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(DenseMatrix::from_vec(a.rows() + b.rows(), a.cols(), data)?)
}

fn unstack(m: &DenseMatrix, top: usize) -> (DenseMatrix, DenseMatrix) {
    let d = m.cols();
    let (a, b) = m.data().split_at(top * d);
    (
        DenseMatrix::from_vec(top, d, a.to_vec()).expect("finite"),
        DenseMatrix::from_vec(m.rows() - top, d, b.to_vec()).expect("finite"),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct FusionCache {
    c: Vec<f64>,
    pre: Vec<f64>,
    hid: Vec<f64>,
    gates: Vec<f64>,
    out: Vec<f64>,
}

fn fusion_cached(x1: &[f64], x2: &[f64], state: &ModelState) -> FusionCache {
    let d = x1.len();
    let h = state.config.hidden;
    let mut c = Vec::with_capacity(2 * d);
    c.extend_from_slice(x1);
    c.extend_from_slice(x2);
    let mut pre = vec![0.0; h];
    for (k, ck) in c.iter().enumerate() {
        if *ck == 0.0 {
            continue;
        }
        for (p, w) in pre.iter_mut().zip(state.w_f1.row(k)) {
            *p += ck * w;
        }
    }
    let hid: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let mut logits = vec![0.0; 2 * d];
    for (k, hk) in hid.iter().enumerate() {
        if *hk == 0.0 {
            continue;
        }
        for (l, w) in logits.iter_mut().zip(state.w_f2.row(k)) {
            *l += hk * w;
        }
    }
    let gates: Vec<f64> = (0..d).map(|i| sigmoid(logits[i] - logits[d + i])).collect();
    let out = (0..d).map(|i| gates[i] * x1[i] + (1.0 - gates[i]) * x2[i]).collect();
    FusionCache {
        c,
        pre,
        hid,
        gates,
        out,
    }
}

/// Position-wise softmax gating of `x1` against `x2` (already scaled by β),
/// with the gate logits produced by `W_f2·ReLU(W_f1·[x1 | x2])`. Without
/// fusion the two are averaged.
pub fn fusion_forward(x1: &[f64], x2: &[f64], state: &ModelState) -> Vec<f64> {
    if !state.config.fusion {
        return x1.iter().zip(x2).map(|(a, b)| 0.5 * (a + b)).collect();
    }
    fusion_cached(x1, x2, state).out
}

/// `(r_max − r_min)·sigmoid(⟨u, v⟩) + r_min`.
pub fn decode(user: &[f64], item: &[f64], range: (f64, f64)) -> f64 {
    let s: f64 = user.iter().zip(item).map(|(a, b)| a * b).sum();
    (range.1 - range.0) * sigmoid(s) + range.0
}

pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(ModelError::Shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64)
}

/// Everything the backward pass needs.
pub struct ForwardTrace {
    pub batch: BatchSelector,
    pub ratings: Vec<RatingTriple>,
    /// Batch row of each rating's user.
    pub rows: Vec<usize>,
    pub user1: DenseMatrix,
    pub item1: DenseMatrix,
    pub y: DenseMatrix,
    pub h: DenseMatrix,
    /// `β · ReLU(h)`.
    pub x2: DenseMatrix,
    fusion: Vec<FusionCache>,
    /// Final user representations, batch order.
    pub user3: DenseMatrix,
    pub predictions: Vec<f64>,
    pub loss: f64,
}

impl ForwardTrace {
    pub fn gates(&self, row: usize) -> Option<&[f64]> {
        self.fusion.get(row).map(|f| f.gates.as_slice())
    }
}

fn batch_positions(batch: &BatchSelector) -> HashMap<usize, usize> {
    batch.users().iter().enumerate().map(|(k, &u)| (u, k)).collect()
}

/// Forward pass over `ratings` whose users all belong to `batch`, with the
/// social output `y` (rows in batch order) supplied by the caller.
pub fn forward(
    state: &ModelState,
    graph: &BipartiteGraph,
    batch: &BatchSelector,
    ratings: &[RatingTriple],
    y: DenseMatrix,
) -> Result<ForwardTrace> {
    let d = state.config.dim;
    batch.check_within(state.n_users())?;
    if y.shape() != (batch.len(), d) {
        return Err(ModelError::Shape(format!("social output {:?} for batch {}", y.shape(), batch.len())));
    }
    let pos = batch_positions(batch);
    let rows = ratings
        .iter()
        .map(|r| pos.get(&r.user).copied().ok_or(ModelError::UserNotInBatch(r.user)))
        .collect::<Result<Vec<_>>>()?;
    let (user1, item1) = backbone_forward(state, graph)?;

    let h = y.matmul(&state.w_p1)?;
    let h = DenseMatrix::from_fn(h.rows(), d, |r, c| h[(r, c)] + state.bias[(0, c)]);
    let beta = state.config.beta;
    let x2 = h.map(|v| beta * v.max(0.0));

    let mut fusion = Vec::new();
    let mut user3 = DenseMatrix::zeros(batch.len(), d);
    for (k, &u) in batch.users().iter().enumerate() {
        let x1 = user1.row(u);
        let out = if !state.config.social {
            x1.to_vec()
        } else if state.config.fusion {
            let f = fusion_cached(x1, x2.row(k), state);
            let o = f.out.clone();
            fusion.push(f);
            o
        } else {
            fusion_forward(x1, x2.row(k), state)
        };
        user3.row_mut(k).copy_from_slice(&out);
    }

    let predictions: Vec<f64> = ratings
        .iter()
        .zip(&rows)
        .map(|(r, &k)| decode(user3.row(k), item1.row(r.item), state.config.rating_range))
        .collect();
    let targets: Vec<f64> = ratings.iter().map(|r| r.rating).collect();
    let loss = mse_loss(&predictions, &targets)?;
    Ok(ForwardTrace {
        batch: batch.clone(),
        ratings: ratings.to_vec(),
        rows,
        user1,
        item1,
        y,
        h,
        x2,
        fusion,
        user3,
        predictions,
        loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub user_emb: DenseMatrix,
    pub item_emb: DenseMatrix,
    pub social_emb: Option<DenseMatrix>,
    pub w_p1: DenseMatrix,
    pub bias: DenseMatrix,
    pub w_f1: DenseMatrix,
    pub w_f2: DenseMatrix,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            user_emb: z(&state.user_emb),
            item_emb: z(&state.item_emb),
            social_emb: state.social_emb.as_ref().map(z),
            w_p1: z(&state.w_p1),
            bias: z(&state.bias),
            w_f1: z(&state.w_f1),
            w_f2: z(&state.w_f2),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.user_emb,
            &self.item_emb,
            &self.w_p1,
            &self.bias,
            &self.w_f1,
            &self.w_f2,
        ]
        .iter()
        .all(|m| m.is_finite())
            && self.social_emb.as_ref().map_or(true, DenseMatrix::is_finite)
    }
}

/// Jacobian-transpose of `x ↦ x·min(1, C/‖x‖)` applied row-wise to `g`.
fn clip_rows_backward(x: &DenseMatrix, g: &DenseMatrix, c: f64) -> DenseMatrix {
    let mut out = g.clone();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= c {
            continue;
        }
        let gr = g.row(r);
        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let k = c / norm;
        for (o, (xv, gv)) in out.row_mut(r).iter_mut().zip(xr.iter().zip(gr)) {
            *o = k * (gv - dot / (norm * norm) * xv);
        }
    }
    out
}

/// Closed-form gradients of the trace's loss. The social input gradient is
/// obtained from `social` and covers batch rows only.
pub fn backward(
    state: &ModelState,
    graph: &BipartiteGraph,
    trace: &ForwardTrace,
    social: &mut dyn SocialBranch,
) -> Result<Gradients> {
    let d = state.config.dim;
    let (lo, hi) = state.config.rating_range;
    let nb = trace.batch.len();
    let n_r = trace.ratings.len() as f64;
    let mut grads = Gradients::zeros_like(state);

    let mut d_user3 = DenseMatrix::zeros(nb, d);
    let mut d_item1 = DenseMatrix::zeros(state.n_items(), d);
    for ((r, &k), &pred) in trace.ratings.iter().zip(&trace.rows).zip(&trace.predictions) {
        let g_pred = 2.0 * (pred - r.rating) / n_r;
        let sig = (pred - lo) / (hi - lo);
        let g_s = g_pred * (hi - lo) * sig * (1.0 - sig);
        if g_s == 0.0 {
            continue;
        }
        let u = trace.user3.row(k).to_vec();
        let v = trace.item1.row(r.item).to_vec();
        for (o, vv) in d_user3.row_mut(k).iter_mut().zip(&v) {
            *o += g_s * vv;
        }
        for (o, uu) in d_item1.row_mut(r.item).iter_mut().zip(&u) {
            *o += g_s * uu;
        }
    }

    let mut d_user1_rows = DenseMatrix::zeros(nb, d);
    let mut d_x2 = DenseMatrix::zeros(nb, d);
    if !state.config.social {
        d_user1_rows = d_user3;
    } else if state.config.fusion {
        let h = state.config.hidden;
        for k in 0..nb {
            let f = &trace.fusion[k];
            let go = d_user3.row(k);
            let x1 = &f.c[..d];
            let x2 = &f.c[d..];
            let mut d_logits = vec![0.0; 2 * d];
            for i in 0..d {
                let w = f.gates[i];
                d_user1_rows[(k, i)] = go[i] * w;
                d_x2[(k, i)] = go[i] * (1.0 - w);
                let dd = go[i] * (x1[i] - x2[i]) * w * (1.0 - w);
                d_logits[i] = dd;
                d_logits[d + i] = -dd;
            }
            let mut d_pre = vec![0.0; h];
            for j in 0..h {
                let wrow = state.w_f2.row(j);
                let mut s = 0.0;
                for (gl, w) in d_logits.iter().zip(wrow) {
                    s += gl * w;
                }
                if f.hid[j] != 0.0 {
                    for (o, gl) in grads.w_f2.row_mut(j).iter_mut().zip(&d_logits) {
                        *o += f.hid[j] * gl;
                    }
                }
                d_pre[j] = if f.pre[j] > 0.0 { s } else { 0.0 };
            }
            for (a, ca) in f.c.iter().enumerate() {
                let mut s = 0.0;
                let wrow = state.w_f1.row(a);
                for (dp, w) in d_pre.iter().zip(wrow) {
                    s += dp * w;
                }
                if *ca != 0.0 {
                    for (o, dp) in grads.w_f1.row_mut(a).iter_mut().zip(&d_pre) {
                        *o += ca * dp;
                    }
                }
                if a < d {
                    d_user1_rows[(k, a)] += s;
                } else {
                    d_x2[(k, a - d)] += s;
                }
            }
        }
    } else {
        d_user1_rows = d_user3.scale(0.5);
        d_x2 = d_user3.scale(0.5);
    }

    if state.config.social {
        let beta = state.config.beta;
        let d_h = DenseMatrix::from_fn(nb, d, |r, c| {
            if trace.h[(r, c)] > 0.0 {
                beta * d_x2[(r, c)]
            } else {
                0.0
            }
        });
        grads.w_p1 = trace.y.t_matmul(&d_h)?;
        for r in 0..nb {
            for c in 0..d {
                grads.bias[(0, c)] += d_h[(r, c)];
            }
        }
        let d_y = d_h.matmul(&state.w_p1.transpose())?;
        let d_m_rows = social.backward(state, &trace.batch, &d_y)?;
        if d_m_rows.shape() != (nb, d) {
            return Err(ModelError::Shape(format!("social gradient {:?} for batch {nb}", d_m_rows.shape())));
        }
        let mut d_m = DenseMatrix::zeros(state.n_users(), d);
        for (k, &u) in trace.batch.users().iter().enumerate() {
            d_m.row_mut(u).copy_from_slice(d_m_rows.row(k));
        }
        match &mut grads.social_emb {
            Some(s) => *s = d_m,
            None => {
                let through = clip_rows_backward(&state.user_emb, &d_m, state.config.clip);
                grads.user_emb = through;
            }
        }
    }

    let mut d_user1 = DenseMatrix::zeros(state.n_users(), d);
    for (k, &u) in trace.batch.users().iter().enumerate() {
        d_user1.row_mut(u).copy_from_slice(d_user1_rows.row(k));
    }
    let stacked = stack(&d_user1, &d_item1)?;
    let d0 = stacked.add(&graph.propagate(&stacked))?.scale(0.5);
    let (du, di) = unstack(&d0, state.n_users());
    grads.user_emb.axpy(1.0, &du)?;
    grads.item_emb = di;
    Ok(grads)
}

/// `θ ← θ − η·g` on every trainable tensor.
pub fn sgd_step(state: &mut ModelState, grads: &Gradients, learning_rate: f64) -> Result<()> {
    if learning_rate == 0.0 {
        return Ok(());
    }
    state.user_emb.axpy(-learning_rate, &grads.user_emb)?;
    state.item_emb.axpy(-learning_rate, &grads.item_emb)?;
    if let (Some(s), Some(g)) = (&mut state.social_emb, &grads.social_emb) {
        s.axpy(-learning_rate, g)?;
    }
    state.w_p1.axpy(-learning_rate, &grads.w_p1)?;
    state.bias.axpy(-learning_rate, &grads.bias)?;
    state.w_f1.axpy(-learning_rate, &grads.w_f1)?;
    state.w_f2.axpy(-learning_rate, &grads.w_f2)?;
    Ok(())
}
