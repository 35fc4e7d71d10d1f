//! Two-party training: the recommender drives batches, the social party
//! answers triple-product queries and spends the privacy budget.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, DatasetBundle, RatingTriple};
use crate::model::{
    backward, forward, sgd_step, BipartiteGraph, ModelConfig, ModelError, ModelState, SocialBranch, StateMode,
};
use crate::numerics::{DenseMatrix, RngState};
use crate::paillier::DEFAULT_FRAC_BITS;
use crate::privacy::{make_noise_plan_with_rows, Accountant, DpBudget, PrivacyError, SensitivityProfile};
use crate::sandwich::{
    expect_consumed, read_f64, read_indices, serve, write_f64, write_indices, CipherMode, Frame, InProcessLink, Link,
    MiddleCrypto, Operand, ProtocolError, RemoteLink, Responder, Session, SideCrypto, Tag, TcpTransport, TransportStats,
};
use crate::socialgraph::{normalized_laplacian, BatchSelector, NormalizedLaplacian, SocialGraph};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Protocol(ProtocolError),
    #[error(transparent)]
    Privacy(PrivacyError),
    #[error("privacy budget exceeded: epsilon {spent:.4} > {limit:.4}")]
    BudgetExceeded { spent: f64, limit: f64 },
    #[error("empty evaluation set")]
    EmptyEvaluation,
}

impl From<ProtocolError> for RunError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Rejected(msg) if msg.starts_with(BUDGET_REJECTION) => {
                let mut it = msg[BUDGET_REJECTION.len()..].split_whitespace();
                let spent = it.next().and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
                let limit = it.next().and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
                RunError::BudgetExceeded { spent, limit }
            }
            e => RunError::Protocol(e),
        }
    }
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Protocol(p) => p.into(),
            e => RunError::Model(e),
        }
    }
}

impl From<PrivacyError> for RunError {
    fn from(e: PrivacyError) -> Self {
        match e {
            PrivacyError::BudgetExceeded { spent, limit, .. } => RunError::BudgetExceeded { spent, limit },
            e => RunError::Privacy(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

const BUDGET_REJECTION: &str = "budget exceeded:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportKind {
    InProcess,
    /// Loopback TCP with the social party on its own thread.
    Socket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub hidden: Option<usize>,
    pub learning_rate: f64,
    /// Records per batch; `0` means the whole training set.
    pub batch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub cipher: CipherMode,
    pub dp: bool,
    pub fusion: bool,
    pub social: bool,
    pub state_mode: StateMode,
    pub seed: u64,
    /// Overrides the dataset's range when set.
    pub rating_range: Option<(f64, f64)>,
    pub laplacian_inverse_n: bool,
    pub key_bits: usize,
    pub frac_bits: u32,
    pub init_std: f64,
    pub transport: TransportKind,
    /// Evaluate after every epoch rather than only at the end.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hidden: None,
            learning_rate: 1.0,
            batch_size: 1024,
            epochs: 20,
            clip: 0.1,
            beta: 1.0,
            epsilon: 15.0,
            delta: 1e-4,
            cipher: CipherMode::Plaintext,
            dp: true,
            fusion: true,
            social: true,
            state_mode: StateMode::Stored,
            seed: 0,
            rating_range: None,
            laplacian_inverse_n: false,
            key_bits: 1024,
            frac_bits: DEFAULT_FRAC_BITS,
            init_std: 0.1,
            transport: TransportKind::InProcess,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.clip > 0.0) {
            return bad("clip coefficient must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if self.dp && !(self.epsilon > 0.0 && self.delta > 0.0 && self.delta < 1.0) {
            return bad("dp requires epsilon > 0 and 0 < delta < 1");
        }
        if self.cipher == CipherMode::He && self.key_bits < 256 {
            return bad("key must have at least 256 bits");
        }
        if let Some((lo, hi)) = self.rating_range {
            if !(lo < hi) {
                return bad("rating range must be increasing");
            }
        }
        Ok(())
    }
}

fn fingerprint(m: &DenseMatrix) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in m.data() {
        for b in v.to_bits().to_be_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Holder of the social graph and the frozen factor `W_P2`.
pub struct SocialParty {
    laplacian: NormalizedLaplacian,
    w_p2: DenseMatrix,
    w_p2_fingerprint: u64,
    profile: SensitivityProfile,
    budget: Option<DpBudget>,
    clip: f64,
    crypto: SideCrypto,
    state: Option<Operand>,
    accountant: Accountant,
    epsilon_limit: Option<f64>,
    last_batch: Option<Vec<usize>>,
    rng: RngState,
}

impl SocialParty {
    /// `budget = None` disables noise.
    pub fn new(
        graph: &SocialGraph,
        inverse_n: bool,
        dim: usize,
        clip: f64,
        budget: Option<DpBudget>,
        delta: f64,
        mut rng: RngState,
    ) -> Self {
        let laplacian = normalized_laplacian(graph, inverse_n);
        let w_p2 = DenseMatrix::random_normal(dim, dim, 1.0, &mut rng).clip_frobenius(clip);
        let profile = SensitivityProfile::new(graph, clip, laplacian.scale());
        let epsilon_limit = budget.as_ref().map(|b| b.epsilon);
        Self {
            w_p2_fingerprint: fingerprint(&w_p2),
            laplacian,
            w_p2,
            profile,
            budget,
            clip,
            crypto: SideCrypto::plaintext(),
            state: None,
            accountant: Accountant::new(graph.n_users(), delta),
            epsilon_limit,
            last_batch: None,
            rng,
        }
    }

    pub fn w_p2(&self) -> &DenseMatrix {
        &self.w_p2
    }

    /// Fingerprint taken when `W_P2` was created.
    pub fn w_p2_fingerprint(&self) -> u64 {
        self.w_p2_fingerprint
    }

    pub fn w_p2_unchanged(&self) -> bool {
        fingerprint(&self.w_p2) == self.w_p2_fingerprint
    }

    pub fn accountant(&self) -> &Accountant {
        &self.accountant
    }

    pub fn laplacian(&self) -> &NormalizedLaplacian {
        &self.laplacian
    }

    pub fn stored_state(&self) -> Option<&Operand> {
        self.state.as_ref()
    }

    fn selector(&self, users: Vec<usize>) -> crate::sandwich::Result<BatchSelector> {
        let sel = BatchSelector::new(users).map_err(|e| ProtocolError::Rejected(e.to_string()))?;
        sel.check_within(self.laplacian.n())
            .map_err(|e| ProtocolError::Rejected(e.to_string()))?;
        Ok(sel)
    }

    fn noise(&mut self, label: &str, users: &[usize], row_bound: f64) -> crate::sandwich::Result<Option<DenseMatrix>> {
        let Some(budget) = &self.budget else {
            return Ok(None);
        };
        let plan = make_noise_plan_with_rows(&self.profile, budget, users, self.w_p2.cols(), row_bound.max(self.clip));
        self.accountant
            .record_plan(label, users, &plan)
            .map_err(|e| ProtocolError::Rejected(e.to_string()))?;
        if let Some(limit) = self.epsilon_limit {
            match self.accountant.check_limit(limit) {
                Ok(_) => {}
                Err(PrivacyError::BudgetExceeded { spent, limit, .. }) => {
                    return Err(ProtocolError::Rejected(format!("{BUDGET_REJECTION} {spent} {limit}")))
                }
                Err(e) => return Err(ProtocolError::Rejected(e.to_string())),
            }
        }
        Ok(Some(plan.sample(&mut self.rng)))
    }

    fn handle_forward(&mut self, payload: &[u8]) -> crate::sandwich::Result<Frame> {
        let mut buf = payload;
        let users = read_indices(&mut buf)?;
        let row_bound = read_f64(&mut buf)?;
        let fresh = match buf.split_first() {
            Some((&1, rest)) => {
                buf = rest;
                Some(self.crypto.read_operand(&mut buf)?)
            }
            Some((&0, rest)) => {
                buf = rest;
                None
            }
            _ => return Err(ProtocolError::Malformed("forward operand flag".into())),
        };
        expect_consumed(buf)?;
        let sel = self.selector(users)?;
        let l = self.laplacian.batch_rows(&sel).map_err(|e| ProtocolError::Rejected(e.to_string()))?;
        let z = self.noise("forward", sel.users(), row_bound)?;
        let m = match (&fresh, &self.state) {
            (Some(m), _) => m,
            (None, Some(s)) => s,
            (None, None) => return Err(ProtocolError::Rejected("no stored state".into())),
        };
        let y = self.crypto.triple(&l, m, &self.w_p2, z.as_ref(), &mut self.rng)?;
        self.last_batch = Some(sel.users().to_vec());
        let mut out = Vec::new();
        y.write_to(&mut out);
        Ok(Frame::new(Tag::FwdResp, out))
    }

    fn handle_backward(&mut self, payload: &[u8]) -> crate::sandwich::Result<Frame> {
        let mut buf = payload;
        let users = read_indices(&mut buf)?;
        let lr = read_f64(&mut buf)?;
        let grad_y = self.crypto.read_operand(&mut buf)?;
        expect_consumed(buf)?;
        if self.last_batch.as_deref() != Some(users.as_slice()) {
            return Err(ProtocolError::OutOfOrder {
                expected: "backward for the last forward batch".into(),
                got: Tag::BwdReq,
            });
        }
        let sel = self.selector(users)?;
        let block = self.laplacian.batch_block(&sel).map_err(|e| ProtocolError::Rejected(e.to_string()))?;
        let z = self.noise("backward", sel.users(), self.clip)?;
        let g = self
            .crypto
            .triple(&block, &grad_y, &self.w_p2.transpose(), z.as_ref(), &mut self.rng)?;
        if let Some(state) = &mut self.state {
            self.crypto.update_state(state, sel.users(), &g, lr)?;
        }
        self.last_batch = None;
        let mut out = Vec::new();
        g.write_to(&mut out);
        Ok(Frame::new(Tag::BwdResp, out))
    }

    fn handle_update(&mut self, payload: &[u8]) -> crate::sandwich::Result<Frame> {
        let mut buf = payload;
        let users = read_indices(&mut buf)?;
        let rows = self.crypto.read_operand(&mut buf)?;
        expect_consumed(buf)?;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| ProtocolError::Rejected("no stored state".into()))?;
        match (state, rows) {
            (Operand::Cipher(s), Operand::Cipher(r)) => s.replace_rows(&users, &r)?,
            (Operand::Plain(s), Operand::Plain(r)) => {
                if r.rows() != users.len() || r.cols() != s.cols() {
                    return Err(ProtocolError::Shape("update rows".into()));
                }
                for (k, &u) in users.iter().enumerate() {
                    if u >= s.rows() {
                        return Err(ProtocolError::Shape(format!("row {u}")));
                    }
                    s.row_mut(u).copy_from_slice(r.row(k));
                }
            }
            _ => return Err(ProtocolError::ModeMismatch),
        }
        Ok(Frame::empty(Tag::Update))
    }
}

impl Responder for SocialParty {
    fn respond(&mut self, req: Frame) -> crate::sandwich::Result<Frame> {
        match req.tag {
            Tag::Hello | Tag::Bye => Ok(Frame::empty(req.tag)),
            Tag::PubKey => {
                self.crypto = SideCrypto::from_key_payload(&req.payload)?;
                Ok(Frame::empty(Tag::PubKey))
            }
            Tag::EncState => {
                let mut buf = req.payload.as_slice();
                let s = self.crypto.read_operand(&mut buf)?;
                expect_consumed(buf)?;
                if s.shape() != (self.laplacian.n(), self.w_p2.rows()) {
                    return Err(ProtocolError::Shape(format!("state {:?}", s.shape())));
                }
                self.state = Some(s);
                Ok(Frame::empty(Tag::EncState))
            }
            Tag::FwdReq => self.handle_forward(&req.payload),
            Tag::BwdReq => self.handle_backward(&req.payload),
            Tag::Update => self.handle_update(&req.payload),
            t => Err(ProtocolError::OutOfOrder {
                expected: "a request".into(),
                got: t,
            }),
        }
    }
}

/// Measured traffic of the recommender end.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub ciphertexts: u64,
    pub messages: u64,
    pub bytes: u64,
    /// `|𝓑_t|` of every training step that reached the social party.
    pub batch_users: Vec<usize>,
    pub n_users: usize,
    pub dim: usize,
    pub state_mode: Option<StateMode>,
    pub eval_ciphertexts: u64,
    pub eval_messages: u64,
    pub eval_bytes: u64,
}

impl CommLedger {
    /// `N·d + Σ_t |𝓑_t|·3d` with a stored state; the fresh mode re-sends the
    /// `N·d` operand every step.
    pub fn expected_ciphertexts(&self) -> u64 {
        let nd = (self.n_users * self.dim) as u64;
        let steps: u64 = self.batch_users.iter().map(|b| (3 * b * self.dim) as u64).sum();
        match self.state_mode {
            Some(StateMode::Stored) => nd + steps,
            Some(StateMode::Fresh) => nd * self.batch_users.len() as u64 + steps,
            None => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub ciphertexts: u64,
    pub expected_ciphertexts: u64,
    pub matches_closed_form: bool,
    pub messages: u64,
    pub bytes: u64,
    pub steps: usize,
    pub eval_ciphertexts: u64,
    pub eval_bytes: u64,
}

pub fn comm_report(ledger: &CommLedger) -> CommReport {
    let expected = ledger.expected_ciphertexts();
    CommReport {
        ciphertexts: ledger.ciphertexts,
        expected_ciphertexts: expected,
        matches_closed_form: ledger.ciphertexts == expected,
        messages: ledger.messages,
        bytes: ledger.bytes,
        steps: ledger.batch_users.len(),
        eval_ciphertexts: ledger.eval_ciphertexts,
        eval_bytes: ledger.eval_bytes,
    }
}

/// Recommender end of the social layer.
pub struct ProtocolClient<'l> {
    link: Box<dyn Link + 'l>,
    crypto: MiddleCrypto,
    rng: RngState,
    dp: bool,
    clip: f64,
    learning_rate: f64,
    mode: StateMode,
    ledger: CommLedger,
    /// Last social output seen for every user.
    y_cache: DenseMatrix,
    in_eval: bool,
}

impl<'l> ProtocolClient<'l> {
    pub fn new(link: Box<dyn Link + 'l>, crypto: MiddleCrypto, config: &TrainConfig, n_users: usize, rng: RngState) -> Self {
        Self {
            link,
            crypto,
            rng,
            dp: config.dp,
            clip: config.clip,
            learning_rate: config.learning_rate,
            mode: config.state_mode,
            ledger: CommLedger {
                n_users,
                dim: config.dim,
                state_mode: Some(config.state_mode),
                ..CommLedger::default()
            },
            y_cache: DenseMatrix::zeros(n_users, config.dim),
            in_eval: false,
        }
    }

    fn exchange(&mut self, frame: Frame, ciphertexts_out: usize) -> crate::sandwich::Result<Frame> {
        let before = self.link.stats();
        let resp = self.link.exchange(frame)?;
        let after = self.link.stats();
        let msgs = (after.messages_sent + after.messages_received) - (before.messages_sent + before.messages_received);
        let bytes = (after.bytes_sent + after.bytes_received) - (before.bytes_sent + before.bytes_received);
        if self.in_eval {
            self.ledger.eval_ciphertexts += ciphertexts_out as u64;
            self.ledger.eval_messages += msgs;
            self.ledger.eval_bytes += bytes;
        } else {
            self.ledger.ciphertexts += ciphertexts_out as u64;
            self.ledger.messages += msgs;
            self.ledger.bytes += bytes;
        }
        Ok(resp)
    }

    fn read_result(&mut self, resp: &Frame) -> crate::sandwich::Result<DenseMatrix> {
        let mut buf = resp.payload.as_slice();
        let op = Operand::read_from(&mut buf)?;
        expect_consumed(buf)?;
        if self.in_eval {
            self.ledger.eval_ciphertexts += op.cells() as u64;
        } else {
            self.ledger.ciphertexts += op.cells() as u64;
        }
        self.crypto.decrypt(&op)
    }

    /// Sends the public key and, with a stored state, the encrypted table.
    pub fn start(&mut self, state: &ModelState) -> crate::sandwich::Result<()> {
        self.exchange(Frame::empty(Tag::Hello), 0)?;
        self.exchange(Frame::new(Tag::PubKey, self.crypto.key_payload()), 0)?;
        if self.mode == StateMode::Stored {
            let s = state.social_input();
            // stored at 4f so that η-scaled updates of 3f-scaled gradients keep one scale
            let op = self.crypto.encrypt(&s, 4, &mut self.rng)?;
            let mut payload = Vec::new();
            op.write_to(&mut payload);
            self.exchange(Frame::new(Tag::EncState, payload), op.cells())?;
        }
        Ok(())
    }

    pub fn finish(&mut self) -> crate::sandwich::Result<()> {
        self.exchange(Frame::empty(Tag::Bye), 0)?;
        Ok(())
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn y_cache(&self) -> &DenseMatrix {
        &self.y_cache
    }

    pub fn link_stats(&self) -> TransportStats {
        self.link.stats()
    }

    /// Full `L̃·M·W_P2` for evaluation, kept out of the training ledger.
    pub fn evaluation_output(&mut self, state: &ModelState) -> Result<DenseMatrix> {
        self.in_eval = true;
        let all = BatchSelector::all(state.n_users());
        let out = self.query_forward(state, &all);
        self.in_eval = false;
        Ok(out?)
    }

    fn query_forward(&mut self, state: &ModelState, batch: &BatchSelector) -> crate::sandwich::Result<DenseMatrix> {
        let mut payload = Vec::new();
        write_indices(batch.users(), &mut payload);
        let mut cells = 0;
        match self.mode {
            StateMode::Stored => {
                let bound = state
                    .social_emb
                    .as_ref()
                    .map_or(self.clip, |s| s.row_l2_norms().into_iter().fold(self.clip, f64::max));
                write_f64(bound, &mut payload);
                payload.push(0);
            }
            StateMode::Fresh => {
                write_f64(self.clip, &mut payload);
                payload.push(1);
                let op = self.crypto.encrypt(&state.social_input(), 1, &mut self.rng)?;
                cells = op.cells();
                op.write_to(&mut payload);
            }
        }
        let resp = self.exchange(Frame::new(Tag::FwdReq, payload), cells)?;
        self.read_result(&resp)
    }
}

impl SocialBranch for ProtocolClient<'_> {
    fn forward(&mut self, state: &ModelState, batch: &BatchSelector) -> crate::model::Result<DenseMatrix> {
        let y = self.query_forward(state, batch)?;
        for (k, &u) in batch.users().iter().enumerate() {
            self.y_cache.row_mut(u).copy_from_slice(y.row(k));
        }
        self.ledger.batch_users.push(batch.len());
        Ok(y)
    }

    fn backward(
        &mut self,
        _state: &ModelState,
        batch: &BatchSelector,
        grad_y: &DenseMatrix,
    ) -> crate::model::Result<DenseMatrix> {
        let m = if self.dp { grad_y.clip_rows(self.clip) } else { grad_y.clone() };
        let op = self.crypto.encrypt(&m, 1, &mut self.rng).map_err(ModelError::from)?;
        let mut payload = Vec::new();
        write_indices(batch.users(), &mut payload);
        let lr = if self.mode == StateMode::Stored { self.learning_rate } else { 0.0 };
        write_f64(lr, &mut payload);
        op.write_to(&mut payload);
        let resp = self.exchange(Frame::new(Tag::BwdReq, payload), op.cells())?;
        Ok(self.read_result(&resp)?)
    }
}

/// Social branch that returns zeros; used when the social layer is off.
struct NoSocial;

impl SocialBranch for NoSocial {
    fn forward(&mut self, state: &ModelState, batch: &BatchSelector) -> crate::model::Result<DenseMatrix> {
        Ok(DenseMatrix::zeros(batch.len(), state.config.dim))
    }

    fn backward(&mut self, state: &ModelState, batch: &BatchSelector, _g: &DenseMatrix) -> crate::model::Result<DenseMatrix> {
        Ok(DenseMatrix::zeros(batch.len(), state.config.dim))
    }
}

/// `(rmse, mae)`.
pub fn metrics(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(RunError::EmptyEvaluation);
    }
    let n = predictions.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

/// Test metrics given the social output of every user.
pub fn evaluate(state: &ModelState, graph: &BipartiteGraph, social_all: &DenseMatrix, test: &[RatingTriple]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(RunError::EmptyEvaluation);
    }
    let all = BatchSelector::all(state.n_users());
    let trace = forward(state, graph, &all, test, social_all.clone())?;
    let targets: Vec<f64> = test.iter().map(|r| r.rating).collect();
    metrics(&trace.predictions, &targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_rmse: Option<f64>,
    pub test_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon_limit: f64,
    pub delta: f64,
    pub epsilon_spent: f64,
    pub b_per_query: f64,
    pub max_queries_per_user: usize,
    pub queries_recorded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_rmse: f64,
    pub final_mae: f64,
    pub best_rmse: f64,
    pub best_mae: f64,
    pub best_epoch: usize,
    pub privacy: Option<PrivacyReport>,
    pub comm: Option<CommReport>,
    pub w_p2_frozen: Option<bool>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "dataset {}  users {}  items {}  train {}  test {}\n",
            self.dataset, self.n_users, self.n_items, self.n_train, self.n_test
        ));
        s.push_str("epoch  train_loss    rmse      mae\n");
        let fmt = |v: Option<f64>| v.map_or("      -".to_string(), |v| format!("{v:.5}"));
        for e in &self.epochs {
            s.push_str(&format!(
                "{:>5}  {:>10}  {:>7}  {:>7}\n",
                e.epoch,
                fmt(e.train_loss),
                fmt(e.test_rmse),
                fmt(e.test_mae)
            ));
        }
        s.push_str(&format!(
            "final rmse {:.5} mae {:.5} | best rmse {:.5} mae {:.5} (epoch {})\n",
            self.final_rmse, self.final_mae, self.best_rmse, self.best_mae, self.best_epoch
        ));
        if let Some(p) = &self.privacy {
            s.push_str(&format!(
                "privacy epsilon {:.4} of {:.4} at delta {:e} (b/query {:.5}, max queries/user {})\n",
                p.epsilon_spent, p.epsilon_limit, p.delta, p.b_per_query, p.max_queries_per_user
            ));
        }
        if let Some(c) = &self.comm {
            s.push_str(&format!(
                "comm ciphertexts {} (closed form {}, {}) messages {} bytes {}\n",
                c.ciphertexts,
                c.expected_ciphertexts,
                if c.matches_closed_form { "match" } else { "MISMATCH" },
                c.messages,
                c.bytes
            ));
        }
        s
    }
}

/// Report plus the final recommender state.
pub struct TrainOutcome {
    pub report: RunReport,
    pub state: ModelState,
    pub graph: BipartiteGraph,
    pub ledger: Option<CommLedger>,
    /// Social output used by the last evaluation.
    pub social_output: DenseMatrix,
}

/// Everything the recommender needs to score users after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub state: ModelState,
    pub social_output: DenseMatrix,
}

impl ModelSnapshot {
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec(self).map_err(std::io::Error::other)?)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn evaluate(&self, bundle: &DatasetBundle) -> Result<(f64, f64)> {
        if bundle.n_users != self.state.n_users() || bundle.n_items != self.state.n_items() {
            return Err(RunError::Config("snapshot does not match the dataset".into()));
        }
        let graph = BipartiteGraph::new(bundle.n_users, bundle.n_items, &bundle.train);
        evaluate(&self.state, &graph, &self.social_output, &bundle.test)
    }
}

/// Record batches of every epoch, fixed up front from the seed.
pub fn schedule(n_train: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = RngState::new(seed).fork(3);
    let size = if batch_size == 0 { n_train.max(1) } else { batch_size };
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n_train).collect();
            rng.shuffle(&mut order);
            order.chunks(size).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

/// Largest number of queries any user takes part in: two per batch that
/// contains one of its records.
pub fn max_queries_per_user(train: &[RatingTriple], plan: &[Vec<Vec<usize>>], n_users: usize) -> usize {
    let mut count = vec![0usize; n_users];
    let mut mark = vec![usize::MAX; n_users];
    let mut stamp = 0;
    for epoch in plan {
        for batch in epoch {
            for &k in batch {
                let u = train[k].user;
                if mark[u] != stamp {
                    mark[u] = stamp;
                    count[u] += 2;
                }
            }
            stamp += 1;
        }
    }
    count.into_iter().max().unwrap_or(0)
}

enum PartyHandle<'p> {
    Local(&'p SocialParty),
    Remote(JoinHandle<crate::sandwich::Result<SocialParty>>),
}

pub fn train(bundle: &DatasetBundle, config: &TrainConfig) -> Result<RunReport> {
    train_full(bundle, config).map(|o| o.report)
}

pub fn train_full(bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let root = RngState::new(config.seed);
    let range = config.rating_range.unwrap_or(bundle.rating_range);
    let mut mc = ModelConfig::new(config.dim);
    mc.hidden = config.hidden.unwrap_or(2 * config.dim);
    mc.beta = config.beta;
    mc.clip = config.clip;
    mc.rating_range = range;
    mc.fusion = config.fusion;
    mc.social = config.social;
    mc.state_mode = config.state_mode;
    mc.init_std = config.init_std;
    let mut state = ModelState::init(bundle.n_users, bundle.n_items, mc, &mut root.fork(1));
    let graph = BipartiteGraph::new(bundle.n_users, bundle.n_items, &bundle.train);
    let plan = schedule(bundle.train.len(), config.batch_size, config.epochs, config.seed);

    let social_graph = SocialGraph::from_edges(bundle.n_users, &bundle.social)
        .map_err(|e| RunError::Config(format!("social graph: {e}")))?;
    let max_q = max_queries_per_user(&bundle.train, &plan, bundle.n_users);
    let budget = if config.dp && config.social {
        Some(DpBudget::calibrate(config.epsilon, config.delta, max_q.max(1))?)
    } else {
        None
    };

    let mut report = RunReport {
        dataset: bundle.name.clone(),
        n_users: bundle.n_users,
        n_items: bundle.n_items,
        n_train: bundle.train.len(),
        n_test: bundle.test.len(),
        config: config.clone(),
        epochs: Vec::new(),
        final_rmse: f64::NAN,
        final_mae: f64::NAN,
        best_rmse: f64::INFINITY,
        best_mae: f64::INFINITY,
        best_epoch: 0,
        privacy: None,
        comm: None,
        w_p2_frozen: None,
    };

    if !config.social {
        let mut branch = NoSocial;
        let social_output = run_epochs(&mut state, &graph, bundle, config, &plan, &mut branch, &mut report, |_, s| {
            Ok(DenseMatrix::zeros(s.n_users(), s.config.dim))
        })?
        .unwrap_or_else(|| DenseMatrix::zeros(state.n_users(), state.config.dim));
        finalize_best(&mut report);
        return Ok(TrainOutcome {
            report,
            state,
            graph,
            ledger: None,
            social_output,
        });
    }

    let crypto = match config.cipher {
        CipherMode::He => MiddleCrypto::generate(config.key_bits, config.frac_bits, &mut root.fork(5))?,
        CipherMode::Plaintext => MiddleCrypto::plaintext(),
    };
    let mut party = SocialParty::new(
        &social_graph,
        config.laplacian_inverse_n,
        config.dim,
        config.clip,
        budget.clone(),
        config.delta,
        root.fork(2),
    );

    let (ledger, social_output, party_after) = match config.transport {
        TransportKind::InProcess => {
            let link: Box<dyn Link> = Box::new(InProcessLink::new(&mut party));
            let mut client = ProtocolClient::new(link, crypto, config, bundle.n_users, root.fork(6));
            let last = drive(&mut client, &mut state, &graph, bundle, config, &plan, &mut report)?;
            let ledger = client.ledger().clone();
            let y = last.unwrap_or_else(|| client.y_cache().clone());
            drop(client);
            (ledger, y, PartyHandle::Local(&party))
        }
        TransportKind::Socket => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| RunError::Protocol(e.into()))?;
            let addr = listener.local_addr().map_err(|e| RunError::Protocol(e.into()))?;
            let mut moved = party;
            let handle = std::thread::spawn(move || -> crate::sandwich::Result<SocialParty> {
                let (stream, _) = listener.accept()?;
                let mut session = Session::server(TcpTransport::from_stream(stream));
                serve(&mut moved, &mut session)?;
                Ok(moved)
            });
            let link: Box<dyn Link> = Box::new(RemoteLink::new(
                TcpTransport::connect(addr).map_err(RunError::Protocol)?,
            ));
            let mut client = ProtocolClient::new(link, crypto, config, bundle.n_users, root.fork(6));
            let outcome = drive(&mut client, &mut state, &graph, bundle, config, &plan, &mut report);
            let ledger = client.ledger().clone();
            let cache = client.y_cache().clone();
            drop(client);
            let y = outcome?.unwrap_or(cache);
            (ledger, y, PartyHandle::Remote(handle))
        }
    };

    let collect = |p: &SocialParty, report: &mut RunReport| -> Result<()> {
        report.w_p2_frozen = Some(p.w_p2_unchanged());
        if let Some(b) = &budget {
            report.privacy = Some(PrivacyReport {
                epsilon_limit: b.epsilon,
                delta: config.delta,
                epsilon_spent: p.accountant().epsilon(config.delta)?,
                b_per_query: b.b,
                max_queries_per_user: max_q,
                queries_recorded: p.accountant().queries().len(),
            });
        }
        Ok(())
    };
    match party_after {
        PartyHandle::Local(p) => collect(p, &mut report)?,
        PartyHandle::Remote(h) => {
            let p = h
                .join()
                .map_err(|_| RunError::Protocol(ProtocolError::Rejected("social party thread panicked".into())))??;
            collect(&p, &mut report)?;
        }
    }
    report.comm = Some(comm_report(&ledger));
    finalize_best(&mut report);
    Ok(TrainOutcome {
        report,
        state,
        graph,
        ledger: Some(ledger),
        social_output,
    })
}

fn drive(
    client: &mut ProtocolClient<'_>,
    state: &mut ModelState,
    graph: &BipartiteGraph,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    plan: &[Vec<Vec<usize>>],
    report: &mut RunReport,
) -> Result<Option<DenseMatrix>> {
    client.start(state)?;
    let dp = config.dp;
    let result = run_epochs(state, graph, bundle, config, plan, client, report, |c, s| {
        if dp {
            // noisy outputs already released are reused; no new query
            Ok(c.y_cache().clone())
        } else {
            c.evaluation_output(s)
        }
    });
    match result {
        Ok(last) => {
            client.finish()?;
            Ok(last)
        }
        Err(e) => {
            let _ = client.finish();
            Err(e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epochs<B: SocialBranch>(
    state: &mut ModelState,
    graph: &BipartiteGraph,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    plan: &[Vec<Vec<usize>>],
    branch: &mut B,
    report: &mut RunReport,
    mut social_all: impl FnMut(&mut B, &ModelState) -> Result<DenseMatrix>,
) -> Result<Option<DenseMatrix>> {
    let has_test = !bundle.test.is_empty();
    let mut last = None;
    let mut eval = |branch: &mut B, state: &ModelState, epoch: usize, loss: Option<f64>, report: &mut RunReport| -> Result<()> {
        let (rmse, mae) = if has_test {
            let y = social_all(branch, state)?;
            let (r, m) = evaluate(state, graph, &y, &bundle.test)?;
            last = Some(y);
            (Some(r), Some(m))
        } else {
            (None, None)
        };
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: loss,
            test_rmse: rmse,
            test_mae: mae,
        });
        Ok(())
    };
    if config.eval_every_epoch {
        eval(branch, state, 0, None, report)?;
    }
    for (e, batches) in plan.iter().enumerate() {
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for batch in batches {
            let records: Vec<RatingTriple> = batch.iter().map(|&k| bundle.train[k]).collect();
            let sel = BatchSelector::from_unsorted(records.iter().map(|r| r.user));
            let y = branch.forward(state, &sel)?;
            let trace = forward(state, graph, &sel, &records, y)?;
            let grads = backward(state, graph, &trace, branch)?;
            if !grads.is_finite() {
                return Err(RunError::Model(ModelError::Shape("non-finite gradient".into())));
            }
            sgd_step(state, &grads, config.learning_rate)?;
            loss_sum += trace.loss * records.len() as f64;
            n += records.len();
        }
        let loss = if n > 0 { Some(loss_sum / n as f64) } else { None };
        if config.eval_every_epoch || e + 1 == plan.len() {
            eval(branch, state, e + 1, loss, report)?;
        } else {
            report.epochs.push(EpochRecord {
                epoch: e + 1,
                train_loss: loss,
                test_rmse: None,
                test_mae: None,
            });
        }
        log::info!("epoch {} loss {:?}", e + 1, loss);
    }
    Ok(last)
}

fn finalize_best(report: &mut RunReport) {
    let evaluated: Vec<&EpochRecord> = report.epochs.iter().filter(|e| e.test_rmse.is_some()).collect();
    if let Some(last) = evaluated.last() {
        report.final_rmse = last.test_rmse.unwrap();
        report.final_mae = last.test_mae.unwrap();
    }
    for e in evaluated {
        let r = e.test_rmse.unwrap();
        if r < report.best_rmse {
            report.best_rmse = r;
            report.best_mae = e.test_mae.unwrap();
            report.best_epoch = e.epoch;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Protocol checks on toy shapes, in the requested cipher mode.
pub fn selftest(cipher: CipherMode, key_bits: usize, seed: u64) -> Vec<SelftestCheck> {
    use crate::paillier::{FixedPointCodec, KeyPair};
    use crate::sandwich::{perturb_factorization, sandwich_multiply, MiddleHolder, SideHolder};
    use num_bigint::RandBigInt;

    let mut out = Vec::new();
    let mut push = |name: &str, r: std::result::Result<String, String>| {
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        out.push(SelftestCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    };
    let mut rng = RngState::new(seed);

    let keys = if cipher == CipherMode::He {
        match KeyPair::generate(key_bits, &mut rng) {
            Ok(kp) => {
                push("keygen", Ok(format!("{} bits", kp.public().bits())));
                Some(kp)
            }
            Err(e) => {
                push("keygen", Err(e.to_string()));
                None
            }
        }
    } else {
        None
    };

    if let Some(kp) = &keys {
        let pk = kp.public();
        let mut bad = 0;
        for _ in 0..50 {
            let a = rng.gen_biguint_below(pk.n());
            let b = rng.gen_biguint_below(pk.n());
            let k = rng.gen_biguint_below(pk.n());
            let ca = pk.encrypt(&a, &mut rng).unwrap();
            let cb = pk.encrypt(&b, &mut rng).unwrap();
            let sum = kp.decrypt(&pk.add(&ca, &cb).unwrap()).unwrap();
            let prod = kp.decrypt(&pk.scalar_mul(&ca, &k).unwrap()).unwrap();
            if sum != (&a + &b) % pk.n() || prod != (&a * &k) % pk.n() {
                bad += 1;
            }
        }
        push(
            "homomorphic laws",
            if bad == 0 { Ok("50 cases".into()) } else { Err(format!("{bad} failures")) },
        );
    }

    let middle_crypto = |kp: &Option<KeyPair>| match kp {
        Some(kp) => MiddleCrypto::from_keypair(kp.clone(), FixedPointCodec::new(kp.public(), DEFAULT_FRAC_BITS)),
        None => MiddleCrypto::plaintext(),
    };

    let mut worst: f64 = 0.0;
    let mut failure = None;
    for t in 0..5 {
        let (p, q, r, s) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let l = DenseMatrix::random_normal(p, q, 1.0, &mut rng);
        let m = DenseMatrix::random_normal(q, r, 1.0, &mut rng);
        let n = DenseMatrix::random_normal(r, s, 1.0, &mut rng);
        let want = l.matmul(&m).unwrap().matmul(&n).unwrap();
        let mut side = SideHolder::new(l, n, None, rng.fork(100 + t));
        let mut mid = MiddleHolder::new(m, middle_crypto(&keys), rng.fork(200 + t));
        match sandwich_multiply(&mut side, &mut mid) {
            Ok((j, _)) => worst = worst.max(j.sub(&want).unwrap().max_abs()),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    push(
        "sandwich product",
        match failure {
            Some(e) => Err(e),
            None if worst <= 1e-6 => Ok(format!("max error {worst:.2e}")),
            None => Err(format!("max error {worst:.2e}")),
        },
    );

    let l = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
    let m = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
    let n = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
    push(
        "alternative factorization",
        perturb_factorization(&l, &m, &n, (0, 1), 1e-6)
            .map(|_| "residual within 1e-8".to_string())
            .map_err(|e| e.to_string()),
    );

    let (ratings, trust) = crate::dataio::synthetic(8, 6, 4, 2, (1.0, 5.0), seed);
    let bundle = crate::dataio::assemble("toy", &ratings, &trust, (1.0, 5.0), 0.25, seed);
    match bundle {
        Ok(bundle) => {
            let cfg = TrainConfig {
                dim: 4,
                epochs: 2,
                batch_size: 8,
                learning_rate: 0.1,
                dp: false,
                cipher,
                key_bits,
                seed,
                ..TrainConfig::default()
            };
            match train(&bundle, &cfg) {
                Ok(rep) => {
                    let comm = rep.comm.as_ref().unwrap();
                    push(
                        "toy training ledger",
                        if comm.matches_closed_form {
                            Ok(format!("{} ciphertexts", comm.ciphertexts))
                        } else {
                            Err(format!("{} vs {}", comm.ciphertexts, comm.expected_ciphertexts))
                        },
                    );
                    push(
                        "frozen social factor",
                        if rep.w_p2_frozen == Some(true) { Ok("unchanged".into()) } else { Err("changed".into()) },
                    );
                }
                Err(e) => push("toy training ledger", Err(e.to_string())),
            }
        }
        Err(e) => push("toy training ledger", Err(e.to_string())),
    }
    out
}

/// Per-field counters for display.
pub fn ledger_summary(ledger: &CommLedger) -> BTreeMap<&'static str, u64> {
    let mut m = BTreeMap::new();
    m.insert("ciphertexts", ledger.ciphertexts);
    m.insert("expected", ledger.expected_ciphertexts());
    m.insert("messages", ledger.messages);
    m.insert("bytes", ledger.bytes);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{assemble, synthetic};

    fn toy_bundle(seed: u64) -> DatasetBundle {
        let (r, t) = synthetic(10, 8, 5, 2, (1.0, 5.0), seed);
        assemble("toy", &r, &t, (1.0, 5.0), 0.2, seed).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            epochs: 2,
            batch_size: 6,
            learning_rate: 0.1,
            dp: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(metrics(&[3.0, 0.0], &[1.0, 2.0]).unwrap(), (2.0, 2.0));
        assert!(metrics(&[], &[]).is_err());
        let mut rng = RngState::new(1);
        let p: Vec<f64> = (0..40).map(|_| rng.standard_normal()).collect();
        let t: Vec<f64> = (0..40).map(|_| rng.standard_normal()).collect();
        let (mut se, mut ae) = (0.0, 0.0);
        for i in 0..40 {
            se += (p[i] - t[i]).powi(2);
            ae += (p[i] - t[i]).abs();
        }
        let (r, m) = metrics(&p, &t).unwrap();
        assert!((r - (se / 40.0).sqrt()).abs() < 1e-12);
        assert!((m - ae / 40.0).abs() < 1e-12);
        assert!(r >= m);
    }

    #[test]
    fn ledger_closed_form_examples() {
        let mut l = CommLedger {
            n_users: 10,
            dim: 8,
            state_mode: Some(StateMode::Stored),
            ..CommLedger::default()
        };
        assert_eq!(l.expected_ciphertexts(), 80);
        l.batch_users.push(4);
        assert_eq!(l.expected_ciphertexts(), 176);
    }

    #[test]
    fn measured_ciphertexts_match_closed_form() {
        let b = toy_bundle(2);
        for mode in [StateMode::Stored, StateMode::Fresh] {
            let cfg = TrainConfig {
                state_mode: mode,
                ..small_config()
            };
            let rep = train(&b, &cfg).unwrap();
            let c = rep.comm.unwrap();
            assert!(c.matches_closed_form, "{mode:?}: {} vs {}", c.ciphertexts, c.expected_ciphertexts);
            assert!(c.steps > 0);
            assert_eq!(rep.w_p2_frozen, Some(true));
        }
    }

    #[test]
    fn zero_epochs_sends_only_the_state() {
        let b = toy_bundle(3);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let rep = train(&b, &cfg).unwrap();
        assert_eq!(rep.comm.unwrap().ciphertexts, (b.n_users * 4) as u64);
    }

    #[test]
    fn plaintext_runs_are_reproducible() {
        let b = toy_bundle(4);
        let a = train(&b, &small_config()).unwrap().to_json();
        let c = train(&b, &small_config()).unwrap().to_json();
        assert_eq!(a, c);
        let dp = TrainConfig {
            dp: true,
            ..small_config()
        };
        assert_eq!(train(&b, &dp).unwrap().to_json(), train(&b, &dp).unwrap().to_json());
    }

    #[test]
    fn zero_learning_rate_keeps_metrics() {
        let b = toy_bundle(5);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..small_config()
        };
        let rep = train(&b, &cfg).unwrap();
        assert_eq!(rep.epochs[0].test_rmse, rep.epochs[1].test_rmse);
        assert_eq!(rep.epochs[0].test_mae, rep.epochs[1].test_mae);
    }

    #[test]
    fn dp_budget_is_spent_exactly() {
        let b = toy_bundle(6);
        let cfg = TrainConfig {
            dp: true,
            epsilon: 3.0,
            ..small_config()
        };
        let rep = train(&b, &cfg).unwrap();
        let p = rep.privacy.unwrap();
        assert!((p.epsilon_spent - 3.0).abs() < 1e-6, "{}", p.epsilon_spent);
        assert!(p.max_queries_per_user >= 2);
    }

    #[test]
    fn socket_transport_matches_in_process() {
        let b = toy_bundle(7);
        let local = train(&b, &small_config()).unwrap();
        let cfg = TrainConfig {
            transport: TransportKind::Socket,
            ..small_config()
        };
        let remote = train(&b, &cfg).unwrap();
        assert_eq!(local.epochs, remote.epochs);
        assert_eq!(local.comm, remote.comm);
    }

    #[test]
    fn social_off_runs_without_protocol() {
        let b = toy_bundle(8);
        let cfg = TrainConfig {
            social: false,
            ..small_config()
        };
        let rep = train(&b, &cfg).unwrap();
        assert!(rep.comm.is_none());
        assert!(rep.final_rmse.is_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let b = toy_bundle(9);
        for cfg in [
            TrainConfig {
                clip: 0.0,
                ..small_config()
            },
            TrainConfig {
                dp: true,
                epsilon: 0.0,
                ..small_config()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..small_config()
            },
        ] {
            assert!(matches!(train(&b, &cfg), Err(RunError::Config(_))));
        }
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let g = SocialGraph::from_edges(3, &[(0, 1)]).unwrap();
        let mut party = SocialParty::new(&g, false, 2, 0.1, None, 1e-4, RngState::new(0));
        let mut payload = Vec::new();
        write_indices(&[0, 1], &mut payload);
        write_f64(0.0, &mut payload);
        Operand::Plain(DenseMatrix::zeros(2, 2)).write_to(&mut payload);
        assert!(matches!(
            party.respond(Frame::new(Tag::BwdReq, payload)),
            Err(ProtocolError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn budget_overrun_is_reported() {
        let g = SocialGraph::from_edges(3, &[(0, 1)]).unwrap();
        let budget = DpBudget::calibrate(1.0, 1e-4, 1).unwrap();
        let mut party = SocialParty::new(&g, false, 2, 0.1, Some(budget), 1e-4, RngState::new(0));
        party
            .respond(Frame::new(Tag::EncState, {
                let mut p = Vec::new();
                Operand::Plain(DenseMatrix::zeros(3, 2)).write_to(&mut p);
                p
            }))
            .unwrap();
        let req = || {
            let mut p = Vec::new();
            write_indices(&[0], &mut p);
            write_f64(0.1, &mut p);
            p.push(0);
            Frame::new(Tag::FwdReq, p)
        };
        party.respond(req()).unwrap();
        let err = party.respond(req()).unwrap_err();
        assert!(matches!(RunError::from(err), RunError::BudgetExceeded { .. }));
    }

    #[test]
    fn stored_state_update_message() {
        let g = SocialGraph::empty(3);
        let mut party = SocialParty::new(&g, false, 2, 0.1, None, 1e-4, RngState::new(0));
        let mut p = Vec::new();
        Operand::Plain(DenseMatrix::zeros(3, 2)).write_to(&mut p);
        party.respond(Frame::new(Tag::EncState, p)).unwrap();
        let mut p = Vec::new();
        write_indices(&[2], &mut p);
        Operand::Plain(DenseMatrix::from_rows(&[vec![1.0, 2.0]])).write_to(&mut p);
        party.respond(Frame::new(Tag::Update, p)).unwrap();
        match party.stored_state().unwrap() {
            Operand::Plain(s) => {
                assert_eq!(s.row(2), &[1.0, 2.0]);
                assert_eq!(s.row(0), &[0.0, 0.0]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn snapshot_reproduces_final_metrics() {
        let b = toy_bundle(10);
        let out = train_full(&b, &small_config()).unwrap();
        let snap = ModelSnapshot {
            state: out.state.clone(),
            social_output: out.social_output.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        snap.save(&path).unwrap();
        let back = ModelSnapshot::load(&path).unwrap();
        assert_eq!(back, snap);
        let (r, m) = back.evaluate(&b).unwrap();
        assert_eq!((r, m), (out.report.final_rmse, out.report.final_mae));
    }

    #[test]
    fn plaintext_selftest_passes() {
        let checks = selftest(CipherMode::Plaintext, 512, 3);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
