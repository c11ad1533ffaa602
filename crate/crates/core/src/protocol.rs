//! In-process simulation of the five-round protocol between a coordinator
//! and `m` agents.
//!
//! 1. Agents report sizes; the coordinator draws `L` centers and fixes `K*`.
//! 2. Agents solve their ladders and upload W-values plus the center
//!    coefficients of every ladder difference.
//! 3. The coordinator averages the uploads and broadcasts the result.
//! 4. Agents run the stopping rule against the global approximation and
//!    report their `lambda_j*`; the coordinator broadcasts all of them.
//! 5. For a query point each agent returns `f_{D_j', lambda_j*}(x)` for every
//!    `j`, and the coordinator forms the double weighted average.
//!
//! Rounds are synchronous and ordered by agent index. Every message passes
//! through a [`Ledger`] that the privacy audit inspects afterwards.

use std::cell::RefCell;
use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{
    row_of, synthesize_global, GlobalApprox, LocalApproxCoeffs, LocalApproxSolver, UploadView,
};
use crate::datagen::KernelExpansion;
use crate::error::{arg, Error, Result};
use crate::kernel::{check_point, gram_matrix, InputDomain, KernelSpec};
use crate::krr::{
    ladder_cap, lambda_at, mu_for_agent, CapMode, Ladder, LocalDataset, LocalModelSet, MuMode,
    SpectralGram,
};
use crate::lepskii::{threshold_at, SelectionResult};
use crate::points::Points;

const SCALAR_BYTES: usize = 8;

/// How the coordinator produces the shared centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum CenterScheme {
    /// I.i.d. uniform draws in the input domain.
    IidUniform,
    /// Halton points, one prime base per coordinate.
    Halton,
    /// Centers fixed by the experimenter.
    Explicit { dim: usize, coords: Vec<f64> },
}

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while index > 0 {
        out += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    out
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// First `count` Halton points (indices `1..=count`) mapped into the domain.
pub fn halton_points(count: usize, domain: &InputDomain) -> Result<Points> {
    let d = domain.dim();
    if d > PRIMES.len() {
        return arg(format!(
            "Halton centers support at most {} dimensions",
            PRIMES.len()
        ));
    }
    let mut coords = Vec::with_capacity(count * d);
    for i in 1..=count as u64 {
        for (c, base) in PRIMES.iter().take(d).enumerate() {
            let (lo, hi) = (domain.lower[c], domain.upper[c]);
            coords.push(lo + (hi - lo) * radical_inverse(i, *base));
        }
    }
    Points::new(d, coords)
}

fn uniform_points(count: usize, domain: &InputDomain, seed: u64) -> Result<Points> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = domain.dim();
    let mut coords = Vec::with_capacity(count * d);
    for _ in 0..count {
        for c in 0..d {
            let (lo, hi) = (domain.lower[c], domain.upper[c]);
            coords.push(lo + (hi - lo) * rng.gen::<f64>());
        }
    }
    Points::new(d, coords)
}

/// Everything communicated between the coordinator and the agents.
///
/// No variant has room for sample pairs; coefficient matrices travel as
/// row-major arrays with `L` columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    SizeReport {
        n: usize,
    },
    CenterBroadcast {
        dim: usize,
        centers: Vec<f64>,
        k_star: usize,
    },
    LocalUpload {
        w: Vec<f64>,
        coeffs: Vec<f64>,
    },
    GlobalBroadcast {
        w_bar: Vec<f64>,
        coeffs: Vec<f64>,
    },
    SelectionReport {
        lambda: f64,
    },
    SelectionBroadcast {
        lambdas: Vec<f64>,
    },
    PredictionRow {
        values: Vec<f64>,
    },
}

impl Message {
    /// Protocol round the message belongs to.
    pub fn step(&self) -> u8 {
        match self {
            Message::SizeReport { .. } | Message::CenterBroadcast { .. } => 1,
            Message::LocalUpload { .. } => 2,
            Message::GlobalBroadcast { .. } => 3,
            Message::SelectionReport { .. } | Message::SelectionBroadcast { .. } => 4,
            Message::PredictionRow { .. } => 5,
        }
    }

    /// Number of transmitted scalars (integers count as one each).
    pub fn scalars(&self) -> usize {
        match self {
            Message::SizeReport { .. } | Message::SelectionReport { .. } => 1,
            Message::CenterBroadcast { centers, .. } => centers.len() + 1,
            Message::LocalUpload { w, coeffs } => w.len() + coeffs.len(),
            Message::GlobalBroadcast { w_bar, coeffs } => w_bar.len() + coeffs.len(),
            Message::SelectionBroadcast { lambdas } => lambdas.len(),
            Message::PredictionRow { values } => values.len(),
        }
    }

    pub fn bytes(&self) -> usize {
        self.scalars() * SCALAR_BYTES
    }

    /// Every floating-point payload value.
    pub fn float_payload(&self) -> Vec<f64> {
        match self {
            Message::SizeReport { .. } => Vec::new(),
            Message::CenterBroadcast { centers, .. } => centers.clone(),
            Message::LocalUpload { w, coeffs } => w.iter().chain(coeffs).copied().collect(),
            Message::GlobalBroadcast { w_bar, coeffs } => {
                w_bar.iter().chain(coeffs).copied().collect()
            }
            Message::SelectionReport { lambda } => vec![*lambda],
            Message::SelectionBroadcast { lambdas } => lambdas.clone(),
            Message::PredictionRow { values } => values.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Coordinator,
    Agent(usize),
    /// One message delivered to every agent.
    AllAgents,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Envelope {
    pub step: u8,
    pub from: Endpoint,
    pub to: Endpoint,
    pub message: Message,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StepTotals {
    pub messages: usize,
    pub scalars: usize,
    pub bytes: usize,
}

/// Record of every message sent.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    envelopes: Vec<Envelope>,
}

impl Ledger {
    pub fn record(&mut self, from: Endpoint, to: Endpoint, message: Message) {
        self.envelopes.push(Envelope {
            step: message.step(),
            from,
            to,
            message,
        });
    }

    pub fn envelopes(&self) -> &[Envelope] {
        &self.envelopes
    }

    /// Totals for steps 1 through 5 (index 0 is step 1).
    pub fn step_totals(&self) -> [StepTotals; 5] {
        let mut out = [StepTotals::default(); 5];
        for e in &self.envelopes {
            let t = &mut out[(e.step - 1) as usize];
            t.messages += 1;
            t.scalars += e.message.scalars();
            t.bytes += e.message.bytes();
        }
        out
    }

    pub fn total_scalars(&self) -> usize {
        self.envelopes.iter().map(|e| e.message.scalars()).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.envelopes.iter().map(|e| e.message.bytes()).sum()
    }

    /// CSV rows `step,from,to,kind,scalars,bytes`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "from", "to", "kind", "scalars", "bytes"])?;
        for e in &self.envelopes {
            let kind = match &e.message {
                Message::SizeReport { .. } => "size_report",
                Message::CenterBroadcast { .. } => "center_broadcast",
                Message::LocalUpload { .. } => "local_upload",
                Message::GlobalBroadcast { .. } => "global_broadcast",
                Message::SelectionReport { .. } => "selection_report",
                Message::SelectionBroadcast { .. } => "selection_broadcast",
                Message::PredictionRow { .. } => "prediction_row",
            };
            w.write_record([
                e.step.to_string(),
                endpoint_label(e.from),
                endpoint_label(e.to),
                kind.to_string(),
                e.message.scalars().to_string(),
                e.message.bytes().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn endpoint_label(e: Endpoint) -> String {
    match e {
        Endpoint::Coordinator => "coordinator".into(),
        Endpoint::Agent(j) => format!("agent{j}"),
        Endpoint::AllAgents => "all_agents".into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub messages: usize,
    pub per_step: [StepTotals; 5],
}

/// Checks that no message carries raw samples: no payload value may equal a
/// non-zero label of any agent, and nothing an agent sends may equal one of
/// its non-zero input coordinates.
pub fn audit_privacy(ledger: &Ledger, datasets: &[LocalDataset]) -> Result<AuditReport> {
    let labels: HashSet<u64> = datasets
        .iter()
        .flat_map(|d| d.y.iter())
        .filter(|v| **v != 0.0)
        .map(|v| v.to_bits())
        .collect();
    let inputs: HashSet<u64> = datasets
        .iter()
        .flat_map(|d| d.x.coords().iter())
        .filter(|v| **v != 0.0)
        .map(|v| v.to_bits())
        .collect();
    for (i, e) in ledger.envelopes().iter().enumerate() {
        let uplink = matches!(e.from, Endpoint::Agent(_));
        for v in e.message.float_payload() {
            let bits = v.to_bits();
            if labels.contains(&bits) {
                return Err(Error::Audit {
                    step: e.step,
                    message: i,
                    reason: format!("payload contains the raw label {v}"),
                });
            }
            if uplink && inputs.contains(&bits) {
                return Err(Error::Audit {
                    step: e.step,
                    message: i,
                    reason: format!("agent payload contains the raw input coordinate {v}"),
                });
            }
        }
    }
    Ok(AuditReport {
        messages: ledger.envelopes().len(),
        per_step: ledger.step_totals(),
    })
}

/// Knobs of one protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub b: f64,
    pub cap_mode: CapMode,
    pub mu_mode: MuMode,
    pub centers: CenterScheme,
    /// Number of centers `L`; defaults to the largest agent size.
    #[serde(default)]
    pub n_centers: Option<usize>,
}

/// One local agent. Its samples never leave this struct except as the
/// derived quantities in [`Message`]s.
#[derive(Debug)]
pub struct Agent {
    id: usize,
    data: LocalDataset,
    gram: DMatrix<f64>,
    spectral: SpectralGram,
    models: Option<LocalModelSet>,
    cross: Option<DMatrix<f64>>,
    center_gram: Option<DMatrix<f64>>,
    approx: Option<LocalApproxCoeffs>,
    mu: Option<f64>,
    jitter: f64,
    selection: Option<SelectionResult>,
    /// Kernel block of the most recent step-5 query batch.
    query_cache: RefCell<Option<(Points, DMatrix<f64>)>>,
}

impl Agent {
    pub fn new(id: usize, data: LocalDataset, kernel: &KernelSpec) -> Result<Self> {
        let gram = gram_matrix(kernel, &data.x, &data.x)?;
        let spectral = SpectralGram::new(&gram)?;
        Ok(Self {
            id,
            data,
            gram,
            spectral,
            models: None,
            cross: None,
            center_gram: None,
            approx: None,
            mu: None,
            jitter: 0.0,
            selection: None,
            query_cache: RefCell::new(None),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn size_report(&self) -> Message {
        Message::SizeReport { n: self.n() }
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn models(&self) -> Option<&LocalModelSet> {
        self.models.as_ref()
    }

    pub fn local_approx(&self) -> Option<&LocalApproxCoeffs> {
        self.approx.as_ref()
    }

    pub fn selection(&self) -> Option<&SelectionResult> {
        self.selection.as_ref()
    }

    pub fn mu(&self) -> Option<f64> {
        self.mu
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub(crate) fn dataset(&self) -> &LocalDataset {
        &self.data
    }

    /// Solves the ladder, fits the center approximations of every ladder
    /// difference and returns the upload.
    pub fn step2_local(
        &mut self,
        broadcast: &Message,
        kernel: &KernelSpec,
        b: f64,
        mu_mode: MuMode,
    ) -> Result<Message> {
        let Message::CenterBroadcast {
            dim,
            centers,
            k_star,
        } = broadcast
        else {
            return Err(Error::Protocol(format!(
                "agent {} expected the center broadcast",
                self.id
            )));
        };
        let centers = Points::new(*dim, centers.clone())?;
        let ladder = Ladder::new(b, *k_star)?;
        let models = LocalModelSet::fit(&self.spectral, &self.data.y, ladder).map_err(|e| {
            Error::AgentSolve {
                agent: self.id,
                k: 0,
                reason: e.to_string(),
            }
        })?;
        let center_gram = gram_matrix(kernel, &centers, &centers)?;
        let cross = gram_matrix(kernel, &self.data.x, &centers)?;
        let mu = mu_for_agent(self.n(), b, kernel.kappa(), mu_mode);
        let solver =
            LocalApproxSolver::new(cross, &center_gram, mu).map_err(|e| Error::AgentSolve {
                agent: self.id,
                k: 2,
                reason: e.to_string(),
            })?;
        let diffs =
            DMatrix::from_columns(&(2..=*k_star).map(|k| models.diff(k)).collect::<Vec<_>>());
        let targets = &self.gram * diffs;
        // Column k-2 of the solution is the row for ladder index k.
        let rows = solver
            .fit_many(&targets)
            .map_err(|e| Error::AgentSolve {
                agent: self.id,
                k: 2,
                reason: e.to_string(),
            })?
            .transpose();
        let w: Vec<f64> = (2..=*k_star).map(|k| models.w(k)).collect();
        let coeffs = row_major(&rows);
        self.jitter = solver.jitter();
        self.cross = Some(solver.cross().clone());
        self.center_gram = Some(center_gram);
        self.models = Some(models);
        self.approx = Some(LocalApproxCoeffs { rows });
        self.mu = Some(mu);
        Ok(Message::LocalUpload { w, coeffs })
    }

    /// Runs the stopping rule against the global approximation.
    pub fn step4_select(&mut self, global: &Message, c_lp: f64) -> Result<Message> {
        let (Some(models), Some(cross), Some(center_gram)) =
            (&self.models, &self.cross, &self.center_gram)
        else {
            return Err(Error::Protocol(format!(
                "agent {} has not completed step 2",
                self.id
            )));
        };
        let Message::GlobalBroadcast { w_bar, coeffs } = global else {
            return Err(Error::Protocol(format!(
                "agent {} expected the global broadcast",
                self.id
            )));
        };
        let ladder = models.ladder();
        let k_star = ladder.k_cap();
        let l = center_gram.nrows();
        if w_bar.len() != k_star - 1 || coeffs.len() != (k_star - 1) * l {
            return Err(Error::Protocol(format!(
                "agent {} received a global broadcast of the wrong shape",
                self.id
            )));
        }
        let global_rows = DMatrix::from_row_slice(k_star - 1, l, coeffs);
        let seminorms = batch_seminorms(&global_rows, cross, center_gram, &ladder);
        let thresholds = (2..=k_star)
            .map(|k| threshold_at(k, c_lp, w_bar[row_of(k)], &ladder))
            .collect::<Result<Vec<f64>>>()?;
        let selection = SelectionResult::from_scan(&seminorms, &thresholds, &ladder)?;
        let lambda = selection.lambda;
        self.selection = Some(selection);
        Ok(Message::SelectionReport { lambda })
    }

    /// Overrides the selection with a fixed ladder index.
    pub fn force_selection(&mut self, k: usize) -> Result<()> {
        let models = self
            .models
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("agent {} has no ladder", self.id)))?;
        let ladder = models.ladder();
        if k == 0 || k > ladder.k_cap() {
            return arg(format!(
                "k = {k} is outside the ladder 1..={}",
                ladder.k_cap()
            ));
        }
        self.selection = Some(SelectionResult {
            k,
            lambda: ladder.lambda(k),
            trace: Vec::new(),
        });
        Ok(())
    }

    /// Ladder index of a broadcast regularization parameter.
    fn ladder_index(&self, lambda: f64) -> Result<usize> {
        let ladder = self
            .models
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("agent {} has no ladder", self.id)))?
            .ladder();
        let k = (1.0 / (lambda * ladder.b())).round() as usize;
        if k == 0
            || k > ladder.k_cap()
            || (lambda_at(ladder.b(), k) - lambda).abs() > 1e-12 * lambda
        {
            return Err(Error::Protocol(format!(
                "lambda {lambda} is not on agent {}'s ladder",
                self.id
            )));
        }
        Ok(k)
    }

    /// `f_{D_self, lambda_j*}(x)` for every broadcast `lambda_j*`.
    pub fn step5_row(
        &self,
        selections: &Message,
        kernel: &KernelSpec,
        x: &[f64],
    ) -> Result<Message> {
        check_point(kernel, x, 0)?;
        let query = Points::new(x.len(), x.to_vec())?;
        Ok(self.step5_rows(selections, kernel, &query)?.remove(0))
    }

    /// [`step5_row`](Self::step5_row) for a batch of query points, one row each.
    pub fn step5_rows(
        &self,
        selections: &Message,
        kernel: &KernelSpec,
        xs: &Points,
    ) -> Result<Vec<Message>> {
        let Message::SelectionBroadcast { lambdas } = selections else {
            return Err(Error::Protocol(format!(
                "agent {} expected the selection broadcast",
                self.id
            )));
        };
        let ks = lambdas
            .iter()
            .map(|&l| self.ladder_index(l))
            .collect::<Result<Vec<usize>>>()?;
        let models = self
            .models
            .as_ref()
            .expect("ladder index checked the models");
        let coeffs = DMatrix::from_columns(
            &ks.iter()
                .map(|&k| models.coeffs(k).clone())
                .collect::<Vec<_>>(),
        );
        let mut cache = self.query_cache.borrow_mut();
        if cache.as_ref().is_none_or(|(q, _)| q != xs) {
            *cache = Some((xs.clone(), gram_matrix(kernel, xs, &self.data.x)?));
        }
        let block = &cache.as_ref().expect("filled above").1;
        // q x m: entry (i, j) is f_{D_self, lambda_j*}(x_i).
        let values = block * coeffs;
        Ok(values
            .row_iter()
            .map(|r| Message::PredictionRow {
                values: r.iter().copied().collect(),
            })
            .collect())
    }
}

/// Seminorms of every row of `rows` (row `k-2` at `lambda_k`).
fn batch_seminorms(
    rows: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    center_gram: &DMatrix<f64>,
    ladder: &Ladder,
) -> Vec<f64> {
    let n = cross.nrows() as f64;
    let at = rows.transpose();
    let values = cross * &at;
    let g_at = center_gram * &at;
    (0..at.ncols())
        .map(|c| {
            let empirical = values.column(c).norm_squared() / n;
            let rkhs = at.column(c).dot(&g_at.column(c)).max(0.0);
            empirical + ladder.lambda(c + 2) * rkhs
        })
        .collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// The global agent. It never sees samples, only messages.
#[derive(Debug, Default)]
pub struct Coordinator {
    sizes: Vec<usize>,
    centers: Option<Points>,
    k_star: Option<usize>,
    global: Option<GlobalApprox>,
    lambdas: Option<Vec<f64>>,
}

impl Coordinator {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn k_star(&self) -> Option<usize> {
        self.k_star
    }

    pub fn centers(&self) -> Option<&Points> {
        self.centers.as_ref()
    }

    pub fn global(&self) -> Option<&GlobalApprox> {
        self.global.as_ref()
    }

    pub fn lambdas(&self) -> Option<&[f64]> {
        self.lambdas.as_deref()
    }

    /// Collects sizes, draws centers and fixes `K*`.
    pub fn step1_setup(
        &mut self,
        reports: &[Message],
        config: &ProtocolConfig,
        kernel: &KernelSpec,
        seed: u64,
    ) -> Result<Message> {
        if reports.is_empty() {
            return Err(Error::Protocol("no agents reported".into()));
        }
        self.sizes = reports
            .iter()
            .enumerate()
            .map(|(j, m)| match m {
                Message::SizeReport { n } if *n > 0 => Ok(*n),
                _ => Err(Error::Protocol(format!(
                    "agent {j} sent no valid size report"
                ))),
            })
            .collect::<Result<_>>()?;
        let max_n = *self.sizes.iter().max().expect("non-empty");
        let domain = kernel.domain();
        let centers = match &config.centers {
            CenterScheme::Explicit { dim, coords } => {
                let pts = Points::new(*dim, coords.clone())?;
                domain.check(&pts)?;
                if config.n_centers.is_some_and(|l| l != pts.len()) {
                    return Err(Error::Config(
                        "n_centers disagrees with the number of explicit centers".into(),
                    ));
                }
                pts
            }
            CenterScheme::IidUniform => {
                uniform_points(config.n_centers.unwrap_or(max_n), domain, seed)?
            }
            CenterScheme::Halton => halton_points(config.n_centers.unwrap_or(max_n), domain)?,
        };
        if centers.len() < max_n {
            return Err(Error::Protocol(format!(
                "L = {} centers but the largest agent holds {max_n} samples",
                centers.len()
            )));
        }
        let k_star = self
            .sizes
            .iter()
            .map(|&n| ladder_cap(n, config.b, kernel.kappa(), config.cap_mode))
            .min()
            .expect("non-empty");
        if k_star < 2 {
            let hint = match config.cap_mode {
                CapMode::Theoretical => {
                    "the theoretical cap is vacuous at this sample size; use the practical cap mode with k_min >= 2"
                }
                CapMode::Practical { .. } => "raise k_min to at least 2",
            };
            return Err(Error::Config(format!("K* = {k_star} < 2: {hint}")));
        }
        let msg = Message::CenterBroadcast {
            dim: centers.dim(),
            centers: centers.coords().to_vec(),
            k_star,
        };
        self.centers = Some(centers);
        self.k_star = Some(k_star);
        Ok(msg)
    }

    /// Averages the uploads into the global approximation.
    pub fn step3_synthesize(&mut self, uploads: &[Option<Message>]) -> Result<Message> {
        let (Some(k_star), Some(centers)) = (self.k_star, &self.centers) else {
            return Err(Error::Protocol("step 3 before step 1".into()));
        };
        if uploads.len() != self.sizes.len() {
            return Err(Error::Protocol(format!(
                "{} uploads for {} agents",
                uploads.len(),
                self.sizes.len()
            )));
        }
        let l = centers.len();
        let mut mats = Vec::with_capacity(uploads.len());
        let mut ws = Vec::with_capacity(uploads.len());
        for (j, u) in uploads.iter().enumerate() {
            match u {
                Some(Message::LocalUpload { w, coeffs })
                    if w.len() == k_star - 1 && coeffs.len() == (k_star - 1) * l =>
                {
                    mats.push(DMatrix::from_row_slice(k_star - 1, l, coeffs));
                    ws.push(w.clone());
                }
                Some(_) => {
                    return Err(Error::Protocol(format!(
                        "agent {j} sent a malformed upload"
                    )))
                }
                None => return Err(Error::Protocol(format!("agent {j} sent no upload"))),
            }
        }
        let views: Vec<UploadView> = mats
            .iter()
            .zip(&ws)
            .zip(&self.sizes)
            .map(|((coeffs, w), &n)| UploadView { coeffs, w, n })
            .collect();
        let global = synthesize_global(&views, self.total())?;
        let msg = Message::GlobalBroadcast {
            w_bar: global.w_bar.clone(),
            coeffs: row_major(&global.coeffs),
        };
        self.global = Some(global);
        Ok(msg)
    }

    /// Collects `lambda_j*` from every agent and prepares the broadcast.
    pub fn collect_selections(&mut self, reports: &[Option<Message>]) -> Result<Message> {
        if reports.len() != self.sizes.len() {
            return Err(Error::Protocol(
                "selection reports do not match the agents".into(),
            ));
        }
        let lambdas = reports
            .iter()
            .enumerate()
            .map(|(j, r)| match r {
                Some(Message::SelectionReport { lambda }) => Ok(*lambda),
                _ => Err(Error::Protocol(format!(
                    "agent {j} sent no selection report"
                ))),
            })
            .collect::<Result<Vec<f64>>>()?;
        self.lambdas = Some(lambdas.clone());
        Ok(Message::SelectionBroadcast { lambdas })
    }

    /// `sum_j (n_j/|D|) sum_j' (n_j'/|D|) f_{D_j', lambda_j*}(x)`, where row
    /// `j'` holds agent `j'`'s values for every `j`.
    pub fn step5_assemble(&self, rows: &[Option<Message>]) -> Result<f64> {
        let m = self.sizes.len();
        if rows.len() != m {
            return Err(Error::Protocol(format!(
                "{} prediction rows for {m} agents",
                rows.len()
            )));
        }
        let total = self.total() as f64;
        let mut out = 0.0;
        for (jp, row) in rows.iter().enumerate() {
            let values = match row {
                Some(Message::PredictionRow { values }) if values.len() == m => values,
                Some(_) => {
                    return Err(Error::Protocol(format!(
                        "agent {jp} sent a malformed prediction row"
                    )))
                }
                None => {
                    return Err(Error::Protocol(format!(
                        "agent {jp} sent no prediction row"
                    )))
                }
            };
            let w_owner = self.sizes[jp] as f64 / total;
            let inner: f64 = values
                .iter()
                .zip(&self.sizes)
                .map(|(v, &n)| n as f64 / total * v)
                .sum();
            out += w_owner * inner;
        }
        Ok(out)
    }
}

/// A complete simulated deployment: coordinator, agents and the ledger.
#[derive(Debug)]
pub struct Session {
    kernel: KernelSpec,
    config: ProtocolConfig,
    coordinator: Coordinator,
    agents: Vec<Agent>,
    ledger: Ledger,
    selection_broadcast: Option<Message>,
}

impl Session {
    pub fn new(
        kernel: KernelSpec,
        datasets: Vec<LocalDataset>,
        config: ProtocolConfig,
    ) -> Result<Self> {
        if datasets.is_empty() {
            return arg("a session needs at least one agent");
        }
        let agents = datasets
            .into_iter()
            .enumerate()
            .map(|(j, d)| Agent::new(j, d, &kernel))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kernel,
            config,
            coordinator: Coordinator::default(),
            agents,
            ledger: Ledger::default(),
            selection_broadcast: None,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn m(&self) -> usize {
        self.agents.len()
    }

    pub fn k_star(&self) -> Option<usize> {
        self.coordinator.k_star()
    }

    /// Steps 1 to 3. Nothing here depends on `C_LP`.
    pub fn setup(&mut self, seed: u64) -> Result<()> {
        let reports: Vec<Message> = self.agents.iter().map(Agent::size_report).collect();
        for (j, r) in reports.iter().enumerate() {
            self.ledger
                .record(Endpoint::Agent(j), Endpoint::Coordinator, r.clone());
        }
        let centers = self
            .coordinator
            .step1_setup(&reports, &self.config, &self.kernel, seed)?;
        self.ledger
            .record(Endpoint::Coordinator, Endpoint::AllAgents, centers.clone());

        let mut uploads = Vec::with_capacity(self.m());
        for agent in &mut self.agents {
            let up =
                agent.step2_local(&centers, &self.kernel, self.config.b, self.config.mu_mode)?;
            self.ledger.record(
                Endpoint::Agent(agent.id()),
                Endpoint::Coordinator,
                up.clone(),
            );
            uploads.push(Some(up));
        }

        let global = self.coordinator.step3_synthesize(&uploads)?;
        for j in 0..self.m() {
            self.ledger
                .record(Endpoint::Coordinator, Endpoint::Agent(j), global.clone());
        }
        Ok(())
    }

    /// Step 4 with the given constant, followed by the selection broadcast.
    pub fn select(&mut self, c_lp: f64) -> Result<Vec<usize>> {
        let global = self
            .ledger
            .envelopes()
            .iter()
            .rev()
            .find(|e| matches!(e.message, Message::GlobalBroadcast { .. }))
            .map(|e| e.message.clone())
            .ok_or_else(|| Error::Protocol("step 4 before step 3".into()))?;
        let mut reports = Vec::with_capacity(self.m());
        for agent in &mut self.agents {
            let r = agent.step4_select(&global, c_lp)?;
            self.ledger.record(
                Endpoint::Agent(agent.id()),
                Endpoint::Coordinator,
                r.clone(),
            );
            reports.push(Some(r));
        }
        self.finish_selection(&reports)?;
        Ok(self.selected_indices())
    }

    /// Replaces step 4 by a common ladder index for every agent.
    pub fn force_common_k(&mut self, k: usize) -> Result<()> {
        let mut reports = Vec::with_capacity(self.m());
        for agent in &mut self.agents {
            agent.force_selection(k)?;
            let r = Message::SelectionReport {
                lambda: agent.selection().expect("just set").lambda,
            };
            self.ledger.record(
                Endpoint::Agent(agent.id()),
                Endpoint::Coordinator,
                r.clone(),
            );
            reports.push(Some(r));
        }
        self.finish_selection(&reports)
    }

    fn finish_selection(&mut self, reports: &[Option<Message>]) -> Result<()> {
        let bc = self.coordinator.collect_selections(reports)?;
        self.ledger
            .record(Endpoint::Coordinator, Endpoint::AllAgents, bc.clone());
        self.selection_broadcast = Some(bc);
        Ok(())
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.agents
            .iter()
            .map(|a| a.selection().map_or(0, |s| s.k))
            .collect()
    }

    pub fn selections(&self) -> Vec<&SelectionResult> {
        self.agents.iter().filter_map(Agent::selection).collect()
    }

    /// Step 5 for one query point.
    pub fn predict(&mut self, x: &[f64]) -> Result<f64> {
        let bc = self
            .selection_broadcast
            .clone()
            .ok_or_else(|| Error::Protocol("step 5 before selections were broadcast".into()))?;
        let mut rows = Vec::with_capacity(self.m());
        for agent in &self.agents {
            let row = agent.step5_row(&bc, &self.kernel, x)?;
            self.ledger.record(
                Endpoint::Agent(agent.id()),
                Endpoint::Coordinator,
                row.clone(),
            );
            rows.push(Some(row));
        }
        self.coordinator.step5_assemble(&rows)
    }

    pub fn predict_many(&mut self, xs: &Points) -> Result<Vec<f64>> {
        let bc = self
            .selection_broadcast
            .clone()
            .ok_or_else(|| Error::Protocol("step 5 before selections were broadcast".into()))?;
        let per_agent = self
            .agents
            .iter()
            .map(|a| a.step5_rows(&bc, &self.kernel, xs))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let mut rows = Vec::with_capacity(self.m());
            for (j, agent_rows) in per_agent.iter().enumerate() {
                self.ledger.record(
                    Endpoint::Agent(j),
                    Endpoint::Coordinator,
                    agent_rows[i].clone(),
                );
                rows.push(Some(agent_rows[i].clone()));
            }
            out.push(self.coordinator.step5_assemble(&rows)?);
        }
        Ok(out)
    }

    /// Kernel expansion of the final estimate, assembled from the agents'
    /// private models. For offline evaluation in simulation only; nothing
    /// here is sent over the ledger.
    pub fn estimate_expansion(&self) -> Result<KernelExpansion> {
        let ks = self.selected_indices();
        if ks.contains(&0) {
            return Err(Error::Protocol("selections are incomplete".into()));
        }
        let total = self.coordinator.total() as f64;
        let weights: Vec<f64> = self.agents.iter().map(|a| a.n() as f64 / total).collect();
        let mut coeffs = Vec::new();
        for (jp, agent) in self.agents.iter().enumerate() {
            let models = agent.models().expect("selected agents have models");
            let mut c = DVector::zeros(agent.n());
            for (j, &k) in ks.iter().enumerate() {
                c += models.coeffs(k) * weights[j];
            }
            coeffs.extend((c * weights[jp]).iter().copied());
        }
        let points = Points::concat(self.agents.iter().map(|a| &a.dataset().x))?;
        Ok(KernelExpansion { points, coeffs })
    }

    /// Audits this session's ledger against the agents' own samples.
    pub fn audit(&self) -> Result<AuditReport> {
        let data: Vec<LocalDataset> = self.agents.iter().map(|a| a.dataset().clone()).collect();
        audit_privacy(&self.ledger, &data)
    }

    /// CSV rows `agent,k,seminorm,threshold,hit`.
    pub fn write_selection_trace<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["agent", "k", "seminorm", "threshold", "hit"])?;
        for agent in &self.agents {
            if let Some(sel) = agent.selection() {
                for row in &sel.trace {
                    w.write_record([
                        agent.id().to_string(),
                        row.k.to_string(),
                        format!("{:e}", row.seminorm),
                        format!("{:e}", row.threshold),
                        row.hit.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
