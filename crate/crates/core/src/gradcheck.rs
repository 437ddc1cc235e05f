//! Finite-difference verification of the analytic gradients of every
//! parameter block, in double precision.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::model::{AttentionRecord, BoundParams, InitScheme, InputDims, MtpConfig, MtpModel, Pass, SampleInput, Task};
use crate::ops::Mode;
use crate::tape::{Tape, Var};
use crate::train::loss::loss_node;

/// Refuse cases with `m · n · d_model` above this.
pub const SIZE_GUARD: usize = 10_000;
pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
/// Inputs are redrawn until every ReLU pre-activation is at least this far
/// from zero, so the difference stencil never straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckCase {
    pub config: MtpConfig,
    /// Atoms.
    pub m: usize,
    /// Residues.
    pub n: usize,
    /// Pocket size.
    pub p: usize,
    pub d_mol: usize,
    pub d_pro: usize,
    pub seed: u64,
}

impl GradcheckCase {
    pub fn small(config: MtpConfig, seed: u64) -> Self {
        Self {
            config,
            m: 4,
            n: 6,
            p: 3,
            d_mol: 5,
            d_pro: 6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.m == 0 || self.n == 0 || self.p == 0 || self.d_mol == 0 || self.d_pro == 0 {
            return Err(Error::Config("gradcheck dims must all be positive".into()));
        }
        if self.p > self.n {
            return Err(Error::Config(format!("pocket size {} exceeds n = {}", self.p, self.n)));
        }
        let size = self.m * self.n * self.config.d_model;
        if size > SIZE_GUARD {
            return Err(Error::Config(format!(
                "gradcheck size m*n*d_model = {size} exceeds the guard of {SIZE_GUARD}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel: f64,
    pub max_abs: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub loss: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    /// Fixed-width table, one line per block.
    pub fn table(&self) -> String {
        let width = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>6}  {:>10}  {:>10}  result\n", "block", "len", "max_rel", "max_abs");
        for b in &self.blocks {
            out += &format!(
                "{:<width$}  {:>6}  {:>10.3e}  {:>10.3e}  {}\n",
                b.name,
                b.len,
                b.max_rel,
                b.max_abs,
                if b.passed { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

/// Modifies the analytic gradient of a named block before comparison. Used
/// to confirm that the checker can fail.
pub type GradHook<'a> = &'a dyn Fn(&str, &mut FeatureMatrix<f64>);

struct Problem {
    model: MtpModel<f64>,
    mol: FeatureMatrix<f64>,
    target: FeatureMatrix<f64>,
    pocket: Vec<usize>,
    label: f64,
    seed: u64,
}

impl Problem {
    fn new(case: &GradcheckCase) -> Result<Self> {
        let config = MtpConfig {
            seed: case.seed,
            ..case.config.clone()
        };
        let dims = InputDims {
            d_mol: case.d_mol,
            d_pro: case.d_pro,
        };
        let model = MtpModel::with_scheme(config, dims, InitScheme::Random)?;
        let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x9e37_79b9_7f4a_7c15);
        let task = model.config.task;
        let mut problem = Self {
            model,
            mol: FeatureMatrix::zeros(0, 0),
            target: FeatureMatrix::zeros(0, 0),
            pocket: Vec::new(),
            label: 0.0,
            seed: case.seed,
        };
        for _ in 0..MAX_DRAWS {
            let mut randn = |r, c| FeatureMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
            problem.mol = randn(case.m, case.d_mol);
            problem.target = randn(case.n, case.d_pro);
            let mut pocket = index::sample(&mut rng, case.n, case.p).into_vec();
            pocket.sort_unstable();
            problem.pocket = pocket;
            problem.label = match task {
                Task::Regression => StandardNormal.sample(&mut rng),
                Task::Classification => f64::from(rng.random_bool(0.5)),
            };
            let (_, margin) = problem.forward()?;
            if margin.is_none_or(|m| m >= KINK_MARGIN) {
                return Ok(problem);
            }
        }
        Err(Error::Data(format!(
            "no input draw kept ReLU pre-activations {KINK_MARGIN} away from zero"
        )))
    }

    /// Loss and the ReLU margin at the current point.
    fn forward(&self) -> Result<(f64, Option<f64>)> {
        let tape = Tape::new();
        let (l, _) = self.record(&tape)?;
        Ok((l.value().get(0, 0), tape.relu_margin()))
    }

    /// Records the loss on `tape`. The dropout stream is reseeded on every
    /// call so each evaluation sees the same masks.
    fn record<'t>(&self, tape: &'t Tape<f64>) -> Result<(Var<'t, f64>, BoundParams<'t, f64>)> {
        let bound = self.model.params.bind(tape);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mode = if self.model.config.dropout_p > 0.0 {
            Mode::Train
        } else {
            Mode::Eval
        };
        let mut pass = Pass::new(mode, &mut rng);
        let input = SampleInput {
            mol: &self.mol,
            target: &self.target,
            pocket: &self.pocket,
            target_id: "gradcheck",
        };
        let (_, out) = self.model.forward(tape, &bound, &input, &mut pass, &mut AttentionRecord::new())?;
        Ok((loss_node(out, self.label, self.model.config.task)?, bound))
    }

    fn loss(&self) -> Result<f64> {
        let tape = Tape::new();
        Ok(self.record(&tape)?.0.value().get(0, 0))
    }

    fn loss_and_grads(&self) -> Result<(f64, Vec<FeatureMatrix<f64>>)> {
        let tape = Tape::new();
        let (l, bound) = self.record(&tape)?;
        let grads = tape.backward(l)?;
        let mut out = Vec::new();
        bound.visit("", &mut |_, v| out.push(grads.wrt(*v)));
        Ok((l.value().get(0, 0), out))
    }
}

pub fn gradcheck(case: &GradcheckCase, hook: Option<GradHook<'_>>) -> Result<GradcheckReport> {
    case.validate()?;
    let mut problem = Problem::new(case)?;
    let (loss, mut analytic) = problem.loss_and_grads()?;
    let names: Vec<String> = problem.model.params.named_blocks().into_iter().map(|(n, _)| n).collect();
    if let Some(hook) = hook {
        for (name, g) in names.iter().zip(&mut analytic) {
            hook(name, g);
        }
    }

    let mut blocks = Vec::with_capacity(names.len());
    for (b, name) in names.iter().enumerate() {
        let len = analytic[b].len();
        let (mut max_rel, mut max_abs, mut passed) = (0.0f64, 0.0f64, true);
        for k in 0..len {
            let orig = problem.model.params.blocks_mut()[b].data()[k];
            problem.model.params.blocks_mut()[b].data_mut()[k] = orig + STEP;
            let up = problem.loss()?;
            problem.model.params.blocks_mut()[b].data_mut()[k] = orig - STEP;
            let down = problem.loss()?;
            problem.model.params.blocks_mut()[b].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[b].data()[k];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            if abs > ABS_FLOOR {
                let rel = abs / a.abs().max(numeric.abs());
                max_rel = max_rel.max(rel);
                if rel >= REL_TOL {
                    passed = false;
                }
            }
        }
        blocks.push(BlockReport {
            name: name.clone(),
            len,
            max_rel,
            max_abs,
            passed,
        });
    }
    Ok(GradcheckReport {
        seed: case.seed,
        loss,
        blocks,
    })
}
