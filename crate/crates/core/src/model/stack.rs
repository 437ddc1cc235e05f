//! The stacked model: projections, one self-attention block, `L` residual
//! pocket layers with optional feedforward refinement, and the readout head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Scalar};
use crate::model::attention::AttentionRecord;
use crate::model::config::{InputDims, MtpConfig};
use crate::model::layers::{affine_layer_norm, feed_forward, Pass};
use crate::model::mps::{mps_forward, pocket_select};
use crate::model::mts::mts_forward;
use crate::model::params::{BoundParams, Head, InitScheme, Params};
use crate::ops::Mode;
use crate::tape::{Tape, Var};

/// One molecule–receptor pair in raw embedding space.
#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'a, T> {
    /// m × d_mol per-atom embeddings.
    pub mol: &'a FeatureMatrix<T>,
    /// n × d_pro per-residue embeddings.
    pub target: &'a FeatureMatrix<T>,
    pub pocket: &'a [usize],
    pub target_id: &'a str,
}

/// Intermediate states of one forward pass through the stack.
pub struct MtpTrace<'t, T> {
    /// Output of the self-attention block, `F⁽⁰⁾`.
    pub mts_output: Var<'t, T>,
    /// Pocket cross-attention deltas, one per layer when enabled.
    pub deltas: Vec<Var<'t, T>>,
    /// `F⁽⁰⁾ … F⁽ᴸ⁾`.
    pub states: Vec<Var<'t, T>>,
    pub output: Var<'t, T>,
}

pub fn mtp_forward<'t, T: Scalar>(
    mol: Var<'t, T>,
    target: Var<'t, T>,
    pocket_indices: &[usize],
    target_id: &str,
    params: &BoundParams<'t, T>,
    config: &MtpConfig,
    pass: &mut Pass<'_>,
    record: &mut AttentionRecord<T>,
) -> Result<MtpTrace<'t, T>> {
    let x = mol.linear(params.mol_proj.weight, params.mol_proj.bias)?;
    let t = target.linear(params.pro_proj.weight, params.pro_proj.bias)?;

    let mts_output = mts_forward(x, t, &params.mts, config, pass, record)?;
    let pocket = if config.enable_mps {
        Some(pocket_select(t, pocket_indices, target_id)?)
    } else {
        None
    };

    let mut state = mts_output;
    let mut states = vec![state];
    let mut deltas = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        if let Some(pocket) = pocket {
            let delta = mps_forward(state, pocket, layer, l + 1, config, record)?;
            deltas.push(delta);
            state = state.add(delta)?;
        }
        if config.enable_ffn {
            let h = affine_layer_norm(state, &layer.ffn_norm)?;
            state = state.add(feed_forward(h, &layer.ffn, config.dropout_p, pass)?)?;
        }
        states.push(state);
    }
    Ok(MtpTrace {
        mts_output,
        deltas,
        states,
        output: state,
    })
}

/// Mean-pools ligand rows and applies the two-layer readout. Returns a 1×1
/// raw value (regression) or logit (classification).
pub fn predict<'t, T: Scalar>(features: Var<'t, T>, head: &Head<Var<'t, T>>) -> Result<Var<'t, T>> {
    if features.shape().0 == 0 {
        return Err(Error::EmptyInput("predict"));
    }
    features
        .mean_rows()?
        .linear(head.hidden.weight, head.hidden.bias)?
        .relu()
        .linear(head.out.weight, head.out.bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtpModel<T> {
    pub config: MtpConfig,
    pub dims: InputDims,
    pub params: Params<T>,
}

/// Eval-mode prediction with the attention maps it produced.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub value: f64,
    pub features: FeatureMatrix<T>,
    pub attention: AttentionRecord<T>,
}

impl<T: Scalar> MtpModel<T> {
    /// Standard initialization seeded from `config.seed`.
    pub fn new(config: MtpConfig, dims: InputDims) -> Result<Self> {
        Self::with_scheme(config, dims, InitScheme::Standard)
    }

    pub fn with_scheme(config: MtpConfig, dims: InputDims, scheme: InitScheme) -> Result<Self> {
        config.validate()?;
        if dims.d_mol == 0 || dims.d_pro == 0 {
            return Err(Error::Config(format!("input widths must be positive: {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&config, dims, scheme, &mut rng);
        Ok(Self {
            config,
            dims,
            params,
        })
    }

    pub fn check_input(&self, input: &SampleInput<'_, T>) -> Result<()> {
        if input.mol.cols() != self.dims.d_mol || input.mol.rows() == 0 {
            return Err(Error::shape("molecule input", input.mol.shape(), (0, self.dims.d_mol)));
        }
        if input.target.cols() != self.dims.d_pro || input.target.rows() == 0 {
            return Err(Error::shape("target input", input.target.shape(), (0, self.dims.d_pro)));
        }
        Ok(())
    }

    /// Records one full forward pass on `tape` and returns the trace and the
    /// 1×1 prediction node.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &BoundParams<'t, T>,
        input: &SampleInput<'_, T>,
        pass: &mut Pass<'_>,
        record: &mut AttentionRecord<T>,
    ) -> Result<(MtpTrace<'t, T>, Var<'t, T>)> {
        self.check_input(input)?;
        let mol = tape.leaf(input.mol.clone());
        let target = tape.leaf(input.target.clone());
        let trace = mtp_forward(
            mol,
            target,
            input.pocket,
            input.target_id,
            bound,
            &self.config,
            pass,
            record,
        )?;
        let out = predict(trace.output, &bound.head)?;
        Ok((trace, out))
    }

    pub fn predict(&self, input: &SampleInput<'_, T>) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = Pass::new(Mode::Eval, &mut rng);
        let mut attention = AttentionRecord::new();
        let (trace, out) = self.forward(&tape, &bound, input, &mut pass, &mut attention)?;
        Ok(Prediction {
            value: out.value().get(0, 0).as_f64(),
            features: (*trace.output.value()).clone(),
            attention,
        })
    }

    pub fn cast<U: Scalar>(&self) -> MtpModel<U> {
        MtpModel {
            config: self.config.clone(),
            dims: self.dims,
            params: self.params.cast(),
        }
    }
}
