//! Learnable parameter blocks.
//!
//! Every block struct is generic over its leaf type `P`: the stored model
//! uses `FeatureMatrix<T>`, a forward pass binds the same tree to tape
//! [`Var`](crate::tape::Var)s, and gradients come back as another
//! `FeatureMatrix<T>` tree. Traversal order is fixed and leaf paths are
//! stable names such as `layers.1.attn.wq`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::matrix::{FeatureMatrix, Scalar};
use crate::model::config::{AdaLnStyle, InputDims, MtpConfig};
use crate::tape::{Tape, Var};

fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

macro_rules! param_tree {
    ($ty:ident { leaves: [$($leaf:ident),*], children: [$($child:ident),*] }) => {
        impl<P> $ty<P> {
            pub fn map<Q>(&self, path: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $ty<Q> {
                $ty {
                    $($leaf: f(&join(path, stringify!($leaf)), &self.$leaf),)*
                    $($child: self.$child.map(&join(path, stringify!($child)), f),)*
                }
            }

            pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P)) {
                $(f(&join(path, stringify!($leaf)), &self.$leaf);)*
                $(self.$child.visit(&join(path, stringify!($child)), f);)*
            }

            pub fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
                $(f(&join(path, stringify!($leaf)), &mut self.$leaf);)*
                $(self.$child.visit_mut(&join(path, stringify!($child)), f);)*
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

/// Query/key/value/output projections, bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<P> {
    pub up: Linear<P>,
    pub down: Linear<P>,
}

/// Learned (unconditioned) layer-norm scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<P> {
    pub gamma: P,
    pub beta: P,
}

/// Self-attention block with target-conditioned norms.
#[derive(Clone, Debug, PartialEq)]
pub struct Mts<P> {
    pub attn: Attention<P>,
    /// `d_model → 6·d_model`, split as `γ₁ β₁ γ₂ β₂ γ₃ β₃`.
    pub regressor: Linear<P>,
    pub ffn: Ffn<P>,
    /// Static norms used when target conditioning is disabled.
    pub norm1: Affine<P>,
    pub norm2: Affine<P>,
    pub norm3: Affine<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpsLayer<P> {
    pub attn: Attention<P>,
    pub ffn_norm: Affine<P>,
    pub ffn: Ffn<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<P> {
    pub hidden: Linear<P>,
    pub out: Linear<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtpParams<P> {
    pub mol_proj: Linear<P>,
    pub pro_proj: Linear<P>,
    pub mts: Mts<P>,
    pub layers: Vec<MpsLayer<P>>,
    pub head: Head<P>,
}

param_tree!(Linear { leaves: [weight, bias], children: [] });
param_tree!(Attention { leaves: [wq, wk, wv, wo], children: [] });
param_tree!(Ffn { leaves: [], children: [up, down] });
param_tree!(Affine { leaves: [gamma, beta], children: [] });
param_tree!(Mts { leaves: [], children: [attn, regressor, ffn, norm1, norm2, norm3] });
param_tree!(MpsLayer { leaves: [], children: [attn, ffn_norm, ffn] });
param_tree!(Head { leaves: [], children: [hidden, out] });

impl<P> MtpParams<P> {
    pub fn map<Q>(&self, path: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> MtpParams<Q> {
        MtpParams {
            mol_proj: self.mol_proj.map(&join(path, "mol_proj"), f),
            pro_proj: self.pro_proj.map(&join(path, "pro_proj"), f),
            mts: self.mts.map(&join(path, "mts"), f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(path, &format!("layers.{i}")), f))
                .collect(),
            head: self.head.map(&join(path, "head"), f),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.mol_proj.visit(&join(path, "mol_proj"), f);
        self.pro_proj.visit(&join(path, "pro_proj"), f);
        self.mts.visit(&join(path, "mts"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(path, &format!("layers.{i}")), f);
        }
        self.head.visit(&join(path, "head"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        self.mol_proj.visit_mut(&join(path, "mol_proj"), f);
        self.pro_proj.visit_mut(&join(path, "pro_proj"), f);
        self.mts.visit_mut(&join(path, "mts"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(path, &format!("layers.{i}")), f);
        }
        self.head.visit_mut(&join(path, "head"), f);
    }

    /// Leaves in traversal order with their paths.
    pub fn named_blocks(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p)));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, p| out.push(p));
        out
    }
}

pub type Params<T> = MtpParams<FeatureMatrix<T>>;
pub type BoundParams<'t, T> = MtpParams<Var<'t, T>>;

/// How leaves are filled when a parameter set is created.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Training initialization: identity-conditioned norms at zero target
    /// summary and zero pocket output projections.
    Standard,
    /// Every leaf random, including biases and the zero-initialized blocks.
    /// Used for gradient checks and algebraic identities where zero blocks
    /// would make the check vacuous.
    Random,
}

struct Init<'r, R: ?Sized> {
    rng: &'r mut R,
    scheme: InitScheme,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> FeatureMatrix<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        FeatureMatrix::from_fn(rows, cols, |_, _| T::of(dist.sample(self.rng)))
    }

    fn weight<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> FeatureMatrix<T> {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    /// Zero under the standard scheme.
    fn zero_init<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> FeatureMatrix<T> {
        match self.scheme {
            InitScheme::Standard => FeatureMatrix::zeros(rows, cols),
            InitScheme::Random => self.normal(rows, cols, std),
        }
    }

    /// Constant `c` under the standard scheme, `c + noise` otherwise.
    fn around<T: Scalar>(&mut self, cols: usize, c: f64) -> FeatureMatrix<T> {
        self.zero_init::<T>(1, cols, 0.3).map(|v| v + T::of(c))
    }

    fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Linear<FeatureMatrix<T>> {
        Linear {
            weight: self.weight(fan_in, fan_out),
            bias: self.zero_init(1, fan_out, 0.3),
        }
    }

    fn attention<T: Scalar>(&mut self, d: usize, zero_out: bool) -> Attention<FeatureMatrix<T>> {
        let wq = self.weight(d, d);
        let wk = self.weight(d, d);
        let wv = self.weight(d, d);
        let wo = if zero_out {
            self.zero_init(d, d, 1.0 / (d as f64).sqrt())
        } else {
            self.weight(d, d)
        };
        Attention { wq, wk, wv, wo }
    }

    fn ffn<T: Scalar>(&mut self, d: usize, hidden: usize) -> Ffn<FeatureMatrix<T>> {
        Ffn {
            up: self.linear(d, hidden),
            down: self.linear(hidden, d),
        }
    }

    fn affine<T: Scalar>(&mut self, d: usize) -> Affine<FeatureMatrix<T>> {
        Affine {
            gamma: self.around(d, 1.0),
            beta: self.around(d, 0.0),
        }
    }
}

impl<T: Scalar> Params<T> {
    pub fn init<R: Rng + ?Sized>(
        config: &MtpConfig,
        dims: InputDims,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        let mut init = Init { rng, scheme };
        let mol_proj = init.linear(dims.d_mol, d);
        let pro_proj = init.linear(dims.d_pro, d);

        let attn = init.attention(d, false);
        let gamma_base = match config.adaln_style {
            AdaLnStyle::Direct => 1.0,
            AdaLnStyle::OnePlusGamma => 0.0,
        };
        let weight = init.weight(d, 6 * d);
        let mut bias = init.zero_init::<T>(1, 6 * d, 0.3);
        for chunk in [0, 2, 4] {
            for j in 0..d {
                let k = chunk * d + j;
                bias.set(0, k, bias.get(0, k) + T::of(gamma_base));
            }
        }
        let regressor = Linear { weight, bias };
        let ffn = init.ffn(d, config.ffn_hidden);
        let mts = Mts {
            attn,
            regressor,
            ffn,
            norm1: init.affine(d),
            norm2: init.affine(d),
            norm3: init.affine(d),
        };

        let layers = (0..config.n_layers)
            .map(|_| MpsLayer {
                attn: init.attention(d, true),
                ffn_norm: init.affine(d),
                ffn: init.ffn(d, config.ffn_hidden),
            })
            .collect();

        let half = (d / 2).max(1);
        let head = Head {
            hidden: init.linear(d, half),
            out: init.linear(half, 1),
        };
        MtpParams {
            mol_proj,
            pro_proj,
            mts,
            layers,
            head,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        self.map("", &mut |_, m| tape.leaf(m.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map("", &mut |_, m| FeatureMatrix::zeros(m.rows(), m.cols()))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        self.map("", &mut |_, m| m.cast())
    }

    pub fn num_values(&self) -> usize {
        self.named_blocks().iter().map(|(_, m)| m.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (MtpConfig, InputDims) {
        let cfg = MtpConfig {
            d_model: 4,
            n_layers: 2,
            ffn_hidden: 6,
            ..Default::default()
        };
        (cfg, InputDims { d_mol: 3, d_pro: 5 })
    }

    #[test]
    fn names_match_traversal_order() {
        let (cfg, dims) = small();
        let mut p = Params::<f32>::init(&cfg, dims, InitScheme::Random, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = p.named_blocks().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "mol_proj.weight");
        assert!(names.contains(&"layers.1.attn.wo".to_string()));
        let mut visited = Vec::new();
        p.visit_mut("", &mut |n, _| visited.push(n.to_string()));
        assert_eq!(names, visited);
        let shapes: Vec<_> = p.named_blocks().iter().map(|(_, m)| m.shape()).collect();
        let shapes_mut: Vec<_> = p.blocks_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, shapes_mut);
    }

    #[test]
    fn standard_init_contracts() {
        let (cfg, dims) = small();
        let p = Params::<f64>::init(&cfg, dims, InitScheme::Standard, &mut ChaCha8Rng::seed_from_u64(1));
        for l in &p.layers {
            assert_eq!(l.attn.wo, FeatureMatrix::zeros(4, 4));
        }
        let b = &p.mts.regressor.bias;
        assert_eq!(b.shape(), (1, 24));
        for chunk in 0..6 {
            let expect = if chunk % 2 == 0 { 1.0 } else { 0.0 };
            for j in 0..4 {
                assert_eq!(b.get(0, chunk * 4 + j), expect);
            }
        }
    }

    #[test]
    fn one_plus_gamma_bias_is_zero() {
        let (mut cfg, dims) = small();
        cfg.adaln_style = AdaLnStyle::OnePlusGamma;
        let p = Params::<f64>::init(&cfg, dims, InitScheme::Standard, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.mts.regressor.bias, FeatureMatrix::zeros(1, 24));
    }
}
