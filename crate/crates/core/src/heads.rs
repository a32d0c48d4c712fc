//! Side-specific projection heads ("feed-forward 2").
//!
//! Each head maps a reduced vector `r` through `ff2_layers` hidden layers of
//! the form `LayerNorm(x + gelu(W x + b))` (the skip is dropped when it is
//! ablated or the widths differ), then a final linear layer, then L2
//! normalization.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::add_into;
use crate::error::{Error, Result};
use crate::numeric::{
    accumulate_at_b, accumulate_col_sums, gelu_fast, gelu_fast_grad, l2_normalize_rows, l2_normalize_rows_backward,
    layer_norm, layer_norm_backward, orthogonal_init, LayerNormTape, Scalar,
};
use crate::params::{ParamId, ParamStore, PrecisionClass, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Input,
    Response,
    ExtraContext,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Input => "input",
            Side::Response => "response",
            Side::ExtraContext => "extra",
        }
    }
}

#[derive(Debug, Clone)]
struct HiddenLayer {
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    bias: ParamId,
    skip: bool,
}

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    side: Side,
    layers: Vec<HiddenLayer>,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadTape<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    norms: Vec<LayerNormTape<T>>,
    last: Array2<T>,
    out_norms: Vec<T>,
    pub h: Array2<T>,
}

impl ProjectionHead {
    pub fn init(cfg: &ModelConfig, side: Side, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.ff2_layers);
        let mut width = cfg.reduced_dim();
        for l in 0..cfg.ff2_layers {
            let p = |n: &str| format!("head.{}.l{l}.{n}", side.name());
            let h = cfg.ff2_hidden;
            layers.push(HiddenLayer {
                w: store.add(p("w"), vec![width, h], PrecisionClass::Param16, orthogonal_init(width, h, rng)),
                b: store.add(p("b"), vec![h], PrecisionClass::Param16, vec![0.0; h]),
                gain: store.add(p("ln.gain"), vec![h], PrecisionClass::Param16, vec![1.0; h]),
                bias: store.add(p("ln.bias"), vec![h], PrecisionClass::Param16, vec![0.0; h]),
                skip: cfg.ff2_skip && width == h,
            });
            width = h;
        }
        let o = cfg.out_dim;
        let w_out =
            store.add(format!("head.{}.out.w", side.name()), vec![width, o], PrecisionClass::Param16, orthogonal_init(width, o, rng));
        let b_out = store.add(format!("head.{}.out.b", side.name()), vec![o], PrecisionClass::Param16, vec![0.0; o]);
        Self { side, layers, w_out, b_out }
    }

    pub fn from_store(cfg: &ModelConfig, side: Side, store: &ParamStore) -> Result<Self> {
        let get = |n: String| store.by_name(&n).ok_or_else(|| Error::format(format!("missing tensor {n}")));
        let mut layers = Vec::with_capacity(cfg.ff2_layers);
        let mut width = cfg.reduced_dim();
        for l in 0..cfg.ff2_layers {
            let p = |n: &str| format!("head.{}.l{l}.{n}", side.name());
            layers.push(HiddenLayer {
                w: get(p("w"))?,
                b: get(p("b"))?,
                gain: get(p("ln.gain"))?,
                bias: get(p("ln.bias"))?,
                skip: cfg.ff2_skip && width == cfg.ff2_hidden,
            });
            width = cfg.ff2_hidden;
        }
        Ok(Self {
            side,
            layers,
            w_out: get(format!("head.{}.out.w", side.name()))?,
            b_out: get(format!("head.{}.out.b", side.name()))?,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(|l| [l.w, l.b, l.gain, l.bias]).collect();
        ids.extend([self.w_out, self.b_out]);
        ids
    }

    /// Rows of `r` to unit-norm encodings.
    pub fn forward<T: Scalar>(&self, w: &Weights<T>, r: ArrayView2<T>, mixed: bool) -> HeadTape<T> {
        let cast = |x: &mut Array2<T>| {
            if mixed {
                x.mapv_inplace(crate::numeric::round_f16);
            }
        };
        let mut x = r.to_owned();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut norms = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = x.dot(&w.mat(layer.w)) + &ArrayView1::from(w.vec(layer.b));
            let mut g = z.mapv(gelu_fast);
            cast(&mut g);
            let u = if layer.skip { &x + &g } else { g };
            let (mut y, tape) = layer_norm(u.view(), w.vec(layer.gain), w.vec(layer.bias));
            cast(&mut y);
            inputs.push(std::mem::replace(&mut x, y));
            pre.push(z);
            norms.push(tape);
        }
        let mut o = x.dot(&w.mat(self.w_out)) + &ArrayView1::from(w.vec(self.b_out));
        cast(&mut o);
        let (h, out_norms) = l2_normalize_rows(o.view());
        HeadTape { inputs, pre, norms, last: x, out_norms, h }
    }

    /// Returns the gradient with respect to the head input.
    pub fn backward<T: Scalar>(&self, w: &Weights<T>, tape: &HeadTape<T>, dh: ArrayView2<T>, grads: &mut Weights<T>, mixed: bool) -> Array2<T> {
        let cast = |x: &mut Array2<T>| {
            if mixed {
                x.mapv_inplace(crate::numeric::round_f16);
            }
        };
        let do_ = l2_normalize_rows_backward(dh, tape.h.view(), &tape.out_norms);
        accumulate_at_b(tape.last.view(), do_.view(), grads.vec_mut(self.w_out));
        accumulate_col_sums(do_.view(), grads.vec_mut(self.b_out));
        let mut dx = do_.dot(&w.mat(self.w_out).t());
        cast(&mut dx);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let width = w.vec(layer.gain).len();
            let (mut dg, mut db) = (vec![T::zero(); width], vec![T::zero(); width]);
            let du = layer_norm_backward(dx.view(), &tape.norms[l], w.vec(layer.gain), &mut dg, &mut db);
            add_into(grads.vec_mut(layer.gain), &dg);
            add_into(grads.vec_mut(layer.bias), &db);
            let dz = ndarray::Zip::from(&du).and(&tape.pre[l]).map_collect(|&g, &z| g * gelu_fast_grad(z));
            accumulate_at_b(tape.inputs[l].view(), dz.view(), grads.vec_mut(layer.w));
            accumulate_col_sums(dz.view(), grads.vec_mut(layer.b));
            let mut next = dz.dot(&w.mat(layer.w).t());
            if layer.skip {
                next = next + du;
            }
            cast(&mut next);
            dx = next;
        }
        dx
    }
}
