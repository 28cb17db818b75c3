//! Scale-aware fusion: salience scores, relevance blending and weighted aggregation.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};

/// Feed-forward salience scorer `d' -> hidden -> ... -> 1` with ReLU between layers.
#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub layers: Vec<Linear>,
}

impl FusionNetwork {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        if depth == 0 || hidden == 0 {
            return Err(Error::Config(format!("fusion network needs depth >= 1 and hidden >= 1, got {depth}/{hidden}")));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut width = d_in;
        for i in 0..depth {
            let out = if i + 1 == depth { 1 } else { hidden };
            layers.push(Linear::new(store, &format!("{name}.layers.{i}"), width, out, true, 1.0 / (width as f64).sqrt(), rng)?);
            width = out;
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// `score_i = w2 · ReLU(w1 · p_i + b1) + b2` for the default depth, as a `[n, 1]` column.
    pub fn ffn_scores(&self, tape: &mut Tape<'_>, patches: Var) -> Result<Var> {
        let shape = tape.shape(patches);
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::invalid(format!("patch shape {shape:?} does not match fusion input {}", self.in_dim())));
        }
        let mut x = patches;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x);
            }
            x = layer.forward(tape, x)?;
        }
        Ok(x)
    }
}

/// `lambda * fc + (1 - lambda) * dot` on raw values.
pub fn blend_scores(tape: &mut Tape<'_>, fc: Var, dot: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if tape.shape(fc) != tape.shape(dot) {
        return Err(Error::invalid(format!("score shapes {:?} and {:?} differ", tape.shape(fc), tape.shape(dot))));
    }
    let a = tape.scale(fc, lambda);
    let b = tape.scale(dot, 1.0 - lambda);
    Ok(tape.add(a, b)?)
}

#[derive(Debug, Clone, Copy)]
pub struct FusedFeature {
    /// `[batch, width]`, zero at masked slots.
    pub alpha: Var,
    /// `[batch, d']`.
    pub v_refact: Var,
    /// `T ⊕ V_refact`: `[batch, 2d']`.
    pub fused: Var,
}

/// Softmax of `scores` (`[batch * width, 1]`) over each sample's valid slots, the weighted
/// sum of `patches` (`[batch * width, d']`), and the concatenation with `text`.
pub fn fuse(
    tape: &mut Tape<'_>,
    scores: Var,
    mask: &[bool],
    patches: Var,
    text: Var,
    batch: usize,
) -> Result<FusedFeature> {
    let n = mask.len();
    if batch == 0 || n % batch != 0 || tape.shape(scores)[0] != n || tape.shape(patches)[0] != n {
        return Err(Error::invalid(format!("fuse: {n} mask entries for batch {batch}")));
    }
    let width = n / batch;
    let d = tape.shape(patches)[1];
    let logits = tape.reshape(scores, &[batch, width])?;
    let alpha = tape.masked_softmax(logits, Some(mask))?;
    let col = tape.reshape(alpha, &[n, 1])?;
    let ones = tape.constant(Tensor::matrix(1, d, vec![1.0; d])?);
    let spread = tape.matmul(col, ones)?;
    let weighted = tape.mul(spread, patches)?;
    let mut sum = vec![0.0; batch * n];
    for b in 0..batch {
        sum[b * n + b * width..b * n + (b + 1) * width].fill(1.0);
    }
    let sum = tape.constant(Tensor::matrix(batch, n, sum)?);
    let v_refact = tape.matmul(sum, weighted)?;
    let fused = tape.concat_cols(&[text, v_refact])?;
    Ok(FusedFeature { alpha, v_refact, fused })
}
