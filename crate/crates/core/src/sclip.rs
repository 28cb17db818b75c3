//! Contrastive image-text encoder: projection heads, pooling, InfoNCE and the stage-1 freeze.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Adam, ParamStore, Rng, Tape, Tensor, Var};
use crate::text::{EncodedText, TextEncoder, TextEncoderConfig, TokenSequence};
use crate::visual::{EncodedPatches, ImageTensor, VisualEncoder, VisualEncoderConfig};

/// Bias-free `W2 · ReLU(W1 · x)`, applied row-wise.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub first: Linear,
    pub second: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.first"), d_in, hidden, false, 1.0 / (d_in as f64).sqrt(), rng)?,
            second: Linear::new(store, &format!("{name}.second"), hidden, d_out, false, 1.0 / (hidden as f64).sqrt(), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = tape.relu(h);
        Ok(self.second.forward(tape, h)?)
    }
}

/// Mean over the valid rows of `rows`.
pub fn pool_global(tape: &mut Tape<'_>, rows: Var, valid: Option<&[bool]>) -> Result<Var> {
    Ok(tape.mean_rows(rows, valid)?)
}

/// Masked mean of consecutive blocks of `block` rows: `[groups * block, d] -> [groups, d]`.
pub fn pool_blocks(tape: &mut Tape<'_>, rows: Var, block: usize, valid: &[bool]) -> Result<Var> {
    let n = tape.shape(rows)[0];
    if block == 0 || n % block != 0 || valid.len() != n {
        return Err(Error::invalid(format!("cannot pool {n} rows in blocks of {block}")));
    }
    let groups = n / block;
    let mut weights = vec![0.0; groups * n];
    for g in 0..groups {
        let mask = &valid[g * block..(g + 1) * block];
        let count = mask.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::invalid(format!("pooling group {g} has no valid rows")));
        }
        for (j, _) in mask.iter().enumerate().filter(|(_, &v)| v) {
            weights[g * n + g * block + j] = 1.0 / count as f64;
        }
    }
    let w = tape.constant(Tensor::matrix(groups, n, weights)?);
    Ok(tape.matmul(w, rows)?)
}

/// InfoNCE over a batch of paired rows `t, v: [N, d]` with raw dot-product similarity.
/// Text-to-image by default; `symmetric` averages in the image-to-text direction.
pub fn info_nce_loss(tape: &mut Tape<'_>, t: Var, v: Var, tau: f64, symmetric: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (st, sv) = (tape.shape(t).to_vec(), tape.shape(v).to_vec());
    if st.len() != 2 || st != sv {
        return Err(Error::invalid(format!("InfoNCE needs matching [N, d] inputs, got {st:?} and {sv:?}")));
    }
    let n = st[0];
    let directions: &[(Var, Var)] = if symmetric { &[(t, v), (v, t)] } else { &[(t, v)] };
    let mut terms = Vec::with_capacity(2);
    for &(a, b) in directions {
        let sim = tape.matmul_bt(a, b)?;
        let sim = tape.scale(sim, 1.0 / tau);
        if tape.data(sim).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("InfoNCE similarity".into()));
        }
        let logp = tape.log_softmax(sim)?;
        let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        let pos = tape.pick(logp, &diag)?;
        let mean = tape.mean(pos);
        terms.push(tape.scale(mean, -1.0));
    }
    Ok(match terms.as_slice() {
        [one] => *one,
        [a, b] => {
            let s = tape.add(*a, *b)?;
            tape.scale(s, 0.5)
        }
        _ => unreachable!(),
    })
}

#[derive(Debug, Clone)]
pub struct SclipConfig {
    pub text: TextEncoderConfig,
    pub visual: VisualEncoderConfig,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub tau: f64,
    pub symmetric: bool,
}

/// Per-batch encoder output: global text vectors, pooled image vectors and zero-padded
/// per-scale projected patches.
#[derive(Debug, Clone)]
pub struct SclipOutput {
    /// `T`: `[batch, d']`.
    pub text: Var,
    /// Pooled patches over all scales: `[batch, d']`.
    pub image: Var,
    /// `M`: `[batch * scales * slots, d']`, masked slots are zero rows.
    pub patches: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub scales: usize,
    /// Padded per-scale width, the largest patch count.
    pub slots: usize,
    pub counts: Vec<usize>,
}

impl SclipOutput {
    pub fn slot_row(&self, sample: usize, scale: usize, patch: usize) -> usize {
        (sample * self.scales + scale) * self.slots + patch
    }

    pub fn width(&self) -> usize {
        self.scales * self.slots
    }
}

#[derive(Debug, Clone)]
pub struct Sclip {
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub text_head: ProjectionHead,
    pub image_head: ProjectionHead,
    pub config: SclipConfig,
}

pub const PREFIX: &str = "sclip";
const HEADS: [&str; 2] = ["sclip.text_head.", "sclip.image_head."];

impl Sclip {
    pub fn new(store: &mut ParamStore, config: SclipConfig, rng: &mut Rng) -> Result<Self> {
        let text = TextEncoder::new(store, "sclip.text", config.text.clone(), rng)?;
        let visual = VisualEncoder::new(store, "sclip.visual", config.visual.clone(), rng)?;
        let (dt, dv) = (text.d_model(), config.visual.transformer.d_model);
        let text_head = ProjectionHead::new(store, "sclip.text_head", dt, config.proj_hidden, config.proj_dim, rng)?;
        let image_head = ProjectionHead::new(store, "sclip.image_head", dv, config.proj_hidden, config.proj_dim, rng)?;
        Ok(Self { text, visual, text_head, image_head, config })
    }

    pub fn is_projection_param(name: &str) -> bool {
        HEADS.iter().any(|h| name.starts_with(h))
    }

    /// Stage-1 contract: only the two projection heads stay trainable.
    pub fn freeze_for_pretraining(store: &mut ParamStore) {
        store.set_frozen_by(|name| !Self::is_projection_param(name));
    }

    pub fn encode_states(
        &self,
        tape: &mut Tape<'_>,
        texts: &[&TokenSequence],
        images: &[&ImageTensor],
    ) -> Result<(EncodedText, EncodedPatches)> {
        if texts.len() != images.len() || texts.is_empty() {
            return Err(Error::invalid(format!("{} texts for {} images", texts.len(), images.len())));
        }
        Ok((self.text.encode_batch(tape, texts)?, self.visual.encode(tape, images)?))
    }

    /// Projection heads, pooling and per-scale regrouping over already encoded states.
    pub fn project(&self, tape: &mut Tape<'_>, text: &EncodedText, patches: &EncodedPatches) -> Result<SclipOutput> {
        let batch = patches.batch;
        let h = self.text_head.forward(tape, text.states)?;
        let t = pool_blocks(tape, h, text.seq_len, &text.valid)?;
        let g = self.image_head.forward(tape, patches.states)?;
        let v = pool_blocks(tape, g, patches.m, &vec![true; batch * patches.m])?;
        let scales = self.visual.num_scales();
        let mut counts = vec![0; scales];
        for &(s, _) in &patches.index {
            counts[s] += 1;
        }
        let slots = counts.iter().copied().max().unwrap_or(0);
        let mut index = Vec::with_capacity(batch * scales * slots);
        let mut mask = Vec::with_capacity(batch * scales * slots);
        for b in 0..batch {
            for s in 0..scales {
                for j in 0..slots {
                    let row = patches.row_of(s, j).map(|r| b * patches.m + r);
                    mask.push(row.is_some());
                    index.push(row);
                }
            }
        }
        let m = tape.gather_rows(g, &index)?;
        Ok(SclipOutput { text: t, image: v, patches: m, mask, batch, scales, slots, counts })
    }

    pub fn encode_batch(&self, tape: &mut Tape<'_>, texts: &[&TokenSequence], images: &[&ImageTensor]) -> Result<SclipOutput> {
        let (h, g) = self.encode_states(tape, texts, images)?;
        self.project(tape, &h, &g)
    }

    pub fn encode_pair(&self, tape: &mut Tape<'_>, text: &TokenSequence, image: &ImageTensor) -> Result<SclipOutput> {
        self.encode_batch(tape, &[text], &[image])
    }

    pub fn contrastive_loss(&self, tape: &mut Tape<'_>, out: &SclipOutput) -> Result<Var> {
        info_nce_loss(tape, out.text, out.image, self.config.tau, self.config.symmetric)
    }

    /// One InfoNCE update. The caller applies [`Sclip::freeze_for_pretraining`] first.
    pub fn pretrain_step(
        &self,
        store: &mut ParamStore,
        adam: &mut Adam,
        texts: &[&TokenSequence],
        images: &[&ImageTensor],
    ) -> Result<f64> {
        if texts.is_empty() {
            return Err(Error::invalid("empty pretraining batch"));
        }
        let (loss, grads) = {
            let mut tape = Tape::new(store);
            let out = self.encode_batch(&mut tape, texts, images)?;
            let loss = self.contrastive_loss(&mut tape, &out)?;
            (tape.value(loss).item(), tape.backward(loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss".into()));
        }
        store.accumulate(&grads, 1.0)?;
        adam.step(store)?;
        Ok(loss)
    }
}
