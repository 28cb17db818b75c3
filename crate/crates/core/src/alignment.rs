//! Text-patch relevance and per-scale Top-K region selection.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::sclip::SclipOutput;

/// Score stored in padded slots. Never compared; selection consults the mask.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Dot scores of each sample's text vector against its padded patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    /// `[batch, scales, slots]`, row-major.
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub scales: usize,
    pub slots: usize,
}

impl RelevanceMatrix {
    pub fn new(scores: Vec<f64>, mask: Vec<bool>, batch: usize, scales: usize, slots: usize) -> Result<Self> {
        let n = batch * scales * slots;
        if n == 0 || scores.len() != n || mask.len() != n {
            return Err(Error::invalid(format!(
                "relevance matrix [{batch}, {scales}, {slots}] given {} scores and {} mask entries",
                scores.len(),
                mask.len()
            )));
        }
        let scores = scores.into_iter().zip(&mask).map(|(s, &m)| if m { s } else { MASKED }).collect();
        Ok(Self { scores, mask, batch, scales, slots })
    }

    pub fn index(&self, sample: usize, scale: usize, patch: usize) -> usize {
        (sample * self.scales + scale) * self.slots + patch
    }

    pub fn get(&self, sample: usize, scale: usize, patch: usize) -> Option<f64> {
        let i = self.index(sample, scale, patch);
        self.mask[i].then(|| self.scores[i])
    }
}

/// Per-row relevance `[rows, 1]` on the tape plus the detached matrix used for selection.
/// With `cosine`, both sides are unit-normalised first.
pub fn relevance(tape: &mut Tape<'_>, out: &SclipOutput, cosine: bool) -> Result<(Var, RelevanceMatrix)> {
    let (t, m) = if cosine { (tape.row_normalize(out.text), tape.row_normalize(out.patches)) } else { (out.text, out.patches) };
    let dt = tape.shape(t)[1];
    if tape.shape(m)[1] != dt {
        return Err(Error::invalid(format!("text width {dt} differs from patch width {}", tape.shape(m)[1])));
    }
    let per_sample = out.width();
    let owner: Vec<Option<usize>> = (0..out.batch * per_sample).map(|r| Some(r / per_sample)).collect();
    let t_rows = tape.gather_rows(t, &owner)?;
    let prod = tape.mul(t_rows, m)?;
    let ones = tape.constant(Tensor::matrix(dt, 1, vec![1.0; dt])?);
    let dots = tape.matmul(prod, ones)?;
    let matrix = RelevanceMatrix::new(tape.data(dots).to_vec(), out.mask.clone(), out.batch, out.scales, out.slots)?;
    Ok((dots, matrix))
}

/// `M'` and `r`: `width` slots per sample, each naming its origin or masked as shortfall.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedRegions {
    pub batch: usize,
    pub width: usize,
    /// `(scale, patch)` per slot.
    pub origin: Vec<Option<(usize, usize)>>,
    /// Flat index into the relevance matrix (and the padded patch rows).
    pub rows: Vec<Option<usize>>,
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SelectedRegions {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(scale, patch, score)` of the valid selections of one sample, in slot order.
    pub fn for_sample(&self, b: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let range = b * self.width..(b + 1) * self.width;
        self.origin[range.clone()]
            .iter()
            .zip(&self.scores[range])
            .filter_map(|(o, &s)| o.map(|(sc, p)| (sc, p, s)))
    }
}

fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-K valid patches per scale (or across all scales when `global`), ties to the lowest
/// index. Output is scale-major, descending score within a scale.
pub fn top_k_select(d: &RelevanceMatrix, k: usize, global: bool) -> Result<SelectedRegions> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let width = if global { k } else { k * d.scales };
    let n = d.batch * width;
    let mut sel = SelectedRegions {
        batch: d.batch,
        width,
        origin: Vec::with_capacity(n),
        rows: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
    };
    let push = |sel: &mut SelectedRegions, picked: &[(f64, usize)], cap: usize| {
        for slot in 0..cap {
            match picked.get(slot) {
                Some(&(score, flat)) => {
                    let within = flat % (d.scales * d.slots);
                    sel.origin.push(Some((within / d.slots, within % d.slots)));
                    sel.rows.push(Some(flat));
                    sel.scores.push(score);
                    sel.mask.push(true);
                }
                None => {
                    sel.origin.push(None);
                    sel.rows.push(None);
                    sel.scores.push(0.0);
                    sel.mask.push(false);
                }
            }
        }
    };
    for b in 0..d.batch {
        let candidates = |scales: std::ops::Range<usize>| -> Vec<(f64, usize)> {
            let mut c: Vec<(f64, usize)> = scales
                .flat_map(|s| (0..d.slots).map(move |j| d.index(b, s, j)))
                .filter(|&i| d.mask[i])
                .map(|i| (d.scores[i], i))
                .collect();
            c.sort_by(by_score_then_index);
            c
        };
        let all = candidates(0..d.scales);
        if all.is_empty() {
            return Err(Error::invalid(format!("sample {b} has no valid patches")));
        }
        if global {
            let picked: Vec<_> = all.into_iter().take(k).collect();
            push(&mut sel, &picked, k);
        } else {
            for s in 0..d.scales {
                let picked: Vec<_> = candidates(s..s + 1).into_iter().take(k).collect();
                push(&mut sel, &picked, k);
            }
        }
    }
    Ok(sel)
}
