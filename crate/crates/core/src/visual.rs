//! Multi-scale patchify and the visual Transformer.

use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerConfig, TransformerEncoder};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const CHANNELS: usize = 3;

/// RGB image in channel-major layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// `data` is `[3, height, width]`, channel-major.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = rgb.iter().flat_map(|&c| std::iter::repeat(c).take(height * width)).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }
}

/// Receptive-field sizes (strictly increasing) and patch channel count `C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleConfig {
    pub kernels: Vec<usize>,
    pub channels: usize,
}

impl ScaleConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("patch channel count must be positive".into()));
        }
        if self.kernels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("scales {:?} must be strictly increasing", self.kernels)));
        }
        for (i, &k) in self.kernels.iter().enumerate() {
            patch_grid(height, width, k).map_err(|e| Error::Config(format!("scale {i}: {e}")))?;
        }
        Ok(())
    }
}

/// `(H / k, W / k)`; errors when `k` does not divide both sides.
pub fn patch_grid(height: usize, width: usize, k: usize) -> Result<(usize, usize)> {
    if k == 0 || height % k != 0 || width % k != 0 {
        return Err(Error::invalid(format!("receptive field {k} does not tile a {height}x{width} image")));
    }
    Ok((height / k, width / k))
}

/// Non-overlapping `k x k` windows of each image as rows `[(c, dy, dx)]`, image-major then
/// row-major over the patch grid.
pub fn im2col(images: &[&ImageTensor], k: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let (gh, gw) = patch_grid(h, w, k)?;
    let cols = CHANNELS * k * k;
    let mut data = Vec::with_capacity(images.len() * gh * gw * cols);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::invalid(format!("mixed image sizes {h}x{w} and {}x{}", img.height, img.width)));
        }
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..CHANNELS {
                    for dy in 0..k {
                        let start = (c * h + py * k + dy) * w + px * k;
                        data.extend_from_slice(&img.data[start..start + k]);
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(images.len() * gh * gw, cols, data)?)
}

/// Patch vectors of one scale for a batch: `patches` is `[batch * count, C]`, image-major.
#[derive(Debug, Clone, Copy)]
pub struct PatchSequence {
    pub scale: usize,
    pub count: usize,
    pub batch: usize,
    pub patches: Var,
}

/// Visual states for a batch; each image owns `m` consecutive rows.
#[derive(Debug, Clone)]
pub struct EncodedPatches {
    /// `[batch * m, d_model]`.
    pub states: Var,
    pub batch: usize,
    pub m: usize,
    /// `(scale, patch)` of each of the `m` rows of an image.
    pub index: Vec<(usize, usize)>,
}

impl EncodedPatches {
    pub fn row_of(&self, scale: usize, patch: usize) -> Option<usize> {
        self.index.iter().position(|&sp| sp == (scale, patch))
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub scales: ScaleConfig,
    pub transformer: TransformerConfig,
    /// Encode each scale as its own sequence instead of one joint sequence.
    pub per_scale: bool,
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub patchify: Vec<Linear>,
    pub input_proj: Linear,
    pub scale_embedding: ParamId,
    pub transformer: TransformerEncoder,
    pub config: VisualEncoderConfig,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: VisualEncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.scales.validate(config.height, config.width)?;
        let c = config.scales.channels;
        let d = config.transformer.d_model;
        let patchify = config
            .scales
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let fan_in = CHANNELS * k * k;
                Linear::new(store, &format!("{name}.patchify.{i}"), fan_in, c, true, 1.0 / (fan_in as f64).sqrt(), rng)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let input_proj = Linear::new(store, &format!("{name}.input_proj"), c, d, true, 1.0 / (c as f64).sqrt(), rng)?;
        let scale_embedding =
            store.add_uniform(format!("{name}.scale_embedding"), &[config.scales.kernels.len(), d], 1.0 / (d as f64).sqrt(), rng)?;
        let transformer = TransformerEncoder::new(store, &format!("{name}.transformer"), config.transformer, rng)?;
        Ok(Self { patchify, input_proj, scale_embedding, transformer, config })
    }

    pub fn num_scales(&self) -> usize {
        self.patchify.len()
    }

    pub fn patch_counts(&self) -> Vec<usize> {
        let (h, w) = (self.config.height, self.config.width);
        self.config.scales.kernels.iter().map(|&k| patch_grid(h, w, k).map(|(a, b)| a * b).unwrap_or(0)).collect()
    }

    /// `(scale, patch)` of each row of an image's encoding under [`VisualEncoder::encode`].
    pub fn row_index(&self) -> Vec<(usize, usize)> {
        self.patch_counts().iter().enumerate().flat_map(|(s, &n)| (0..n).map(move |j| (s, j))).collect()
    }

    /// Stride-`k` convolution of every image at one scale, as a linear map of each window.
    pub fn patchify_scale(&self, tape: &mut Tape<'_>, images: &[&ImageTensor], scale: usize) -> Result<PatchSequence> {
        let layer = self.patchify.get(scale).ok_or_else(|| Error::invalid(format!("no scale {scale}")))?;
        let k = self.config.scales.kernels[scale];
        for img in images {
            if (img.height, img.width) != (self.config.height, self.config.width) {
                return Err(Error::invalid(format!(
                    "scale {scale}: image is {}x{}, encoder expects {}x{}",
                    img.height, img.width, self.config.height, self.config.width
                )));
            }
        }
        let cols = tape.constant(im2col(images, k)?);
        let patches = layer.forward(tape, cols)?;
        let count = tape.shape(patches)[0] / images.len();
        Ok(PatchSequence { scale, count, batch: images.len(), patches })
    }

    /// Projects patches to `d_model`, adds scale-type embeddings and runs the Transformer over
    /// each image's concatenated sequences, in the order given.
    pub fn encode_patches(&self, tape: &mut Tape<'_>, seqs: &[PatchSequence]) -> Result<EncodedPatches> {
        let batch = seqs.first().ok_or_else(|| Error::invalid("no patch sequences"))?.batch;
        if seqs.iter().any(|s| s.batch != batch) {
            return Err(Error::invalid("patch sequences disagree on batch size"));
        }
        if let Some(s) = seqs.iter().find(|s| s.scale >= self.num_scales()) {
            return Err(Error::invalid(format!("no scale {}", s.scale)));
        }
        let m: usize = seqs.iter().map(|s| s.count).sum();
        let mut index = Vec::with_capacity(m);
        for s in seqs {
            index.extend((0..s.count).map(|j| (s.scale, j)));
        }
        // flat rows of the concatenation, reordered image-major
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut off = 0;
        for s in seqs {
            offsets.push(off);
            off += s.batch * s.count;
        }
        let mut order = Vec::with_capacity(batch * m);
        let mut scale_ids = Vec::with_capacity(batch * m);
        for b in 0..batch {
            for (s, &o) in seqs.iter().zip(&offsets) {
                order.extend((0..s.count).map(|j| Some(o + b * s.count + j)));
                scale_ids.extend((0..s.count).map(|_| Some(s.scale)));
            }
        }
        let parts: Vec<Var> = seqs.iter().map(|s| s.patches).collect();
        let all = tape.concat_rows(&parts)?;
        let rows = tape.gather_rows(all, &order)?;
        let x = self.input_proj.forward(tape, rows)?;
        let table = tape.param(self.scale_embedding);
        let emb = tape.gather_rows(table, &scale_ids)?;
        let x = tape.add(x, emb)?;
        let segments: Vec<(usize, usize)> = if self.config.per_scale {
            let mut segs = Vec::new();
            for b in 0..batch {
                let mut start = b * m;
                for s in seqs {
                    segs.push((start, s.count));
                    start += s.count;
                }
            }
            segs
        } else {
            (0..batch).map(|b| (b * m, m)).collect()
        };
        let states = self.transformer.forward(tape, x, &segments, None)?;
        Ok(EncodedPatches { states, batch, m, index })
    }

    /// All scales in configured order.
    pub fn encode(&self, tape: &mut Tape<'_>, images: &[&ImageTensor]) -> Result<EncodedPatches> {
        if images.is_empty() {
            return Err(Error::invalid("empty image batch"));
        }
        let seqs = (0..self.num_scales()).map(|i| self.patchify_scale(tape, images, i)).collect::<Result<Vec<_>>>()?;
        self.encode_patches(tape, &seqs)
    }
}
