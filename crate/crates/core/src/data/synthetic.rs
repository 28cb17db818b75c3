//! Coloured-shape scenes with captions. Rumor captions disagree with their image in exactly
//! one object while text-only and image-only distributions stay identical across classes.

use std::fmt;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::visual::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
/// Objects are placed one per cell of a 2x2 grid.
pub const MAX_OBJECTS: usize = 4;

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

impl fmt::Display for Object {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

pub fn all_objects() -> Vec<Object> {
    COLORS.iter().flat_map(|&color| SHAPES.iter().map(move |&shape| Object { color, shape })).collect()
}

pub fn caption(objects: &[Object]) -> String {
    objects.iter().map(Object::to_string).collect::<Vec<_>>().join(" ")
}

/// Every token the generator can emit.
pub fn vocabulary_words() -> Vec<&'static str> {
    COLORS.iter().map(|c| c.name()).chain(SHAPES.iter().map(|s| s.name())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Upper bound on the objects a labelled caption names.
    pub max_claims: usize,
    pub rumor_rate: f64,
}

impl SyntheticSpec {
    pub fn new(seed: u64, image_size: usize) -> Self {
        Self { seed, image_size, min_objects: 1, max_objects: MAX_OBJECTS, max_claims: 2, rumor_rate: 0.5 }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!("synthetic image size {} must be even and >= 8", self.image_size)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return Err(Error::Config(format!(
                "objects per image must satisfy 1 <= {} <= {} <= {MAX_OBJECTS}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_claims == 0 || self.max_claims > MAX_OBJECTS {
            return Err(Error::Config(format!("claims per caption must lie in 1..={MAX_OBJECTS}, got {}", self.max_claims)));
        }
        if !(self.rumor_rate > 0.0 && self.rumor_rate < 1.0) {
            return Err(Error::Config(format!("rumor rate {} must lie in (0, 1)", self.rumor_rate)));
        }
        Ok(())
    }
}

/// A generated scene: what the caption claims and what the image shows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub claimed: Vec<Object>,
    pub rendered: Vec<Object>,
    pub label: Option<u8>,
}

fn inside(shape: Shape, cell: usize, x: usize, y: usize) -> bool {
    let margin = (cell / 8).max(1);
    let (lo, hi) = (margin, cell - margin);
    if x < lo || x >= hi || y < lo || y >= hi {
        return false;
    }
    let c = cell as f64 / 2.0;
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let half = c - margin as f64;
    match shape {
        Shape::Square => true,
        Shape::Circle => (px - c).powi(2) + (py - c).powi(2) <= half * half,
        Shape::Triangle => {
            let progress = (py - lo as f64) / (hi - lo) as f64;
            (px - c).abs() <= progress * half
        }
    }
}

/// Filled shapes on white; object `i` occupies cell `i` of a row-major 2x2 grid.
pub fn render(objects: &[Object], size: usize) -> Result<ImageTensor> {
    if objects.len() > MAX_OBJECTS {
        return Err(Error::invalid(format!("at most {MAX_OBJECTS} objects fit the grid")));
    }
    let mut img = ImageTensor::filled(size, size, [1.0; 3])?;
    let cell = size / 2;
    for (i, obj) in objects.iter().enumerate() {
        let (oy, ox) = ((i / 2) * cell, (i % 2) * cell);
        let rgb = obj.color.rgb();
        for y in 0..cell {
            for x in 0..cell {
                if inside(obj.shape, cell, x, y) {
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(c, oy + y, ox + x, v);
                    }
                }
            }
        }
    }
    Ok(img)
}

fn distinct_objects(rng: &mut Rng, n: usize) -> Vec<Object> {
    let mut pool = all_objects();
    rng.shuffle(&mut pool);
    pool.truncate(n);
    pool
}

fn object_count(rng: &mut Rng, spec: &SyntheticSpec) -> usize {
    spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1)
}

/// Truthful scenes for contrastive pretraining.
pub fn generate_pair_scenes(spec: &SyntheticSpec, n: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).fork(1);
    Ok((0..n)
        .map(|_| {
            let count = object_count(&mut rng, spec);
            let objs = distinct_objects(&mut rng, count);
            Scene { claimed: objs.clone(), rendered: objs, label: None }
        })
        .collect())
}

/// Labelled scenes. The caption names one to `max_claims` of the rendered objects in render
/// order; a rumor swaps one of those claims for an object the image does not show. Captions
/// and images are each uniform over distinct object sequences in both classes.
pub fn generate_rumor_scenes(spec: &SyntheticSpec, n: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).fork(2);
    let rumors = (n as f64 * spec.rumor_rate).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < rumors)).collect();
    rng.shuffle(&mut labels);
    Ok(labels
        .into_iter()
        .map(|label| {
            let count = object_count(&mut rng, spec);
            let rendered = distinct_objects(&mut rng, count);
            let claims = 1 + rng.below(spec.max_claims.min(count));
            let mut cells: Vec<usize> = (0..count).collect();
            rng.shuffle(&mut cells);
            cells.truncate(claims);
            cells.sort_unstable();
            let mut claimed: Vec<Object> = cells.iter().map(|&i| rendered[i]).collect();
            if label == 1 {
                let absent: Vec<Object> = all_objects().into_iter().filter(|o| !rendered.contains(o)).collect();
                let pos = rng.below(claims);
                claimed[pos] = absent[rng.below(absent.len())];
            }
            Scene { claimed, rendered, label: Some(label) }
        })
        .collect())
}

fn to_samples(scenes: &[Scene], prefix: &str, size: usize) -> Result<Vec<Sample>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Sample { id: format!("{prefix}-{i:05}"), text: caption(&s.claimed), image: render(&s.rendered, size)?, label: s.label })
        })
        .collect()
}

pub fn generate_pretraining_pairs(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    to_samples(&generate_pair_scenes(spec, n)?, "pair", spec.image_size)
}

pub fn generate_rumor_samples(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    to_samples(&generate_rumor_scenes(spec, n)?, "sample", spec.image_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn red_dominant(p: [f64; 3]) -> bool {
        p[0] > 0.5 && p[1] < 0.5 && p[2] < 0.5
    }

    /// Connected components (4-neighbour) of pixels matching `pred`, with their sizes.
    fn regions(img: &ImageTensor, pred: impl Fn([f64; 3]) -> bool) -> Vec<usize> {
        let (h, w) = (img.height(), img.width());
        let mut seen = vec![false; h * w];
        let mut sizes = Vec::new();
        for start in 0..h * w {
            if seen[start] || !pred(img.pixel(start / w, start % w)) {
                continue;
            }
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            let mut size = 0;
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (y, x) = (i / w, i % w);
                let mut nb = Vec::new();
                if y > 0 { nb.push(i - w); }
                if y + 1 < h { nb.push(i + w); }
                if x > 0 { nb.push(i - 1); }
                if x + 1 < w { nb.push(i + 1); }
                for j in nb {
                    if !seen[j] && pred(img.pixel(j / w, j % w)) {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            sizes.push(size);
        }
        sizes
    }

    #[test]
    fn single_red_circle_is_one_region() {
        let img = render(&[Object { color: Color::Red, shape: Shape::Circle }], 64).unwrap();
        let sizes = regions(&img, red_dominant);
        assert_eq!(sizes.len(), 1);
        // cell 32, margin 4, radius 12
        let expected = std::f64::consts::PI * 144.0;
        assert!((sizes[0] as f64 - expected).abs() / expected < 0.1, "{sizes:?}");
    }

    #[test]
    fn shapes_have_distinct_areas() {
        let area = |shape| {
            let img = render(&[Object { color: Color::Blue, shape }], 32).unwrap();
            regions(&img, |p| p[2] > 0.5 && p[0] < 0.5).iter().sum::<usize>()
        };
        let (c, s, t) = (area(Shape::Circle), area(Shape::Square), area(Shape::Triangle));
        assert!(t < c && c < s, "{t} {c} {s}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::new(5, 32);
        assert_eq!(generate_pretraining_pairs(&spec, 2).unwrap(), generate_pretraining_pairs(&spec, 2).unwrap());
        assert_eq!(generate_rumor_samples(&spec, 3).unwrap(), generate_rumor_samples(&spec, 3).unwrap());
        let other = SyntheticSpec::new(6, 32);
        assert_ne!(generate_rumor_scenes(&spec, 20).unwrap(), generate_rumor_scenes(&other, 20).unwrap());
    }

    #[test]
    fn captions_match_rendered_objects() {
        let spec = SyntheticSpec::new(9, 32);
        for s in generate_pair_scenes(&spec, 200).unwrap() {
            assert_eq!(s.claimed, s.rendered);
        }
        let pairs = generate_pretraining_pairs(&spec, 50).unwrap();
        for (p, s) in pairs.iter().zip(generate_pair_scenes(&spec, 50).unwrap()) {
            let mut words: Vec<&str> = p.text.split(' ').collect();
            let mut expected: Vec<String> =
                s.rendered.iter().flat_map(|o| [o.color.name().to_string(), o.shape.name().to_string()]).collect();
            words.sort();
            expected.sort();
            assert_eq!(words, expected);
            for (i, o) in s.rendered.iter().enumerate() {
                let cell = 16;
                let centre = p.image.pixel((i / 2) * cell + cell / 2, (i % 2) * cell + cell / 2);
                assert_eq!(centre, o.color.rgb());
            }
        }
    }

    #[test]
    fn rumor_construction() {
        let spec = SyntheticSpec::new(3, 32);
        let scenes = generate_rumor_scenes(&spec, 1000).unwrap();
        let rumors = scenes.iter().filter(|s| s.label == Some(1)).count();
        assert_eq!(rumors, 500);
        let mut claim_counts = [[0usize; 3]; 2];
        for s in &scenes {
            let missing = s.claimed.iter().filter(|c| !s.rendered.contains(c)).count();
            if s.label == Some(1) {
                assert_eq!(missing, 1);
            } else {
                assert_eq!(missing, 0);
            }
            assert!((1..=s.rendered.len().min(2)).contains(&s.claimed.len()));
            claim_counts[s.label.unwrap() as usize][s.claimed.len()] += 1;
            // claims that were kept appear in render order
            let kept: Vec<usize> =
                s.claimed.iter().filter_map(|c| s.rendered.iter().position(|r| r == c)).collect();
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
            let mut r = s.rendered.clone();
            r.sort();
            r.dedup();
            assert_eq!(r.len(), s.rendered.len());
        }
        // claim length carries no label information
        for k in 1..3 {
            let (a, b) = (claim_counts[0][k] as f64, claim_counts[1][k] as f64);
            assert!((a - b).abs() / (a + b) < 0.15, "{claim_counts:?}");
        }
    }

    #[test]
    fn vocabulary_is_small_and_closed() {
        let words = vocabulary_words();
        assert!(words.len() < 40);
        let spec = SyntheticSpec::new(1, 32);
        for s in generate_rumor_scenes(&spec, 100).unwrap() {
            for w in caption(&s.claimed).split(' ') {
                assert!(words.contains(&w));
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::new(1, 32);
        spec.rumor_rate = 1.0;
        assert!(generate_rumor_scenes(&spec, 1).is_err());
        assert!(generate_rumor_scenes(&SyntheticSpec::new(1, 30 + 1), 1).is_err());
        let no_claims = SyntheticSpec { max_claims: 0, ..SyntheticSpec::new(1, 32) };
        assert!(generate_rumor_scenes(&no_claims, 1).is_err());
    }
}
