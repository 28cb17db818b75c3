//! Named finite-difference checks over every tape primitive and the assembled model.

use crate::config::{RunConfig, Variant};
use crate::error::Error;
use crate::model::Micc;
use crate::numerics::{finite_difference_check, GradCheckOptions, GradCheckReport, NumericsError, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::text::{tokenize, Vocabulary};
use crate::visual::ImageTensor;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        let status = if self.report.passed() { "pass" } else { "FAIL" };
        let detail = self.report.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default();
        format!("{status} {:<28} max_rel_err={:.3e}{detail}", self.name, self.report.max_rel_error())
    }
}

type NResult<T> = Result<T, NumericsError>;

/// Weighted sum with fixed random weights, so no gradient vanishes by symmetry.
fn project(t: &mut Tape<'_>, y: Var) -> NResult<Var> {
    let shape = t.shape(y).to_vec();
    let n = shape.iter().product();
    let w = t.constant(Tensor::new(shape, Rng::new(99).uniform_vec(n, -1.0, 1.0))?);
    let y = t.mul(y, w)?;
    Ok(t.sum(y))
}

struct Case {
    shapes: Vec<Vec<usize>>,
    training: bool,
}

fn run_case<F>(name: &str, case: Case, tolerance: f64, seed: u64, build: F) -> CheckOutcome
where
    F: Fn(&mut Tape<'_>, &[Var]) -> NResult<Var>,
{
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let mut ids: Vec<ParamId> = Vec::new();
    for (i, shape) in case.shapes.iter().enumerate() {
        let n = shape.iter().product();
        let tensor = Tensor::new(shape.clone(), rng.uniform_vec(n, -1.0, 1.0)).expect("consistent shape");
        ids.push(store.add(format!("{name}.{i}"), tensor).expect("unique name"));
    }
    let opts = GradCheckOptions { tolerance, training: case.training, seed: seed ^ 0x77, ..GradCheckOptions::default() };
    let report = finite_difference_check(
        &mut store,
        |t| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let y = build(t, &vars)?;
            if t.shape(y).iter().product::<usize>() == 1 {
                Ok(y)
            } else {
                project(t, y)
            }
        },
        &opts,
    );
    CheckOutcome { name: name.to_string(), report }
}

fn plain(shapes: &[&[usize]]) -> Case {
    Case { shapes: shapes.iter().map(|s| s.to_vec()).collect(), training: false }
}

/// One check per differentiable primitive.
pub fn primitive_suite(tolerance: f64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut add = |name: &str, case: Case, build: &dyn Fn(&mut Tape<'_>, &[Var]) -> NResult<Var>| {
        out.push(run_case(name, case, tolerance, 1000 + out.len() as u64, build));
    };
    add("matmul", plain(&[&[3, 2], &[2, 4]]), &|t, v| t.matmul(v[0], v[1]));
    add("matmul_bt", plain(&[&[3, 2], &[4, 2]]), &|t, v| t.matmul_bt(v[0], v[1]));
    add("add", plain(&[&[2, 3], &[2, 3]]), &|t, v| t.add(v[0], v[1]));
    add("sub", plain(&[&[2, 3], &[2, 3]]), &|t, v| t.sub(v[0], v[1]));
    add("mul", plain(&[&[2, 3], &[2, 3]]), &|t, v| t.mul(v[0], v[1]));
    add("add_row", plain(&[&[3, 4], &[4]]), &|t, v| t.add_row(v[0], v[1]));
    add("scale", plain(&[&[2, 3]]), &|t, v| Ok(t.scale(v[0], -1.7)));
    add("relu", plain(&[&[3, 4]]), &|t, v| Ok(t.relu(v[0])));
    add("sigmoid", plain(&[&[3, 4]]), &|t, v| Ok(t.sigmoid(v[0])));
    add("softmax", plain(&[&[2, 5]]), &|t, v| t.softmax(v[0]));
    add("masked_softmax", plain(&[&[2, 4]]), &|t, v| {
        t.masked_softmax(v[0], Some(&[true, false, true, true, false, true, true, true]))
    });
    add("log_softmax", plain(&[&[2, 5]]), &|t, v| t.log_softmax(v[0]));
    add("layer_norm", plain(&[&[3, 4], &[4], &[4]]), &|t, v| t.layer_norm(v[0], v[1], v[2]));
    add("dropout", Case { training: true, ..plain(&[&[3, 4]]) }, &|t, v| t.dropout(v[0], 0.25));
    add("mean_rows", plain(&[&[3, 4]]), &|t, v| t.mean_rows(v[0], Some(&[true, false, true])));
    add("sum", plain(&[&[2, 3]]), &|t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    });
    add("mean", plain(&[&[2, 3]]), &|t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    });
    add("concat_rows", plain(&[&[2, 3], &[1, 3]]), &|t, v| t.concat_rows(&[v[0], v[1]]));
    add("concat_cols", plain(&[&[2, 3], &[2, 1]]), &|t, v| t.concat_cols(&[v[0], v[1]]));
    add("slice_cols", plain(&[&[3, 5]]), &|t, v| t.slice_cols(v[0], 1, 3));
    add("gather_rows", plain(&[&[3, 2]]), &|t, v| t.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)]));
    add("pick", plain(&[&[2, 3]]), &|t, v| t.pick(v[0], &[0, 4, 4, 5]));
    add("reshape", plain(&[&[2, 3]]), &|t, v| t.reshape(v[0], &[3, 2]));
    add("linear", plain(&[&[4, 3], &[3, 2], &[2]]), &|t, v| t.linear(v[0], v[1], Some(v[2])));
    add("attention", plain(&[&[5, 4], &[5, 4], &[5, 4]]), &|t, v| {
        t.attention(v[0], v[1], v[2], &[(0, 3), (3, 2)], 2, Some(&[true, false, true, true, true]))
    });
    add("bce", plain(&[&[4]]), &|t, v| {
        let p = t.sigmoid(v[0]);
        t.bce(p, &[1.0, 0.0, 0.0, 1.0])
    });
    add("row_normalize", plain(&[&[2, 3]]), &|t, v| Ok(t.row_normalize(v[0])));
    out
}

/// Small configuration the end-to-end checks run at.
pub fn gradcheck_config(variant: Variant) -> RunConfig {
    RunConfig {
        image_size: 16,
        scales: vec![4, 8],
        patch_channels: 4,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_width: 16,
        max_len: 8,
        proj_dim: 6,
        proj_hidden: 10,
        fusion_hidden: 5,
        classifier_hidden: 7,
        dropout: 0.0,
        variant,
        ..RunConfig::default()
    }
}

/// Full forward pass plus BCE on a one-sample batch, once per model variant.
pub fn end_to_end_suite(tolerance: f64) -> Vec<CheckOutcome> {
    let text = "red circle blue square";
    let vocab = Vocabulary::from_corpus([text]);
    let seq = tokenize(text, &vocab, 8).expect("fits");
    let image = ImageTensor::new(16, 16, Rng::new(4).uniform_vec(768, 0.0, 1.0)).expect("in range");
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = gradcheck_config(variant);
            let mut store = ParamStore::new();
            let model = Micc::new(&mut store, &cfg, vocab.len()).expect("valid config");
            let opts = GradCheckOptions { tolerance, max_entries: 6, ..GradCheckOptions::default() };
            let report = finite_difference_check(
                &mut store,
                |t| {
                    let f = model.forward(t, &[&seq], &[&image]).map_err(|e| match e {
                        Error::Numerics(n) => n,
                        other => NumericsError::NonFinite(other.to_string()),
                    })?;
                    t.bce(f.probs, &[1.0])
                },
                &opts,
            );
            CheckOutcome { name: format!("end-to-end/{}", variant.name()), report }
        })
        .collect()
}
