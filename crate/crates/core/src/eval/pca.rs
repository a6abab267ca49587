use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `n × k` scores of the centered data.
    pub projection: DMatrix<f64>,
    /// `k × d`, one unit principal direction per row.
    pub components: DMatrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub mean: DVector<f64>,
    /// Set when the data rank is below the requested component count; only
    /// the available components are returned.
    pub degenerate: bool,
}

/// Mean-centered PCA through a thin SVD. Each direction is signed so that
/// its largest-magnitude entry is positive.
pub fn pca_project(embeddings: &[DVector<f64>], components: usize) -> Result<PcaResult> {
    let n = embeddings.len();
    if components == 0 || n < components {
        return Err(Error::InvalidInput(format!(
            "need n >= components >= 1, got n={n}, components={components}"
        )));
    }
    let d = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::LengthMismatch { left: d, right: bad.len() });
    }
    let data = DMatrix::from_fn(n, d, |r, c| embeddings[r][c]);
    let mean = DVector::from_iterator(d, data.column_iter().map(|c| c.mean()));
    let mut centered = data;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }

    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let sigma_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = n.max(d) as f64 * f64::EPSILON * sigma_max;
    let rank = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
    let k = components.min(rank);
    let total: f64 = order.iter().map(|&i| svd.singular_values[i].powi(2)).sum();

    let mut basis = DMatrix::zeros(k, d);
    let mut ratios = Vec::with_capacity(k);
    for (row, &i) in order.iter().take(k).enumerate() {
        let mut dir = v_t.row(i).clone_owned();
        let lead = dir.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            dir = -dir;
        }
        basis.set_row(row, &dir);
        ratios.push(svd.singular_values[i].powi(2) / total);
    }
    let projection = &centered * basis.transpose();
    Ok(PcaResult {
        projection,
        components: basis,
        explained_variance_ratio: ratios,
        mean,
        degenerate: k < components,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PcaMeta {
    pub n: usize,
    pub components: usize,
    pub explained_variance_ratio: Vec<f64>,
    pub degenerate: bool,
    pub seed: u64,
}

/// Writes `sample_id,pc1,pc2,label` rows. Missing components (degenerate
/// data) are written as 0.
pub fn write_pca_csv(path: &Path, ids: &[String], labels: &[Label], result: &PcaResult) -> Result<()> {
    if ids.len() != result.projection.nrows() || labels.len() != ids.len() {
        return Err(Error::LengthMismatch {
            left: ids.len(),
            right: result.projection.nrows(),
        });
    }
    let mut out = String::from("sample_id,pc1,pc2,label\n");
    for (r, (id, label)) in ids.iter().zip(labels).enumerate() {
        let pc = |c: usize| if c < result.projection.ncols() { result.projection[(r, c)] } else { 0.0 };
        out.push_str(&format!("{},{},{},{}\n", csv_field(id), pc(0), pc(1), label));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
