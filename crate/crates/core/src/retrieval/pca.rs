use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

use super::index::EmbeddingIndex;

/// Projection of every index row onto the two leading principal axes.
/// Each axis is signed so its largest-magnitude component is positive.
pub fn pca_2d(index: &EmbeddingIndex) -> Result<Vec<[f64; 2]>> {
    let (n, d) = (index.len(), index.dim());
    if n < 2 || d < 2 {
        return Err(Error::contract(format!("PCA needs at least 2 rows and 2 dims, got {n}×{d}")));
    }
    let x = DMatrix::from_fn(n, d, |r, c| index.vector(r)[c] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&i| {
            let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|v| v * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|r| {
            let row = centered.row(r);
            let proj = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

/// CSV with columns `id,modality,x,y`.
pub fn write_pca_csv(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    let coords = pca_2d(index)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,modality,x,y")?;
    for (r, [x, y]) in coords.iter().enumerate() {
        writeln!(out, "{},{},{x},{y}", index.ids()[r], index.modalities()[r].name())?;
    }
    out.flush()?;
    Ok(())
}
