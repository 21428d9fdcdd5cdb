use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{refine_feature_queries, FeatureMap, ImageSpec, QaaParams};
use crate::attn_kernels::{mha_forward, Matrix};
use crate::error::{Error, Result};

/// Feature-prediction attention of one feature query over the patch grid,
/// averaged across heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrid {
    pub query_id: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major grid values; they sum to 1.
    pub values: Vec<f64>,
}

impl AttentionGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self.values[r * self.cols..(r + 1) * self.cols]
                .iter()
                .map(|v| format!("{v:.8e}"))
                .collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    /// Binary PGM (P5), min-max scaled to 0..=255. A constant grid maps to 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if range > 0.0 {
                ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }
}

pub fn export_attention_maps(
    x: &FeatureMap,
    params: &QaaParams,
    query_ids: &[usize],
    img: &ImageSpec,
) -> Result<Vec<AttentionGrid>> {
    let (rows, cols) = img.grid()?;
    if rows * cols != x.num_patches() {
        return Err(Error::dim(
            "export_attention_maps",
            format!("grid {rows}x{cols}"),
            format!("{} patches", x.num_patches()),
        ));
    }
    let n_q = params.config.n_q;
    if let Some(bad) = query_ids.iter().find(|&&q| q >= n_q) {
        return Err(Error::Index(format!("query id {bad} out of range for {n_q} queries")));
    }
    let q_f_hat = refine_feature_queries(params)?;
    let out = mha_forward(&q_f_hat, &x.patches, &x.patches, &params.feat_pred_attn)?;
    let heads = out.attn.len() as f64;
    let mut mean = Matrix::zeros(n_q, x.num_patches());
    for a in &out.attn {
        mean.add_assign(a)?;
    }
    Ok(query_ids
        .iter()
        .map(|&q| AttentionGrid {
            query_id: q,
            rows,
            cols,
            values: mean.row(q).iter().map(|v| v / heads).collect(),
        })
        .collect())
}

/// Writes `<image_id>_q<k>.csv` and `<image_id>_q<k>.pgm` per grid.
pub fn write_attention_maps(dir: &Path, image_id: &str, grids: &[AttentionGrid]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for g in grids {
        let stem = format!("{image_id}_q{}", g.query_id);
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, g.to_csv())?;
        let pgm = dir.join(format!("{stem}.pgm"));
        fs::write(&pgm, g.to_pgm())?;
        written.push(csv);
        written.push(pgm);
    }
    Ok(written)
}
