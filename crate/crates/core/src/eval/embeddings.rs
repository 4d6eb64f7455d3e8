use std::path::Path;

use crate::episodic::DeployedModel;
use crate::error::{Error, Result};
use crate::proposals::BBox;
use crate::synth::Corpus;

use super::pca;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    /// Defect class, or `-1` for the background prototype.
    pub class_id: i32,
    pub is_prototype: bool,
    pub pca: [f64; 2],
    pub e: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
    /// Top two covariance eigenvalues of the exported batch.
    pub eigenvalues: [f64; 2],
}

/// One class-matched embedding per ground-truth box of `sample`, followed
/// by every prototype, projected onto the batch's top two principal axes.
pub fn export_embeddings(model: &DeployedModel, corpus: &Corpus, sample: &[usize]) -> Result<EmbeddingTable> {
    let mut rows = Vec::new();
    for &i in sample {
        let img = &corpus.images[i];
        let boxes: Vec<(BBox, u32)> = img
            .annotations
            .iter()
            .map(|a| (BBox::from(a.bbox), a.class_id))
            .collect();
        for ((_, c), e) in boxes.iter().zip(model.embed_boxes(&img.image, &boxes)?) {
            rows.push(EmbeddingRow {
                class_id: *c as i32,
                is_prototype: false,
                pca: [0.0; 2],
                e,
            });
        }
    }
    for p in &model.prototypes {
        rows.push(EmbeddingRow {
            class_id: p.label.code(),
            is_prototype: true,
            pca: [0.0; 2],
            e: p.c.data().to_vec(),
        });
    }
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.e.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let fit = pca::fit(&data, 2)?;
    for (r, x) in rows.iter_mut().zip(&data) {
        let p = fit.project(x);
        r.pca = [p[0], p.get(1).copied().unwrap_or(0.0)];
    }
    Ok(EmbeddingTable {
        rows,
        eigenvalues: [fit.eigenvalues[0], fit.eigenvalues.get(1).copied().unwrap_or(0.0)],
    })
}

/// Mean pairwise squared distance between same-class and between
/// different-class non-prototype rows, restricted to `classes`.
pub fn intra_inter_distances(table: &EmbeddingTable, classes: &[u32]) -> (f64, f64) {
    let rows: Vec<&EmbeddingRow> = table
        .rows
        .iter()
        .filter(|r| !r.is_prototype && r.class_id >= 0 && classes.contains(&(r.class_id as u32)))
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i]
                .e
                .iter()
                .zip(&rows[j].e)
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum();
            if rows[i].class_id == rows[j].class_id {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}

pub fn write_embeddings_csv(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let dim = table.rows.first().map_or(0, |r| r.e.len());
    let mut header = vec!["class_id".to_string(), "is_prototype".into(), "pca_x".into(), "pca_y".into()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![
            r.class_id.to_string(),
            u8::from(r.is_prototype).to_string(),
            r.pca[0].to_string(),
            r.pca[1].to_string(),
        ];
        rec.extend(r.e.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
