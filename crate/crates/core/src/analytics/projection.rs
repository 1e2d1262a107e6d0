use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AnalyticsError, EmbeddingMatrix};

const BLOCK: usize = 8;
const MAX_ITERS: usize = 1000;
const RESIDUAL_TOL: f64 = 1e-10;
const START_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProjectionMethod {
    Pca,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub rows: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub method: ProjectionMethod,
}

/// Projects onto the top two principal components.
///
/// The components come from block subspace iteration on the covariance
/// operator, which never forms the D x D matrix. Each component's sign is
/// fixed so that its largest-magnitude loading is positive.
pub fn project_2d(matrix: &EmbeddingMatrix) -> Result<Projection2D, AnalyticsError> {
    let n = matrix.n_rows();
    if n < 3 {
        return Err(AnalyticsError::TooFewRows { rows: n, needed: 3 });
    }
    let d = matrix.dims();
    let mut x = DMatrix::from_row_slice(n, d, matrix.values());
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }

    let b = BLOCK.min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let start = DMatrix::from_fn(d, b, |_, _| StandardNormal.sample(&mut rng));
    let mut q = start.qr().q();
    let mut components = DMatrix::zeros(d, 2);
    for _ in 0..MAX_ITERS {
        let w = x.transpose() * (&x * &q);
        let ritz = SymmetricEigen::new(q.transpose() * &w);
        let mut order: Vec<usize> = (0..ritz.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| ritz.eigenvalues[j].total_cmp(&ritz.eigenvalues[i]));
        let top = [order[0], order[1.min(order.len() - 1)]];
        let mut converged = true;
        let scale = ritz.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
        for (c, &idx) in top.iter().enumerate() {
            let v = ritz.eigenvectors.column(idx);
            let u = &q * v;
            let residual = &w * v - &u * ritz.eigenvalues[idx];
            if residual.norm() > RESIDUAL_TOL * scale {
                converged = false;
            }
            components.set_column(c, &u);
        }
        if converged || scale <= f64::MIN_POSITIVE {
            break;
        }
        q = w.qr().q();
    }

    for mut col in components.column_iter_mut() {
        let lead = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    let projected = &x * &components;
    let coords = projected.row_iter().map(|r| [r[0], r[1]]).collect();
    Ok(Projection2D {
        rows: matrix.ids().to_vec(),
        coords,
        method: ProjectionMethod::Pca,
    })
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    x: f64,
    y: f64,
}

/// Attaches precomputed coordinates from an `id,x,y` CSV, reordered to the
/// row order of `matrix`.
pub fn read_external_projection(matrix: &EmbeddingMatrix, reader: impl Read) -> Result<Projection2D, AnalyticsError> {
    let mut by_id: HashMap<String, [f64; 2]> = HashMap::new();
    let mut count = 0;
    for rec in csv::Reader::from_reader(reader).deserialize::<CsvRow>() {
        let rec = rec.map_err(|e| AnalyticsError::Format(format!("projection csv: {e}")))?;
        count += 1;
        if !(rec.x.is_finite() && rec.y.is_finite()) {
            return Err(AnalyticsError::NonFinite { row: count - 1 });
        }
        if by_id.insert(rec.id.clone(), [rec.x, rec.y]).is_some() {
            return Err(AnalyticsError::DuplicateRowId(rec.id));
        }
    }
    if count != matrix.n_rows() {
        return Err(AnalyticsError::Format(format!(
            "projection has {count} rows, matrix has {}",
            matrix.n_rows()
        )));
    }
    let coords = matrix
        .ids()
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| AnalyticsError::Format(format!("projection lacks row {id:?}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(Projection2D {
        rows: matrix.ids().to_vec(),
        coords,
        method: ProjectionMethod::External,
    })
}

pub fn write_projection_csv(projection: &Projection2D, writer: impl Write) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "x", "y"]).map_err(csv_err)?;
    for (id, [x, y]) in projection.rows.iter().zip(&projection.coords) {
        w.write_record([id.as_str(), &x.to_string(), &y.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> AnalyticsError {
    AnalyticsError::Format(format!("projection csv: {e}"))
}
