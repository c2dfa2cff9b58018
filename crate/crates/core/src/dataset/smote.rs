//! SMOTE over-sampling of a minority class in composition space.

use rand::Rng;

use super::composition::{ClassLabel, Composition};
use super::load::ClassifiedRow;
use crate::error::{invalid, Result};

pub const DEFAULT_SMOTE_K: usize = 5;

#[derive(Debug, Clone)]
pub struct SmoteOutput {
    /// Original rows followed by the synthetic ones.
    pub rows: Vec<ClassifiedRow>,
    pub n_synthetic: usize,
    /// Set when every minority row is identical.
    pub degenerate: bool,
}

/// Number of synthetic rows needed for `minority / majority == ratio`.
pub fn synthetic_count(n_minority: usize, n_majority: usize, ratio: f64) -> usize {
    let wanted = (ratio * n_majority as f64).round() as usize;
    wanted.saturating_sub(n_minority)
}

/// Adds synthetic `target` rows until the target/rest ratio reaches `ratio`.
///
/// Each synthetic row is `x + u (x_nn - x)` for a minority row `x`, one of its
/// `k` nearest minority neighbours `x_nn` (Euclidean) and `u ~ U[0, 1]`,
/// renormalized to 100 at.%.
pub fn smote_oversample<R: Rng + ?Sized>(
    rows: &[ClassifiedRow],
    target: ClassLabel,
    k: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<SmoteOutput> {
    if k == 0 {
        return Err(invalid("SMOTE needs k >= 1"));
    }
    if !(ratio > 0.0) {
        return Err(invalid(format!("SMOTE ratio {ratio} must be positive")));
    }
    let minority: Vec<&Composition> = rows
        .iter()
        .filter(|r| r.label == target)
        .map(|r| &r.composition)
        .collect();
    let n_majority = rows.len() - minority.len();
    if minority.len() < k + 1 {
        return Err(invalid(format!(
            "SMOTE needs at least k+1 = {} {target} rows, found {}",
            k + 1,
            minority.len()
        )));
    }
    let n_synthetic = synthetic_count(minority.len(), n_majority, ratio);

    let degenerate = minority.iter().all(|c| *c == minority[0]);
    if degenerate {
        log::warn!("SMOTE: all {target} rows are identical; synthetic rows duplicate them");
    }

    let neighbours: Vec<Vec<usize>> = (0..minority.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..minority.len())
                .filter(|&j| j != i)
                .map(|j| (minority[i].euclidean(minority[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();

    let mut out = rows.to_vec();
    out.reserve(n_synthetic);
    for s in 0..n_synthetic {
        let i = s % minority.len();
        let x = minority[i];
        let nn = minority[neighbours[i][rng.gen_range(0..neighbours[i].len())]];
        let u: f64 = rng.gen_range(0.0..=1.0);
        let mixed: Vec<f64> = x
            .fractions()
            .iter()
            .zip(nn.fractions())
            .map(|(a, b)| a + u * (b - a))
            .collect();
        out.push(ClassifiedRow {
            composition: Composition::normalized(mixed)?,
            label: target,
        });
    }
    Ok(SmoteOutput {
        rows: out,
        n_synthetic,
        degenerate,
    })
}
