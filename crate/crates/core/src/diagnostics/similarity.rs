use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::consolidation::FisherMap;
use crate::error::{Error, Result};
use crate::harness::format::fmt_g;

fn group_pair<'a>(
    a: &'a FisherMap,
    b: &'a FisherMap,
    group: &str,
) -> Result<(&'a [f64], &'a [f64])> {
    let missing = |side: &str| Error::MissingParam(format!("{group} (in {side} map)"));
    let ta = a.get(group).ok_or_else(|| missing("first"))?;
    let tb = b.get(group).ok_or_else(|| missing("second"))?;
    if ta.shape() != tb.shape() {
        return Err(Error::shape(
            format!("importance group {group}"),
            format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        ));
    }
    Ok((ta.data(), tb.data()))
}

/// `a·b / (|a| |b|)`, or 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Pearson correlation, or 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity of two importance maps on one parameter group.
pub fn fim_cosine_similarity(a: &FisherMap, b: &FisherMap, group: &str) -> Result<f64> {
    let (x, y) = group_pair(a, b, group)?;
    Ok(cosine(x, y))
}

/// Correlation of two importance maps on one parameter group.
pub fn fim_correlation(a: &FisherMap, b: &FisherMap, group: &str) -> Result<f64> {
    let (x, y) = group_pair(a, b, group)?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation of group {group} needs at least 2 entries"
        )));
    }
    Ok(pearson(x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub group: String,
    pub lambda: f64,
    pub cosine: f64,
    pub correlation: f64,
    pub seed: u64,
}

/// Per-group similarity of two importance maps, possibly over a sweep of
/// consolidation strengths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
    pub dataset: String,
}

impl SimilarityReport {
    /// Appends one row per group of `groups`.
    pub fn push_groups(
        &mut self,
        a: &FisherMap,
        b: &FisherMap,
        groups: &[String],
        lambda: f64,
        seed: u64,
    ) -> Result<()> {
        for group in groups {
            let (x, y) = group_pair(a, b, group)?;
            self.rows.push(SimilarityRow {
                group: group.clone(),
                lambda,
                cosine: cosine(x, y),
                correlation: pearson(x, y),
                seed,
            });
        }
        Ok(())
    }

    /// Mean cosine over the rows with the given strength.
    pub fn mean_cosine(&self, lambda: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.lambda == lambda)
            .map(|r| r.cosine)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn row(&self, group: &str, lambda: f64) -> Option<&SimilarityRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.lambda == lambda)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["group", "lambda", "cosine", "correlation", "seed"])?;
        for r in &self.rows {
            w.write_record([
                r.group.clone(),
                fmt_g(r.lambda),
                fmt_g(r.cosine),
                fmt_g(r.correlation),
                r.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
