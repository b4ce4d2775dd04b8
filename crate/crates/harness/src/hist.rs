//! Histograms of |w| per parameter tag.

use std::path::Path;

use serde::Serialize;

use samlab::nn::ParamTag;
use samlab::Model;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistRow {
    pub tag: ParamTag,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// `bins` uniform bins over `[0, max |w|]` for each tag that has parameters.
/// A tag whose values are all zero uses the range `[0, 1]`.
pub fn param_histograms(model: &Model, bins: usize) -> Result<Vec<HistRow>> {
    if bins < 2 {
        return Err(Error::Config(format!("bins must be at least 2, got {bins}")));
    }
    let mut rows = Vec::new();
    for tag in ParamTag::ALL {
        let values: Vec<f64> = model
            .registry
            .views()
            .iter()
            .filter(|v| v.tag == tag)
            .flat_map(|v| model.params[v.range()].iter().map(|w| w.abs()))
            .collect();
        if values.is_empty() {
            continue;
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        let hi = if max > 0.0 { max } else { 1.0 };
        let width = hi / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in values {
            let k = ((v / hi) * bins as f64) as usize;
            counts[k.min(bins - 1)] += 1;
        }
        rows.extend(counts.into_iter().enumerate().map(|(k, count)| HistRow {
            tag,
            bin_lo: k as f64 * width,
            bin_hi: if k + 1 == bins { hi } else { (k + 1) as f64 * width },
            count,
        }));
    }
    Ok(rows)
}

/// Mean of `|w|` over one tag, `None` if the tag is empty.
pub fn tag_mean(model: &Model, tag: ParamTag) -> Option<f64> {
    let values: Vec<f64> = model
        .registry
        .views()
        .iter()
        .filter(|v| v.tag == tag)
        .flat_map(|v| model.params[v.range()].iter().map(|w| w.abs()))
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn write_histograms(rows: &[HistRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    w.write_record(["tag", "bin_lo", "bin_hi", "count"])?;
    for r in rows {
        w.write_record([
            r.tag.as_str().to_string(),
            format!("{:.16e}", r.bin_lo),
            format!("{:.16e}", r.bin_hi),
            r.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
