use crate::error::{Error, Result};
use crate::grid::{LabelMap, ScoreMap, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class intersection-over-union. Nodes carrying the ignore label in
/// either map are skipped; classes with an empty union do not enter the mean.
pub fn miou(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<IouReport> {
    let (pg, tg) = (pred.grid(), truth.grid());
    if pg.height() != tg.height() || pg.width() != tg.width() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pg.height(),
            pg.width(),
            tg.height(),
            tg.width()
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        if p == IGNORE_LABEL || t == IGNORE_LABEL {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        for class in [p, t] {
            if class >= classes {
                return Err(Error::ClassOutOfRange { class, classes });
            }
        }
        union[p] += 1;
        if p == t {
            inter[p] += 1;
        } else {
            union[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// Lowest index among the maximal scores of each node.
pub fn argmax_labels(y: &ScoreMap) -> LabelMap {
    let labels = y
        .values()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(*y.grid(), labels).expect("one label per node")
}
