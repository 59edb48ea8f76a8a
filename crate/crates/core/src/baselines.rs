//! Non-latent comparison recommenders: global item popularity and
//! item-to-item correlation with the most recent view.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::data::{Session, SessionSet};
use crate::error::{Error, Result};
use crate::metrics::NextItemPredictor;

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityModel {
    pub counts: Vec<u64>,
}

pub fn fit_popularity(train: &SessionSet) -> Result<PopularityModel> {
    if train.is_empty() || train.num_events() == 0 {
        return Err(Error::arg("popularity needs at least one training view"));
    }
    Ok(PopularityModel {
        counts: train.item_counts(),
    })
}

impl PopularityModel {
    /// Normalized view counts; the same for every query.
    pub fn predict(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

impl NextItemPredictor for PopularityModel {
    fn predict_next(&self, _history: &[usize], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.predict())
    }
}

/// Pearson correlation between item columns of the session-by-item count
/// matrix, with the identity added to the co-count matrix so that items
/// with zero variance still normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemKnnModel {
    pub corr: DMatrix<f64>,
}

pub fn fit_itemknn(train: &SessionSet) -> Result<ItemKnnModel> {
    if train.is_empty() {
        return Err(Error::arg("item-KNN needs a non-empty training set"));
    }
    let p = train.num_items();
    if p < 2 {
        return Err(Error::arg("item-KNN needs at least two items"));
    }
    let n = train.len() as f64;

    let mut gram = DMatrix::<f64>::identity(p, p);
    let mut sums = vec![0.0; p];
    let mut row = vec![0.0; p];
    for s in train.sessions() {
        row.iter_mut().for_each(|v| *v = 0.0);
        for &v in &s.views {
            row[v] += 1.0;
        }
        let present: Vec<usize> = (0..p).filter(|&i| row[i] != 0.0).collect();
        for &i in &present {
            sums[i] += row[i];
            for &j in &present {
                gram[(i, j)] += row[i] * row[j];
            }
        }
    }

    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let cov = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / n - means[i] * means[j]);
    let mut corr = DMatrix::from_fn(p, p, |i, j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt());
    // exact symmetry regardless of evaluation order
    corr = (&corr + corr.transpose()) * 0.5;
    Ok(ItemKnnModel { corr })
}

impl ItemKnnModel {
    /// Correlation row of the session's last view, min-shifted and
    /// normalized to sum to one (uniform when the row is constant).
    pub fn predict(&self, session: &Session) -> Result<Vec<f64>> {
        let last = session
            .last()
            .ok_or_else(|| Error::arg(format!("session {:?} is empty", session.id)))?;
        self.predict_from_last(last)
    }

    pub fn predict_from_last(&self, last: usize) -> Result<Vec<f64>> {
        let p = self.corr.nrows();
        if last >= p {
            return Err(Error::Bounds { item: last, num_items: p });
        }
        let row: Vec<f64> = self.corr.row(last).iter().copied().collect();
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = row.iter().map(|v| v - min).collect();
        let total: f64 = shifted.iter().sum();
        if total > 0.0 {
            Ok(shifted.iter().map(|v| v / total).collect())
        } else {
            Ok(vec![1.0 / p as f64; p])
        }
    }
}

impl NextItemPredictor for ItemKnnModel {
    fn predict_next(&self, history: &[usize], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let last = *history
            .last()
            .ok_or_else(|| Error::arg("item-KNN needs a non-empty history"))?;
        self.predict_from_last(last)
    }
}
