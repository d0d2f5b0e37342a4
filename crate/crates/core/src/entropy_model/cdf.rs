//! Integer cumulative frequency tables derived from a [`FactorizedModel`].

use super::FactorizedModel;

pub const CDF_PRECISION: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_PRECISION;

/// Cumulative frequencies for one channel. `cum[0] = 0`,
/// `cum[n] = CDF_TOTAL`, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub channel: usize,
    /// Smallest symbol value; symbol `v` has index `v - offset`.
    pub offset: i32,
    pub cum: Vec<u32>,
}

impl CdfTable {
    /// Quantizes a probability vector to integer frequencies summing to
    /// [`CDF_TOTAL`], each at least 1. Every symbol first receives one count;
    /// the rest is split proportionally and leftover counts go to the
    /// largest fractional parts (ties to the lower index).
    pub fn from_probabilities(channel: usize, offset: i32, probs: &[f64]) -> Self {
        let n = probs.len();
        assert!(n >= 1 && n <= CDF_TOTAL as usize, "alphabet size {n}");
        let total: f64 = probs.iter().sum();
        let spare = (CDF_TOTAL as usize - n) as f64;
        let mut freq = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for &p in probs {
            let share = p / total * spare;
            let whole = share.floor();
            freq.push(1 + whole as u32);
            frac.push(share - whole);
        }
        let assigned: u32 = freq.iter().sum();
        let mut left = CDF_TOTAL - assigned;
        if left > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                freq[i] += 1;
                left -= 1;
            }
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, CDF_TOTAL);
        Self { channel, offset, cum }
    }

    pub fn alphabet_size(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    /// Symbol index whose interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Cost of symbol `index` under the table, in bits.
    pub fn bits(&self, index: usize) -> f64 {
        (CDF_TOTAL as f64 / self.freq(index) as f64).log2()
    }
}

/// One table per latent channel.
pub fn build_cdf_tables(model: &FactorizedModel) -> Vec<CdfTable> {
    (0..model.channels())
        .map(|k| CdfTable::from_probabilities(k, model.config().center_min, &model.pmf(k)))
        .collect()
}

/// Entropy in bits/symbol of the distribution the table encodes.
pub fn table_entropy(table: &CdfTable) -> f64 {
    let total = CDF_TOTAL as f64;
    (0..table.alphabet_size())
        .map(|i| {
            let p = table.freq(i) as f64 / total;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::EntropyConfig;
    use proptest::prelude::*;

    #[test]
    fn uniform_over_64_symbols_gives_1024_each() {
        let t = CdfTable::from_probabilities(0, -32, &[1.0 / 64.0; 64]);
        assert!((0..64).all(|i| t.freq(i) == 1024));
        let model = FactorizedModel::logistic(EntropyConfig::default(), 2, 1e7, 0.0).unwrap();
        for t in build_cdf_tables(&model) {
            assert!((0..64).all(|i| t.freq(i) == 1024));
        }
    }

    #[test]
    fn skewed_table_entropy_tracks_model_entropy() {
        let model = FactorizedModel::logistic(EntropyConfig::default(), 1, 1.5, 0.3).unwrap();
        let table = &build_cdf_tables(&model)[0];
        // Oracle: entropy recomputed from the model's own probabilities.
        let model_entropy: f64 = model.pmf(0).iter().map(|p| -p * p.log2()).sum();
        let gap = (table_entropy(table) - model_entropy).abs();
        assert!(gap < 0.01, "{gap}");
    }

    #[test]
    fn tables_are_deterministic() {
        let model = FactorizedModel::init(EntropyConfig::default(), 3, 12).unwrap();
        let copy = FactorizedModel::new(model.config().clone(), 3, model.params().to_vec()).unwrap();
        assert_eq!(build_cdf_tables(&model), build_cdf_tables(&copy));
    }

    #[test]
    fn lookup_inverts_cumulative_frequencies() {
        let t = CdfTable::from_probabilities(0, 0, &[0.5, 0.0, 0.25, 0.25]);
        for i in 0..4 {
            assert_eq!(t.lookup(t.cum[i]), i);
            assert_eq!(t.lookup(t.cum[i + 1] - 1), i);
        }
    }

    proptest! {
        #[test]
        fn frequencies_are_positive_and_sum_to_total(probs in proptest::collection::vec(0.0f64..1.0, 1..300)) {
            prop_assume!(probs.iter().sum::<f64>() > 0.0);
            let t = CdfTable::from_probabilities(0, 0, &probs);
            prop_assert_eq!(*t.cum.last().unwrap(), CDF_TOTAL);
            prop_assert!(t.cum.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
