//! Per-episode feature rankings and their distribution across categories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::shapley::AttributionMatrix;
use crate::explain::stats::{chi_square_independence, ChiSquare};
use crate::features::{DayVector, Feature, FEATURE_COUNT};
use crate::labeling::Category;

/// Order used when importances tie exactly.
pub const TIE_ORDER: [Feature; FEATURE_COUNT] = [Feature::RestingHr, Feature::Steps, Feature::Sleep];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    /// Indexed by feature column.
    pub importance: DayVector,
    /// Features from most to least important.
    pub order: [Feature; FEATURE_COUNT],
}

impl FeatureRanking {
    pub fn from_importance(importance: DayVector) -> Self {
        let mut order = TIE_ORDER;
        // Stable sort keeps the tie order among equal importances.
        order.sort_by(|a, b| importance[b.index()].total_cmp(&importance[a.index()]));
        FeatureRanking { importance, order }
    }

    /// 1-based rank of a feature.
    pub fn rank_of(&self, feature: Feature) -> usize {
        self.order.iter().position(|&f| f == feature).map_or(0, |p| p + 1)
    }
}

/// Rank features by the mean per-window importance over an episode's windows.
pub fn episode_feature_ranks(attributions: &[&AttributionMatrix]) -> Result<FeatureRanking> {
    if attributions.is_empty() {
        return Err(Error::InvalidInput("feature ranking needs at least one attributed window".into()));
    }
    let mut mean = [0.0; FEATURE_COUNT];
    for a in attributions {
        for (m, v) in mean.iter_mut().zip(&a.feature_importance) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= attributions.len() as f64;
    }
    Ok(FeatureRanking::from_importance(mean))
}

/// Counts of each feature at each rank, per episode category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    /// `[category][feature][rank - 1]`, categories in [`Category::ALL`] order.
    pub counts: [[[usize; FEATURE_COUNT]; FEATURE_COUNT]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub category: Category,
    pub feature: Feature,
    pub rank: usize,
    pub count: usize,
}

fn category_index(c: Category) -> usize {
    Category::ALL.iter().position(|&x| x == c).unwrap_or(0)
}

impl RankTable {
    pub fn add(&mut self, category: Category, ranking: &FeatureRanking) {
        let c = category_index(category);
        for (r, f) in ranking.order.iter().enumerate() {
            self.counts[c][f.index()][r] += 1;
        }
    }

    pub fn episodes(&self, category: Category) -> usize {
        self.counts[category_index(category)][0].iter().sum()
    }

    pub fn rows(&self) -> Vec<RankRow> {
        let mut out = Vec::new();
        for category in Category::ALL {
            for feature in Feature::ALL {
                for rank in 1..=FEATURE_COUNT {
                    out.push(RankRow {
                        category,
                        feature,
                        rank,
                        count: self.counts[category_index(category)][feature.index()][rank - 1],
                    });
                }
            }
        }
        out
    }

    /// Categories × features counts at one rank.
    pub fn rank_slice(&self, rank: usize) -> Vec<Vec<f64>> {
        Category::ALL
            .iter()
            .map(|&c| Feature::ALL.iter().map(|f| self.counts[category_index(c)][f.index()][rank - 1] as f64).collect())
            .collect()
    }

    /// Categories × ranks counts for one feature.
    pub fn feature_slice(&self, feature: Feature) -> Vec<Vec<f64>> {
        Category::ALL
            .iter()
            .map(|&c| self.counts[category_index(c)][feature.index()].iter().map(|&n| n as f64).collect())
            .collect()
    }
}

/// Result of one rank-distribution test, or why it could not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    pub slice: String,
    pub result: Option<ChiSquare>,
    pub error: Option<String>,
}

/// Chi-square test of one slice of the rank table.
pub fn rank_distribution_test(table: &[Vec<f64>]) -> Result<ChiSquare> {
    chi_square_independence(table)
}

/// Tests over the rank-1 and rank-2 slices and each feature slice.
pub fn standard_rank_tests(table: &RankTable) -> Vec<RankTest> {
    let mut slices: Vec<(String, Vec<Vec<f64>>)> = (1..=2).map(|r| (format!("rank_{r}"), table.rank_slice(r))).collect();
    for f in Feature::ALL {
        slices.push((format!("feature_{}", f.as_str()), table.feature_slice(f)));
    }
    slices
        .into_iter()
        .map(|(slice, t)| match rank_distribution_test(&t) {
            Ok(r) => RankTest {
                slice,
                result: Some(r),
                error: None,
            },
            Err(e) => RankTest {
                slice,
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_order_and_ties() {
        let r = FeatureRanking::from_importance([0.1, 0.5, 0.9]);
        assert_eq!(r.order, [Feature::RestingHr, Feature::Steps, Feature::Sleep]);
        let r = FeatureRanking::from_importance([0.1, 0.5, 0.5]);
        assert_eq!(r.rank_of(Feature::RestingHr), 1);
        assert_eq!(r.rank_of(Feature::Steps), 2);
        let r = FeatureRanking::from_importance([0.7, 0.7, 0.7]);
        assert_eq!(r.order, TIE_ORDER);
        let r = FeatureRanking::from_importance([0.9, 0.0, 0.3]);
        assert_eq!(r.order, [Feature::Sleep, Feature::RestingHr, Feature::Steps]);
    }

    #[test]
    fn table_margins() {
        let mut t = RankTable::default();
        t.add(Category::Both, &FeatureRanking::from_importance([0.1, 0.5, 0.9]));
        t.add(Category::Both, &FeatureRanking::from_importance([0.9, 0.5, 0.1]));
        t.add(Category::GadOnly, &FeatureRanking::from_importance([0.2, 0.8, 0.1]));
        assert_eq!(t.episodes(Category::Both), 2);
        assert_eq!(t.episodes(Category::PhqOnly), 0);
        for c in Category::ALL {
            for rank in 0..3 {
                let s: usize = (0..3).map(|f| t.counts[category_index(c)][f][rank]).sum();
                assert_eq!(s, t.episodes(c));
            }
        }
        assert_eq!(t.rows().len(), 27);
        let tests = standard_rank_tests(&t);
        assert!(tests.iter().all(|x| x.result.is_some() != x.error.is_some()));
    }
}
