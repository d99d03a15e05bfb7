use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::error::{Error, Result};
use crate::stream::BiasedSample;

fn split_pairs<'a>(
    pairs: &[(&'a BiasedSample, &'a BiasedSample)],
) -> (Vec<&'a BiasedSample>, Vec<&'a BiasedSample>) {
    pairs.iter().map(|&(o, f)| (o, f)).unzip()
}

/// Bias-flipped misclassification rate: among correctly classified samples,
/// the fraction whose flipped counterpart is misclassified. `None` when no
/// sample is classified correctly.
pub fn bmr(
    predictor: &dyn Predictor,
    pairs: &[(&BiasedSample, &BiasedSample)],
) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Err(Error::Empty("bmr pairs".into()));
    }
    let (originals, flipped) = split_pairs(pairs);
    let on_original = predictor.predict(&originals)?;
    let on_flipped = predictor.predict(&flipped)?;
    let mut correct = 0usize;
    let mut flipped_wrong = 0usize;
    for ((s, p), pf) in originals.iter().zip(&on_original).zip(&on_flipped) {
        if *p == s.class {
            correct += 1;
            if *pf != s.class {
                flipped_wrong += 1;
            }
        }
    }
    Ok((correct > 0).then(|| flipped_wrong as f64 / correct as f64))
}

/// Difference of classwise accuracy: mean over classes of the largest
/// accuracy gap between two groups of that class.
pub fn dca(predictor: &dyn Predictor, samples: &[&BiasedSample], group_count: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("dca dataset".into()));
    }
    let predicted = predictor.predict(samples)?;
    // (class, group) -> (correct, total)
    let mut cells: BTreeMap<(usize, u8), (usize, usize)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(&predicted) {
        let cell = cells.entry((s.class, s.group())).or_insert((0, 0));
        cell.1 += 1;
        if *p == s.class {
            cell.0 += 1;
        }
    }
    let classes: BTreeSet<usize> = samples.iter().map(|s| s.class).collect();
    let mut total = 0.0;
    for &class in &classes {
        let mut accs = Vec::with_capacity(group_count);
        for group in 0..group_count as u8 {
            let (c, n) = cells
                .get(&(class, group))
                .copied()
                .ok_or(Error::EmptyCell { class, group })?;
            accs.push(c as f64 / n as f64);
        }
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        total += max - min;
    }
    Ok(total / classes.len() as f64)
}

/// Old / new / bias-class split of the class space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub old: BTreeSet<usize>,
    pub new: BTreeSet<usize>,
    pub bias_class: Option<usize>,
}

impl ClassPartition {
    /// Checks that the three parts are disjoint and cover `all_classes`.
    pub fn check_cover(&self, all_classes: &BTreeSet<usize>) -> Result<()> {
        let mut union = BTreeSet::new();
        let parts = self
            .old
            .iter()
            .chain(&self.new)
            .chain(self.bias_class.iter());
        for &c in parts {
            if !union.insert(c) {
                return Err(Error::InvalidSpec(format!("class {c} in two partition parts")));
            }
        }
        if &union != all_classes {
            return Err(Error::InvalidSpec(format!(
                "partition covers {union:?}, classes are {all_classes:?}"
            )));
        }
        Ok(())
    }

    fn category(&self, class: usize) -> Category {
        if self.bias_class == Some(class) {
            Category::BiasClass
        } else if self.old.contains(&class) {
            Category::Old
        } else {
            Category::New
        }
    }
}

enum Category {
    Old,
    New,
    BiasClass,
}

/// Where the bias-flipped misclassifications of correctly classified samples go.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub correct: usize,
    pub to_old: usize,
    pub to_new: usize,
    pub to_bias_class: usize,
    pub old_rate: f64,
    pub new_rate: f64,
    pub bias_class_rate: f64,
    /// Sum of the three rates.
    pub bmr: f64,
}

pub fn misclass_breakdown(
    predictor: &dyn Predictor,
    pairs: &[(&BiasedSample, &BiasedSample)],
    partition: &ClassPartition,
    all_classes: &BTreeSet<usize>,
) -> Result<Option<Breakdown>> {
    partition.check_cover(all_classes)?;
    if pairs.is_empty() {
        return Err(Error::Empty("breakdown pairs".into()));
    }
    let (originals, flipped) = split_pairs(pairs);
    let on_original = predictor.predict(&originals)?;
    let on_flipped = predictor.predict(&flipped)?;
    let mut b = Breakdown::default();
    for ((s, p), pf) in originals.iter().zip(&on_original).zip(&on_flipped) {
        if *p != s.class {
            continue;
        }
        b.correct += 1;
        if *pf != s.class {
            match partition.category(*pf) {
                Category::Old => b.to_old += 1,
                Category::New => b.to_new += 1,
                Category::BiasClass => b.to_bias_class += 1,
            }
        }
    }
    if b.correct == 0 {
        return Ok(None);
    }
    let n = b.correct as f64;
    b.old_rate = b.to_old as f64 / n;
    b.new_rate = b.to_new as f64 / n;
    b.bias_class_rate = b.to_bias_class as f64 / n;
    b.bmr = (b.to_old + b.to_new + b.to_bias_class) as f64 / n;
    Ok(Some(b))
}
