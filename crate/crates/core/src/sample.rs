//! Subset selection over scored synthetic pools.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::QualityRecord;
use crate::quality::Polarity;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    ById,
    BySeedShuffle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub metric_name: String,
    pub rounds: usize,
    pub increment: usize,
    pub seed: u64,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl SelectionPlan {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.rounds == 0 || self.increment == 0 {
            return Err(Error::Size("rounds and increment must be positive".into()));
        }
        if self.rounds * self.increment > pool_size {
            return Err(Error::Size(format!(
                "{} rounds of {} exceed the pool of {pool_size}",
                self.rounds, self.increment
            )));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        (1..=self.rounds).map(|r| r * self.increment).collect()
    }
}

fn shuffle_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Ids of the `n` best records under `polarity`, best first.
pub fn top_n(records: &[QualityRecord], n: usize, polarity: Polarity, tie_break: TieBreak, seed: u64) -> Result<Vec<String>> {
    if n > records.len() {
        return Err(Error::Size(format!("cannot select {n} of {} records", records.len())));
    }
    let mut order: Vec<&QualityRecord> = records.iter().collect();
    let by_score = |a: &QualityRecord, b: &QualityRecord| match polarity {
        Polarity::LowerIsBetter => a.score.total_cmp(&b.score),
        Polarity::HigherIsBetter => b.score.total_cmp(&a.score),
    };
    order.sort_by(|a, b| {
        by_score(a, b).then_with(|| match tie_break {
            TieBreak::ById => a.image_id.cmp(&b.image_id),
            TieBreak::BySeedShuffle => shuffle_key(seed, &a.image_id)
                .cmp(&shuffle_key(seed, &b.image_id))
                .then_with(|| a.image_id.cmp(&b.image_id)),
        })
    });
    Ok(order.into_iter().take(n).map(|r| r.image_id.clone()).collect())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn lookup<'a>(embeddings: &'a BTreeMap<String, Vec<f64>>, id: &str) -> Result<&'a [f64]> {
    embeddings
        .get(id)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Embedding(format!("no embedding for {id}")))
}

/// Greedy k-center: each step takes the pool point farthest (in minimum Euclidean
/// distance) from the base set and everything picked so far. Ties go to the
/// smallest id.
pub fn coreset_select(
    embeddings: &BTreeMap<String, Vec<f64>>,
    base_ids: &[String],
    pool_ids: &[String],
    k: usize,
) -> Result<Vec<String>> {
    if k > pool_ids.len() {
        return Err(Error::Size(format!("cannot select {k} of {} pool points", pool_ids.len())));
    }
    let dim = embeddings.values().next().map(Vec::len).unwrap_or(0);
    if let Some((id, v)) = embeddings.iter().find(|(_, v)| v.len() != dim) {
        return Err(Error::Embedding(format!("{id} has dimension {}, expected {dim}", v.len())));
    }
    let mut pool: Vec<(&str, &[f64], f64)> = Vec::with_capacity(pool_ids.len());
    for id in pool_ids {
        pool.push((id.as_str(), lookup(embeddings, id)?, f64::INFINITY));
    }
    for b in base_ids {
        let bv = lookup(embeddings, b)?;
        for p in pool.iter_mut() {
            p.2 = p.2.min(distance(p.1, bv));
        }
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; pool.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, p) in pool.iter().enumerate() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) => match p.2.total_cmp(&pool[j].2) {
                    Ordering::Greater => Some(i),
                    Ordering::Equal if p.0 < pool[j].0 => Some(i),
                    _ => Some(j),
                },
            };
        }
        let pick = best.expect("k <= pool size");
        taken[pick] = true;
        chosen.push(pool[pick].0.to_string());
        let pv = pool[pick].1;
        for p in pool.iter_mut() {
            p.2 = p.2.min(distance(p.1, pv));
        }
    }
    Ok(chosen)
}

/// Z-scores every embedding dimension over the given set; constant dimensions
/// are left centred at zero.
pub fn standardize(embeddings: &BTreeMap<String, Vec<f64>>) -> BTreeMap<String, Vec<f64>> {
    let n = embeddings.len() as f64;
    let dim = embeddings.values().next().map(Vec::len).unwrap_or(0);
    let mut mean = vec![0.0; dim];
    for v in embeddings.values() {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let mut sd = vec![0.0; dim];
    for v in embeddings.values() {
        for ((s, x), m) in sd.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    embeddings
        .iter()
        .map(|(k, v)| {
            let z = v
                .iter()
                .zip(&mean)
                .zip(&sd)
                .map(|((x, m), s)| if *s > 0.0 { (x - m) / s.sqrt() } else { 0.0 })
                .collect();
            (k.clone(), z)
        })
        .collect()
}

/// Uniform sample without replacement; prefixes of the same seed are nested.
pub fn random_select(pool_ids: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > pool_ids.len() {
        return Err(Error::Size(format!("cannot select {n} of {} pool ids", pool_ids.len())));
    }
    let mut ids = pool_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(n);
    Ok(ids)
}

/// What a round-based plan selects from.
pub enum SelectionSource<'a> {
    Scores { records: &'a [QualityRecord], polarity: Polarity },
    Embeddings { embeddings: &'a BTreeMap<String, Vec<f64>>, base_ids: &'a [String], pool_ids: &'a [String] },
    Random { pool_ids: &'a [String] },
}

impl SelectionSource<'_> {
    fn pool_size(&self) -> usize {
        match self {
            SelectionSource::Scores { records, .. } => records.len(),
            SelectionSource::Embeddings { pool_ids, .. } | SelectionSource::Random { pool_ids } => pool_ids.len(),
        }
    }
}

/// Callback that rescores the pool after a round (e.g. with a retrained detector).
pub type Rescorer<'a> = dyn FnMut(usize, &[String]) -> Result<Vec<QualityRecord>> + 'a;

/// `plan.rounds` nested selections of sizes `increment, 2*increment, ...`.
pub fn rounds_select(plan: &SelectionPlan, source: SelectionSource<'_>, mut rescore: Option<&mut Rescorer<'_>>) -> Result<Vec<Vec<String>>> {
    plan.validate(source.pool_size())?;
    let total = plan.rounds * plan.increment;
    let mut rounds = Vec::with_capacity(plan.rounds);
    match source {
        SelectionSource::Random { pool_ids } => {
            let order = random_select(pool_ids, total, plan.seed)?;
            for size in plan.sizes() {
                rounds.push(order[..size].to_vec());
            }
        }
        SelectionSource::Embeddings { embeddings, base_ids, pool_ids } => {
            let order = coreset_select(embeddings, base_ids, pool_ids, total)?;
            for size in plan.sizes() {
                rounds.push(order[..size].to_vec());
            }
        }
        SelectionSource::Scores { records, polarity } => {
            let mut current: Vec<QualityRecord> = records.to_vec();
            let mut selected: Vec<String> = Vec::with_capacity(total);
            for round in 0..plan.rounds {
                let taken: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
                let remaining: Vec<QualityRecord> =
                    current.iter().filter(|r| !taken.contains(r.image_id.as_str())).cloned().collect();
                let picks = top_n(&remaining, plan.increment, polarity, plan.tie_break, plan.seed)?;
                selected.extend(picks);
                rounds.push(selected.clone());
                if let Some(f) = rescore.as_mut() {
                    if round + 1 < plan.rounds {
                        current = f(round, &selected)?;
                    }
                }
            }
        }
    }
    Ok(rounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutput {
    pub plan: SelectionPlan,
    pub rounds: Vec<Vec<String>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, score: f64) -> QualityRecord {
        QualityRecord { image_id: id.into(), metric_name: "m".into(), score }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn line(points: &[(&str, f64)]) -> BTreeMap<String, Vec<f64>> {
        points.iter().map(|(k, v)| (k.to_string(), vec![*v])).collect()
    }

    #[test]
    fn top_n_examples() {
        let r = vec![rec("a", 1.0), rec("b", 2.0), rec("c", 3.0)];
        assert_eq!(top_n(&r, 2, Polarity::LowerIsBetter, TieBreak::ById, 0).unwrap(), ids(&["a", "b"]));
        assert_eq!(top_n(&r, 2, Polarity::HigherIsBetter, TieBreak::ById, 0).unwrap(), ids(&["c", "b"]));
        let eq = vec![rec("z", 1.0), rec("x", 1.0), rec("y", 1.0)];
        assert_eq!(top_n(&eq, 2, Polarity::LowerIsBetter, TieBreak::ById, 0).unwrap(), ids(&["x", "y"]));
        assert!(matches!(top_n(&r, 4, Polarity::LowerIsBetter, TieBreak::ById, 0), Err(Error::Size(_))));
        let shuffled = top_n(&eq, 3, Polarity::LowerIsBetter, TieBreak::BySeedShuffle, 5).unwrap();
        assert_eq!(shuffled, top_n(&eq, 3, Polarity::LowerIsBetter, TieBreak::BySeedShuffle, 5).unwrap());
    }

    #[test]
    fn coreset_one_dimensional_examples() {
        let e = line(&[("p0", 0.0), ("p1", 1.0), ("p2", 2.0), ("p10", 10.0)]);
        let base = ids(&["p0"]);
        let pool = ids(&["p1", "p2", "p10"]);
        assert!(coreset_select(&e, &base, &pool, 0).unwrap().is_empty());
        assert_eq!(coreset_select(&e, &base, &pool, 1).unwrap(), ids(&["p10"]));
        assert_eq!(coreset_select(&e, &base, &pool, 2).unwrap(), ids(&["p10", "p2"]));
    }

    #[test]
    fn coreset_errors() {
        let mut e = line(&[("a", 0.0), ("b", 1.0)]);
        assert!(matches!(coreset_select(&e, &[], &ids(&["a"]), 2), Err(Error::Size(_))));
        assert!(matches!(coreset_select(&e, &[], &ids(&["zz"]), 1), Err(Error::Embedding(_))));
        e.insert("c".into(), vec![1.0, 2.0]);
        assert!(matches!(coreset_select(&e, &[], &ids(&["a", "c"]), 1), Err(Error::Embedding(_))));
    }

    #[test]
    fn random_selection() {
        let pool: Vec<String> = (0..1000).map(|i| format!("s{i:04}")).collect();
        let all = random_select(&pool, 1000, 1).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, pool);
        assert_eq!(random_select(&pool, 500, 9).unwrap(), random_select(&pool, 500, 9).unwrap());
        for s in 0..5u64 {
            let a: BTreeSet<String> = random_select(&pool, 500, 2 * s).unwrap().into_iter().collect();
            let b: BTreeSet<String> = random_select(&pool, 500, 2 * s + 1).unwrap().into_iter().collect();
            assert_ne!(a, b);
        }
        assert!(random_select(&pool, 1001, 0).is_err());
    }

    fn pool_records(n: usize) -> Vec<QualityRecord> {
        (0..n).map(|i| rec(&format!("s{i:04}"), ((i * 7919) % 1013) as f64)).collect()
    }

    fn assert_nested(rounds: &[Vec<String>], sizes: &[usize]) {
        assert_eq!(rounds.iter().map(Vec::len).collect::<Vec<_>>(), sizes);
        for w in rounds.windows(2) {
            let a: BTreeSet<&String> = w[0].iter().collect();
            let b: BTreeSet<&String> = w[1].iter().collect();
            assert!(a.is_subset(&b) && a.len() < b.len());
        }
    }

    #[test]
    fn five_rounds_of_125_are_nested() {
        let records = pool_records(1250);
        let plan = SelectionPlan { metric_name: "brisque".into(), rounds: 5, increment: 125, seed: 3, tie_break: TieBreak::ById };
        let sizes = [125, 250, 375, 500, 625];
        let r = rounds_select(&plan, SelectionSource::Scores { records: &records, polarity: Polarity::LowerIsBetter }, None).unwrap();
        assert_nested(&r, &sizes);
        let pool: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
        let r = rounds_select(&plan, SelectionSource::Random { pool_ids: &pool }, None).unwrap();
        assert_nested(&r, &sizes);

        let single = SelectionPlan { rounds: 1, ..plan.clone() };
        let r = rounds_select(&single, SelectionSource::Scores { records: &records, polarity: Polarity::LowerIsBetter }, None).unwrap();
        assert_eq!(r, vec![top_n(&records, 125, Polarity::LowerIsBetter, TieBreak::ById, 3).unwrap()]);

        let too_many = SelectionPlan { rounds: 11, ..plan };
        assert!(rounds_select(&too_many, SelectionSource::Random { pool_ids: &pool }, None).is_err());
    }

    #[test]
    fn rescoring_keeps_rounds_nested() {
        let records = pool_records(100);
        let plan = SelectionPlan { metric_name: "confidence".into(), rounds: 4, increment: 10, seed: 0, tie_break: TieBreak::ById };
        let mut calls = 0;
        let mut rescorer = |round: usize, _sel: &[String]| -> Result<Vec<QualityRecord>> {
            calls += 1;
            // invert the ranking every round
            Ok(pool_records(100).into_iter().map(|r| rec(&r.image_id, -r.score * (round as f64 + 1.0))).collect())
        };
        let r = rounds_select(
            &plan,
            SelectionSource::Scores { records: &records, polarity: Polarity::LowerIsBetter },
            Some(&mut rescorer),
        )
        .unwrap();
        assert_nested(&r, &[10, 20, 30, 40]);
        assert_eq!(calls, 3);
    }

    proptest! {
        #[test]
        fn top_n_ignores_monotone_rescaling(scores in proptest::collection::vec(-1000i32..1000, 1..40), n in 0usize..40, scale in 0.5f64..4.0, shift in -5.0f64..5.0) {
            let n = n % (scores.len() + 1);
            let r: Vec<QualityRecord> = scores.iter().enumerate().map(|(i, s)| rec(&format!("i{i:02}"), f64::from(*s))).collect();
            let t: Vec<QualityRecord> = r.iter().map(|q| rec(&q.image_id, (q.score * scale + shift).powi(3))).collect();
            for pol in [Polarity::LowerIsBetter, Polarity::HigherIsBetter] {
                prop_assert_eq!(top_n(&r, n, pol, TieBreak::ById, 0).unwrap(), top_n(&t, n, pol, TieBreak::ById, 0).unwrap());
            }
        }
    }
}
