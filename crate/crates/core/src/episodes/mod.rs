//! N-way K-shot episodes and the evaluation protocol built on them.

mod eval;
mod sweep;

pub use eval::{
    evaluate_split, run_eval, run_overlap_controlled_eval, EvalConfig, EvalReport, OverlapReport,
    SplitResult, WaySpec, EVAL_REPORT_SCHEMA_VERSION,
};
pub use sweep::{plot_sweep, sweep, write_sweep_csv, SweepAxis, SweepPoint};

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{IntentName, Utterance};
use crate::error::{PieError, Result};
use crate::proto::SupportSet;

/// Utterances grouped by gold intent, in raw-name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntentPool {
    groups: Vec<(IntentName, Vec<Utterance>)>,
}

impl IntentPool {
    /// Groups every labelled utterance by intent. When `only` is given, the
    /// pool holds exactly those intents (possibly with no utterances).
    pub fn from_utterances(utterances: &[Utterance], only: Option<&[IntentName]>) -> Result<Self> {
        let mut map: BTreeMap<String, (IntentName, Vec<Utterance>)> = BTreeMap::new();
        if let Some(names) = only {
            for n in names {
                map.insert(n.raw.clone(), (n.clone(), Vec::new()));
            }
        }
        for u in utterances {
            let Some(raw) = u.gold_intent.as_deref() else {
                continue;
            };
            match map.get_mut(raw) {
                Some((_, list)) => list.push(u.clone()),
                None if only.is_none() => {
                    map.insert(raw.to_string(), (IntentName::parse(raw)?, vec![u.clone()]));
                }
                None => {}
            }
        }
        Ok(Self {
            groups: map.into_values().collect(),
        })
    }

    pub fn from_groups(groups: Vec<(IntentName, Vec<Utterance>)>) -> Self {
        Self { groups }
    }

    pub fn intent_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[(IntentName, Vec<Utterance>)] {
        &self.groups
    }

    /// Intents with fewer than `needed` utterances, with their counts.
    pub fn short_intents(&self, needed: usize) -> Vec<(&str, usize)> {
        self.groups
            .iter()
            .filter(|(_, u)| u.len() < needed)
            .map(|(n, u)| (n.raw.as_str(), u.len()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<IntentName>,
    pub supports: Vec<SupportSet>,
    /// Query utterance and the index of its class in `classes`.
    pub queries: Vec<(Utterance, usize)>,
    pub k: usize,
}

impl Episode {
    pub fn n(&self) -> usize {
        self.classes.len()
    }
}

/// Draws `n` intents without replacement, then `k + q` utterances per
/// intent without replacement: the first `k` support, the rest query.
pub fn sample_episode<R: Rng + ?Sized>(pool: &IntentPool, n: usize, k: usize, q: usize, rng: &mut R) -> Result<Episode> {
    if n < 2 {
        return Err(PieError::invalid("an episode needs at least two classes"));
    }
    if k + q == 0 {
        return Err(PieError::invalid("k + q must be at least one"));
    }
    if pool.intent_count() < n {
        return Err(PieError::Insufficient(format!(
            "{n}-way episode requested but the pool has {} intents",
            pool.intent_count()
        )));
    }
    let picked = sample(rng, pool.intent_count(), n);
    let mut classes = Vec::with_capacity(n);
    let mut supports = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n * q);
    for (c, gi) in picked.iter().enumerate() {
        let (name, utts) = &pool.groups[gi];
        if utts.len() < k + q {
            return Err(PieError::Insufficient(format!(
                "intent {:?} has {} utterances, {} short of the {} needed",
                name.raw,
                utts.len(),
                k + q - utts.len(),
                k + q
            )));
        }
        let drawn = sample(rng, utts.len(), k + q);
        let drawn: Vec<usize> = drawn.into_iter().collect();
        classes.push(name.clone());
        supports.push(SupportSet {
            intent: name.clone(),
            examples: drawn[..k].iter().map(|&i| utts[i].clone()).collect(),
        });
        queries.extend(drawn[k..].iter().map(|&i| (utts[i].clone(), c)));
    }
    Ok(Episode {
        classes,
        supports,
        queries,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn pool(intents: usize, per: usize) -> IntentPool {
        let utts: Vec<Utterance> = (0..intents)
            .flat_map(|i| (0..per).map(move |j| Utterance::labelled(format!("utt {i} {j}"), format!("intent_{i}")).unwrap()))
            .collect();
        IntentPool::from_utterances(&utts, None).unwrap()
    }

    #[test]
    fn counts() {
        let p = pool(7, 10);
        let ep = sample_episode(&p, 5, 1, 5, &mut rng_from_seed(0)).unwrap();
        assert_eq!(ep.supports.len(), 5);
        assert!(ep.supports.iter().all(|s| s.examples.len() == 1));
        assert_eq!(ep.queries.len(), 25);
        let zero = sample_episode(&p, 5, 0, 3, &mut rng_from_seed(0)).unwrap();
        assert!(zero.supports.iter().all(|s| s.examples.is_empty()));
        assert_eq!(zero.queries.len(), 15);
    }

    #[test]
    fn deficits_are_named() {
        let p = pool(3, 4);
        let err = sample_episode(&p, 5, 1, 1, &mut rng_from_seed(0)).unwrap_err().to_string();
        assert!(err.contains("3 intents"), "{err}");
        let err = sample_episode(&p, 3, 2, 5, &mut rng_from_seed(0)).unwrap_err().to_string();
        assert!(err.contains("3 short"), "{err}");
    }

    #[test]
    fn restricted_pool_keeps_empty_intents() {
        let utts = vec![Utterance::labelled("a", "x").unwrap(), Utterance::labelled("b", "y").unwrap()];
        let only = [IntentName::parse("x").unwrap(), IntentName::parse("z").unwrap()];
        let p = IntentPool::from_utterances(&utts, Some(&only)).unwrap();
        assert_eq!(p.intent_count(), 2);
        assert_eq!(p.short_intents(1), vec![("z", 0)]);
    }

    proptest! {
        #[test]
        fn episodes_are_well_formed(intents in 2usize..9, per in 1usize..8, seed in any::<u64>(), nk in (2usize..9, 0usize..4, 1usize..4)) {
            let (n, k, q) = nk;
            prop_assume!(n <= intents && k + q <= per);
            let p = pool(intents, per);
            let ep = sample_episode(&p, n, k, q, &mut rng_from_seed(seed)).unwrap();
            let classes: HashSet<_> = ep.classes.iter().collect();
            prop_assert_eq!(classes.len(), n);
            let support: HashSet<_> = ep.supports.iter().flat_map(|s| s.examples.iter().map(|u| &u.text)).collect();
            prop_assert_eq!(support.len(), n * k);
            prop_assert_eq!(ep.queries.len(), n * q);
            for (u, c) in &ep.queries {
                prop_assert!(!support.contains(&u.text));
                prop_assert_eq!(u.gold_intent.as_deref(), Some(ep.classes[*c].raw.as_str()));
            }
            prop_assert_eq!(&ep, &sample_episode(&p, n, k, q, &mut rng_from_seed(seed)).unwrap());
        }
    }
}
