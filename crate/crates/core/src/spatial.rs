//! ACs-constrained head and neuron selection: an importance-per-AC greedy
//! start followed by local search over unit swaps and head/neuron
//! rebalancing.
//!
//! At uniform timesteps every head costs the same and so does every
//! intermediate neuron, so the problem is a two-item-class knapsack with a
//! survival floor of one head and one neuron per layer.

use std::cmp::Ordering;

use crate::cost::{head_cost, neuron_cost};
use crate::engine::TimestepPlan;
use crate::error::{invalid, shape, Error, Result};
use crate::importance::ImportanceScores;
use crate::model::{MaskSet, ModelConfig};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Head,
    Neuron,
}

/// Σ of the scores of every pruned unit.
pub fn pruned_importance(masks: &MaskSet, scores: &ImportanceScores) -> f64 {
    let mut total = 0.0;
    for (m, s) in masks.heads.iter().zip(&scores.heads).chain(masks.neurons.iter().zip(&scores.neurons)) {
        for (&kept, &v) in m.iter().zip(s) {
            if !kept {
                total += v;
            }
        }
    }
    total
}

struct Problem<'a> {
    scores: &'a ImportanceScores,
    head_cost: Vec<u64>,
    neuron_cost: Vec<u64>,
    baseline: u64,
    budget: f64,
}

impl<'a> Problem<'a> {
    fn new(scores: &'a ImportanceScores, config: &ModelConfig, budget: f64) -> Result<Self> {
        if !(budget > 0.0 && budget <= 1.0) {
            return Err(invalid(format!("ACs budget must lie in (0, 1], got {budget}")));
        }
        let l = config.num_layers;
        if scores.heads.len() != l
            || scores.neurons.len() != l
            || scores.heads.iter().any(|h| h.len() != config.num_heads)
            || scores.neurons.iter().any(|n| n.len() != config.intermediate_size)
        {
            return Err(shape("importance scores do not match the configuration"));
        }
        if let Some(v) = scores.heads.iter().chain(&scores.neurons).flatten().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("importance score {v} is not a finite non-negative number")));
        }
        // at uniform timesteps t factors out of the ratio, so t = 1 will do
        let plan = TimestepPlan::uniform(l, 1);
        let head_cost: Vec<u64> = (0..l).map(|i| head_cost(config, &plan, i)).collect();
        let neuron_cost: Vec<u64> = (0..l).map(|i| neuron_cost(config, &plan, i)).collect();
        let baseline = (0..l)
            .map(|i| head_cost[i] * config.num_heads as u64 + neuron_cost[i] * config.intermediate_size as u64)
            .sum();
        Ok(Self {
            scores,
            head_cost,
            neuron_cost,
            baseline,
            budget,
        })
    }

    fn cost(&self, m: &MaskSet) -> u64 {
        (0..m.num_layers())
            .map(|l| {
                self.head_cost[l] * m.active_heads(l) as u64 + self.neuron_cost[l] * m.active_neurons(l) as u64
            })
            .sum()
    }

    fn fits(&self, cost: u64) -> bool {
        cost as f64 / self.baseline as f64 <= self.budget
    }

    fn unit_cost(&self, kind: Kind, layer: usize) -> u64 {
        match kind {
            Kind::Head => self.head_cost[layer],
            Kind::Neuron => self.neuron_cost[layer],
        }
    }

    fn score(&self, kind: Kind, layer: usize, i: usize) -> f64 {
        match kind {
            Kind::Head => self.scores.heads[layer][i],
            Kind::Neuron => self.scores.neurons[layer][i],
        }
    }
}

fn bits(m: &MaskSet, kind: Kind) -> &Vec<Vec<bool>> {
    match kind {
        Kind::Head => &m.heads,
        Kind::Neuron => &m.neurons,
    }
}

fn bits_mut(m: &mut MaskSet, kind: Kind) -> &mut Vec<Vec<bool>> {
    match kind {
        Kind::Head => &mut m.heads,
        Kind::Neuron => &mut m.neurons,
    }
}

fn count(m: &MaskSet, kind: Kind, layer: usize) -> usize {
    bits(m, kind)[layer].iter().filter(|&&b| b).count()
}

/// Units of one kind in a given state, ordered by score (ascending when
/// `ascending`), ties broken by lower layer then lower index.
fn ordered(p: &Problem, m: &MaskSet, kind: Kind, kept: bool, ascending: bool) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = bits(m, kind)
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().filter(move |(_, &b)| b == kept).map(move |(i, _)| (l, i)))
        .collect();
    v.sort_by(|a, b| {
        let (sa, sb) = (p.score(kind, a.0, a.1), p.score(kind, b.0, b.1));
        let o = if ascending { sa.total_cmp(&sb) } else { sb.total_cmp(&sa) };
        o.then(a.cmp(b))
    });
    v
}

/// Greedy selection: prune units in ascending order of importance per AC
/// (ties: lower layer, heads before neurons, lower index) until the ACs ratio
/// is within `budget`, never removing the last head or neuron of a layer.
pub fn select_masks(scores: &ImportanceScores, config: &ModelConfig, budget: f64) -> Result<MaskSet> {
    let p = Problem::new(scores, config, budget)?;
    let mut masks = MaskSet::ones(config);
    let floor: u64 = (0..config.num_layers).map(|l| p.head_cost[l] + p.neuron_cost[l]).sum();
    if !p.fits(floor) {
        return Err(Error::Infeasible(format!(
            "keeping one head and one neuron per layer already costs {:.4} of the baseline, above the budget {budget}",
            floor as f64 / p.baseline as f64
        )));
    }
    let mut units: Vec<(f64, usize, u8, usize)> = Vec::new();
    for l in 0..config.num_layers {
        for i in 0..config.num_heads {
            units.push((scores.heads[l][i] / p.head_cost[l] as f64, l, 0, i));
        }
        for j in 0..config.intermediate_size {
            units.push((scores.neurons[l][j] / p.neuron_cost[l] as f64, l, 1, j));
        }
    }
    units.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let mut cost = p.cost(&masks);
    for (_, l, k, i) in units {
        if p.fits(cost) {
            break;
        }
        let kind = if k == 0 { Kind::Head } else { Kind::Neuron };
        if count(&masks, kind, l) > 1 {
            bits_mut(&mut masks, kind)[l][i] = false;
            cost -= p.unit_cost(kind, l);
        }
    }
    debug_assert!(p.fits(cost));
    Ok(masks)
}

struct Move {
    gain: f64,
    prune: Vec<(Kind, usize, usize)>,
    unprune: Vec<(Kind, usize, usize)>,
}

fn better(best: &Option<Move>, gain: f64) -> bool {
    gain > 0.0 && best.as_ref().is_none_or(|b| gain.partial_cmp(&b.gain) == Some(Ordering::Greater))
}

/// Best exchange of one pruned and one kept unit of the same kind, in any
/// layers.
fn best_swap(p: &Problem, m: &MaskSet, cost: u64) -> Option<Move> {
    let mut best = None;
    for kind in [Kind::Head, Kind::Neuron] {
        let pruned = ordered(p, m, kind, false, false);
        let kept = ordered(p, m, kind, true, true);
        for &(pl, pi) in &pruned {
            for &(kl, ki) in &kept {
                let gain = p.score(kind, pl, pi) - p.score(kind, kl, ki);
                if gain <= 0.0 {
                    break;
                }
                if kl != pl && count(m, kind, kl) <= 1 {
                    continue;
                }
                let c = cost + p.unit_cost(kind, pl) - p.unit_cost(kind, kl);
                if p.fits(c) && better(&best, gain) {
                    best = Some(Move {
                        gain,
                        prune: vec![(kind, kl, ki)],
                        unprune: vec![(kind, pl, pi)],
                    });
                }
            }
        }
    }
    best
}

/// Best single unit that can come back within the budget.
fn best_unprune(p: &Problem, m: &MaskSet, cost: u64) -> Option<Move> {
    let mut best = None;
    for kind in [Kind::Head, Kind::Neuron] {
        for (l, i) in ordered(p, m, kind, false, false) {
            let gain = p.score(kind, l, i);
            if p.fits(cost + p.unit_cost(kind, l)) && better(&best, gain) {
                best = Some(Move {
                    gain,
                    prune: vec![],
                    unprune: vec![(kind, l, i)],
                });
            }
        }
    }
    best
}

/// Moves `k` units of `kind` across the mask boundary and lets the other kind
/// absorb the budget change: when `kind` units are pruned the freed ACs
/// bring back the best pruned units of the other kind, and when they are
/// restored the cheapest kept units of the other kind make room.
fn rebalance(p: &Problem, m: &MaskSet, cost: u64, kind: Kind, k: usize, restore: bool) -> Option<Move> {
    let other = match kind {
        Kind::Head => Kind::Neuron,
        Kind::Neuron => Kind::Head,
    };
    let mut state = m.clone();
    let mut c = cost;
    let mut gain = 0.0;
    let mut mv = Move {
        gain: 0.0,
        prune: vec![],
        unprune: vec![],
    };
    if restore {
        let cands = ordered(p, &state, kind, false, false);
        if cands.len() < k {
            return None;
        }
        for &(l, i) in &cands[..k] {
            bits_mut(&mut state, kind)[l][i] = true;
            c += p.unit_cost(kind, l);
            gain += p.score(kind, l, i);
            mv.unprune.push((kind, l, i));
        }
        for (l, i) in ordered(p, &state, other, true, true) {
            if p.fits(c) {
                break;
            }
            if count(&state, other, l) > 1 {
                bits_mut(&mut state, other)[l][i] = false;
                c -= p.unit_cost(other, l);
                gain -= p.score(other, l, i);
                mv.prune.push((other, l, i));
            }
        }
        if !p.fits(c) {
            return None;
        }
    } else {
        let mut removed = 0;
        for (l, i) in ordered(p, &state, kind, true, true) {
            if removed == k {
                break;
            }
            if count(&state, kind, l) > 1 {
                bits_mut(&mut state, kind)[l][i] = false;
                c -= p.unit_cost(kind, l);
                gain -= p.score(kind, l, i);
                mv.prune.push((kind, l, i));
                removed += 1;
            }
        }
        if removed < k {
            return None;
        }
        for (l, i) in ordered(p, &state, other, false, false) {
            let uc = p.unit_cost(other, l);
            if p.fits(c + uc) {
                bits_mut(&mut state, other)[l][i] = true;
                c += uc;
                gain += p.score(other, l, i);
                mv.unprune.push((other, l, i));
            }
        }
    }
    mv.gain = gain;
    (gain > 0.0).then_some(mv)
}

fn best_rebalance(p: &Problem, m: &MaskSet, cost: u64) -> Option<Move> {
    let mut best: Option<Move> = None;
    for kind in [Kind::Head, Kind::Neuron] {
        let total: usize = bits(m, kind).iter().map(Vec::len).sum();
        for k in 1..=total {
            for restore in [false, true] {
                if let Some(mv) = rebalance(p, m, cost, kind, k, restore) {
                    if better(&best, mv.gain) {
                        best = Some(mv);
                    }
                }
            }
        }
    }
    best
}

fn apply(m: &mut MaskSet, mv: &Move) {
    for &(kind, l, i) in &mv.prune {
        bits_mut(m, kind)[l][i] = false;
    }
    for &(kind, l, i) in &mv.unprune {
        bits_mut(m, kind)[l][i] = true;
    }
}

/// Hill climbing on the pruned-importance objective. Each sweep applies
/// improving same-kind swaps until none is left, then single restorations,
/// then the best head/neuron rebalance. A move is taken only if it strictly
/// lowers the objective and keeps the ACs ratio within `budget` and at least
/// one head and one neuron in every layer.
pub fn refine_masks(
    masks: &MaskSet,
    scores: &ImportanceScores,
    config: &ModelConfig,
    budget: f64,
    max_iters: usize,
) -> Result<MaskSet> {
    let p = Problem::new(scores, config, budget)?;
    if masks.heads.len() != config.num_layers
        || masks.heads.iter().any(|h| h.len() != config.num_heads)
        || masks.neurons.iter().any(|n| n.len() != config.intermediate_size)
    {
        return Err(shape("masks do not match the configuration"));
    }
    let mut m = masks.hardened();
    let mut cost = p.cost(&m);
    if !p.fits(cost) {
        return Err(invalid("refinement needs masks that already meet the budget"));
    }
    let mut objective = pruned_importance(&m, scores);
    let mut try_apply = |m: &mut MaskSet, mv: Move, cost: &mut u64| -> bool {
        let mut next = m.clone();
        apply(&mut next, &mv);
        let obj = pruned_importance(&next, scores);
        let c = p.cost(&next);
        if obj < objective && p.fits(c) {
            *m = next;
            *cost = c;
            objective = obj;
            true
        } else {
            false
        }
    };
    for _ in 0..max_iters {
        let mut moved = false;
        while let Some(mv) = best_swap(&p, &m, cost) {
            if !try_apply(&mut m, mv, &mut cost) {
                break;
            }
            moved = true;
        }
        while let Some(mv) = best_unprune(&p, &m, cost) {
            if !try_apply(&mut m, mv, &mut cost) {
                break;
            }
            moved = true;
        }
        if let Some(mv) = best_rebalance(&p, &m, cost) {
            moved |= try_apply(&mut m, mv, &mut cost);
        }
        if !moved {
            break;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, heads: usize, neurons: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden_size: 2 * heads,
            num_heads: heads,
            intermediate_size: neurons,
            seq_len: 2,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn full_budget_keeps_everything() {
        let c = cfg(2, 2, 4);
        let s = ImportanceScores::from_scores(vec![vec![1.0, 2.0]; 2], vec![vec![0.5; 4]; 2]);
        assert_eq!(select_masks(&s, &c, 1.0).unwrap(), MaskSet::ones(&c));
    }

    #[test]
    fn dominated_head_goes_first() {
        let c = cfg(1, 2, 1);
        let s = ImportanceScores::from_scores(vec![vec![10.0, 0.1]], vec![vec![100.0]]);
        let m = select_masks(&s, &c, 0.7).unwrap();
        assert_eq!(m.heads[0], vec![true, false]);
        assert_eq!(m.neurons[0], vec![true]);
    }

    #[test]
    fn infeasible_budget_reported() {
        let c = cfg(1, 2, 2);
        let s = ImportanceScores::from_scores(vec![vec![1.0; 2]], vec![vec![1.0; 2]]);
        assert!(matches!(select_masks(&s, &c, 0.01), Err(Error::Infeasible(_))));
        assert!(select_masks(&s, &c, 0.0).is_err());
    }

    #[test]
    fn zero_iterations_returns_input() {
        let c = cfg(1, 2, 4);
        let s = ImportanceScores::from_scores(vec![vec![5.0, 1.0]], vec![vec![1.0, 2.0, 3.0, 4.0]]);
        let mut m = MaskSet::ones(&c);
        m.heads[0][0] = false;
        let out = refine_masks(&m, &s, &c, 0.9, 0).unwrap();
        assert_eq!(out, m);
    }
}
