//! Levenshtein distance over id sequences and a BK-tree for nearest-neighbour
//! queries under it.

use std::collections::BTreeMap;

/// Unit-cost Levenshtein distance, two-row DP.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Distance if it is at most `limit`, else `None`. Only the diagonal band
/// of width `2·limit + 1` is filled, and the scan stops as soon as a whole
/// row exceeds the limit.
pub fn bounded_edit_distance<T: PartialEq>(a: &[T], b: &[T], limit: usize) -> Option<usize> {
    if a.len().abs_diff(b.len()) > limit {
        return None;
    }
    if a.is_empty() || b.is_empty() {
        return Some(a.len().max(b.len()));
    }
    let big = limit + 1;
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).map(|j| j.min(big)).collect();
    let mut cur = vec![big; n + 1];
    for (i, x) in a.iter().enumerate() {
        let row = i + 1;
        let lo = row.saturating_sub(limit).max(1);
        let hi = (row + limit).min(n);
        cur.iter_mut().for_each(|c| *c = big);
        cur[0] = row.min(big);
        let mut row_min = cur[0];
        for j in lo..=hi {
            let sub = prev[j - 1] + usize::from(*x != b[j - 1]);
            let v = sub.min(prev[j] + 1).min(cur[j - 1] + 1).min(big);
            cur[j] = v;
            row_min = row_min.min(v);
        }
        if row_min > limit {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[n];
    (d <= limit).then_some(d)
}

/// Burkhard-Keller tree keyed by id sequences, with a label per entry.
#[derive(Clone, Debug, Default)]
pub struct BkTree {
    nodes: Vec<BkNode>,
}

#[derive(Clone, Debug)]
struct BkNode {
    key: Vec<usize>,
    labels: Vec<String>,
    children: BTreeMap<usize, usize>,
}

impl BkTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Entries with identical keys share a node.
    pub fn insert(&mut self, key: Vec<usize>, label: String) {
        if self.nodes.is_empty() {
            self.nodes.push(BkNode { key, labels: vec![label], children: BTreeMap::new() });
            return;
        }
        let mut at = 0;
        loop {
            let d = edit_distance(&self.nodes[at].key, &key);
            if d == 0 {
                self.nodes[at].labels.push(label);
                return;
            }
            match self.nodes[at].children.get(&d) {
                Some(&next) => at = next,
                None => {
                    let idx = self.nodes.len();
                    self.nodes.push(BkNode { key, labels: vec![label], children: BTreeMap::new() });
                    self.nodes[at].children.insert(d, idx);
                    return;
                }
            }
        }
    }

    /// All labels within `radius` of `query`, with their distances.
    pub fn within(&self, query: &[usize], radius: usize) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0];
        while let Some(at) = stack.pop() {
            let node = &self.nodes[at];
            let d = edit_distance(&node.key, query);
            if d <= radius {
                out.extend(node.labels.iter().map(|l| (l.clone(), d)));
            }
            for (&edge, &child) in node.children.range(d.saturating_sub(radius)..=d + radius) {
                debug_assert!(edge.abs_diff(d) <= radius);
                stack.push(child);
            }
        }
        out
    }

    /// The `k` nearest labels accepted by `keep`, sorted by distance then
    /// label. The search radius shrinks to the current `k`-th best distance.
    pub fn nearest(&self, query: &[usize], k: usize, keep: impl Fn(&str) -> bool) -> Vec<(String, usize)> {
        let mut best: Vec<(usize, String)> = Vec::new();
        if self.nodes.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut radius = usize::MAX;
        let mut stack = vec![0];
        while let Some(at) = stack.pop() {
            let node = &self.nodes[at];
            let d = edit_distance(&node.key, query);
            if d <= radius {
                for l in node.labels.iter().filter(|l| keep(l)) {
                    best.push((d, l.clone()));
                }
                best.sort();
                best.truncate(k);
                if best.len() == k {
                    radius = best[k - 1].0;
                }
            }
            let lo = d.saturating_sub(radius);
            let hi = d.saturating_add(radius);
            for (_, &child) in node.children.range(lo..=hi) {
                stack.push(child);
            }
        }
        best.into_iter().map(|(d, l)| (l, d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full-matrix reference DP.
    fn naive(a: &[usize], b: &[usize]) -> usize {
        let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in m.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            m[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                m[i][j] = (m[i - 1][j] + 1).min(m[i][j - 1] + 1).min(m[i - 1][j - 1] + cost);
            }
        }
        m[a.len()][b.len()]
    }

    fn random_seq(rng: &mut ChaCha8Rng, max_len: usize, alphabet: usize) -> Vec<usize> {
        let n = rng.random_range(0..=max_len);
        (0..n).map(|_| rng.random_range(0..alphabet)).collect()
    }

    #[test]
    fn trivial_cases() {
        let x = vec![1, 2, 3];
        assert_eq!(edit_distance(&x, &x), 0);
        assert_eq!(edit_distance(&[], &[4usize, 5, 6, 7]), 4);
        assert_eq!(edit_distance(&[1usize, 2, 3], &[1, 3]), 1);
    }

    #[test]
    fn matches_naive_dp_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let a = random_seq(&mut rng, 14, 6);
            let b = random_seq(&mut rng, 14, 6);
            let d = naive(&a, &b);
            assert_eq!(edit_distance(&a, &b), d);
            for limit in 0..6 {
                assert_eq!(bounded_edit_distance(&a, &b, limit), (d <= limit).then_some(d), "{a:?} {b:?} {limit}");
            }
        }
    }

    #[test]
    fn bk_tree_queries_match_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let entries: Vec<Vec<usize>> = (0..300).map(|_| random_seq(&mut rng, 8, 5)).collect();
        let mut tree = BkTree::new();
        for (i, e) in entries.iter().enumerate() {
            tree.insert(e.clone(), format!("e{i:03}"));
        }
        for _ in 0..20 {
            let q = random_seq(&mut rng, 8, 5);
            let mut scan: Vec<(usize, String)> =
                entries.iter().enumerate().map(|(i, e)| (edit_distance(e, &q), format!("e{i:03}"))).collect();
            scan.sort();
            let expected: Vec<(String, usize)> = scan.iter().take(7).map(|(d, l)| (l.clone(), *d)).collect();
            assert_eq!(tree.nearest(&q, 7, |_| true), expected);

            let mut within = tree.within(&q, 2);
            within.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
            let expected: Vec<(String, usize)> =
                scan.iter().filter(|(d, _)| *d <= 2).map(|(d, l)| (l.clone(), *d)).collect();
            assert_eq!(within, expected);
        }
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in proptest::collection::vec(0usize..5, 0..10),
            b in proptest::collection::vec(0usize..5, 0..10),
            c in proptest::collection::vec(0usize..5, 0..10),
        ) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        }
    }
}
