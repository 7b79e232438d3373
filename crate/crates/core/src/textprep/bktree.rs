//! BK-tree over vocabulary tokens under Levenshtein distance.

use std::cmp::Ordering;
use std::collections::BTreeMap;

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone)]
struct Node {
    token: String,
    freq: usize,
    children: BTreeMap<usize, usize>,
}

/// A candidate beats another at equal distance when it is more frequent,
/// then when it sorts first.
fn better(a: (usize, usize, &str), b: (usize, usize, &str)) -> bool {
    match a.0.cmp(&b.0) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match a.1.cmp(&b.1) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => a.2 < b.2,
        },
    }
}

#[derive(Debug, Clone)]
pub struct EditDistanceIndex {
    nodes: Vec<Node>,
    /// `None` searches without a bound.
    pub max_radius: Option<usize>,
}

impl EditDistanceIndex {
    pub fn new(
        tokens: impl IntoIterator<Item = (String, usize)>,
        max_radius: Option<usize>,
    ) -> Self {
        let mut idx = EditDistanceIndex {
            nodes: Vec::new(),
            max_radius,
        };
        for (t, f) in tokens {
            idx.insert(t, f);
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn insert(&mut self, token: String, freq: usize) {
        let new = self.nodes.len();
        if new == 0 {
            self.nodes.push(Node {
                token,
                freq,
                children: BTreeMap::new(),
            });
            return;
        }
        let mut cur = 0;
        loop {
            let d = levenshtein(&self.nodes[cur].token, &token);
            if d == 0 {
                return;
            }
            match self.nodes[cur].children.get(&d) {
                Some(&next) => cur = next,
                None => {
                    self.nodes[cur].children.insert(d, new);
                    self.nodes.push(Node {
                        token,
                        freq,
                        children: BTreeMap::new(),
                    });
                    return;
                }
            }
        }
    }

    /// Closest token within the radius as `(token, distance)`.
    pub fn nearest(&self, query: &str) -> Option<(&str, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut bound = self.max_radius.unwrap_or(usize::MAX);
        let mut best: Option<(usize, usize, &str)> = None;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            let d = levenshtein(&node.token, query);
            if d <= bound {
                let cand = (d, node.freq, node.token.as_str());
                if best.is_none_or(|b| better(cand, b)) {
                    best = Some(cand);
                    bound = d;
                }
            }
            let lo = d.saturating_sub(bound);
            let hi = d.saturating_add(bound);
            stack.extend(node.children.range(lo..=hi).map(|(_, &child)| child));
        }
        best.map(|(d, _, t)| (t, d))
    }
}

/// Exhaustive scan with the same tie-break; the reference for the index.
pub fn brute_force_nearest<'a>(
    tokens: impl IntoIterator<Item = (&'a str, usize)>,
    query: &str,
    max_radius: Option<usize>,
) -> Option<(&'a str, usize)> {
    let bound = max_radius.unwrap_or(usize::MAX);
    let mut best: Option<(usize, usize, &str)> = None;
    for (t, f) in tokens {
        let d = levenshtein(t, query);
        if d <= bound && best.is_none_or(|b| better((d, f, t), b)) {
            best = Some((d, f, t));
        }
    }
    best.map(|(d, _, t)| (t, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distances() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("celulitis", "cellulitis"), 1);
        assert_eq!(levenshtein("same", "same"), 0);
    }

    #[test]
    fn frequency_breaks_ties() {
        let idx =
            EditDistanceIndex::new([("cab".to_string(), 10), ("car".to_string(), 3)], Some(3));
        assert_eq!(idx.nearest("cat"), Some(("cab", 1)));
        let idx = EditDistanceIndex::new([("car".to_string(), 3), ("cab".to_string(), 3)], Some(3));
        assert_eq!(idx.nearest("cat"), Some(("cab", 1)));
    }

    #[test]
    fn radius_cuts_off() {
        let idx = EditDistanceIndex::new([("abcdef".to_string(), 1)], Some(2));
        assert_eq!(idx.nearest("xyzdef"), None);
        let idx = EditDistanceIndex::new([("abcdef".to_string(), 1)], None);
        assert_eq!(idx.nearest("xyzdef"), Some(("abcdef", 3)));
    }

    proptest! {
        #[test]
        fn index_matches_brute_force(
            vocab in proptest::collection::btree_map("[a-e]{1,6}", 1usize..5, 1..60),
            queries in proptest::collection::vec("[a-f]{0,7}", 1..20),
            radius in proptest::option::of(0usize..4),
        ) {
            let idx = EditDistanceIndex::new(vocab.iter().map(|(t, f)| (t.clone(), *f)), radius);
            for q in &queries {
                let want = brute_force_nearest(vocab.iter().map(|(t, f)| (t.as_str(), *f)), q, radius);
                prop_assert_eq!(idx.nearest(q), want);
            }
        }

        #[test]
        fn levenshtein_is_symmetric(a in "[a-c]{0,6}", b in "[a-c]{0,6}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }
    }
}
