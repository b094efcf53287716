//! Decision-tree inference victim: node layout, per-label page scripts and
//! reduction of the page set to the pages that tell labels apart.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::PageId;
use crate::Error;

/// Output label paired with the pages its inference touches, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageAccessSignature {
    pub label: u8,
    pub sequence: Vec<PageId>,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    lo: u8,
    hi: u8,
    children: Option<(usize, usize)>,
}

/// A balanced binary tree over `n_labels` leaves with nodes packed
/// `nodes_per_page` to a page in breadth-first order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeLayout {
    pub n_labels: u8,
    pub nodes_per_page: usize,
    /// Node indices from the root to each label's leaf.
    pub paths: Vec<Vec<usize>>,
    pub n_nodes: usize,
}

impl TreeLayout {
    pub fn balanced(n_labels: u8, nodes_per_page: usize) -> Result<Self, Error> {
        if n_labels < 2 || nodes_per_page == 0 {
            return Err(Error::Victim("tree needs at least two labels and one node per page".into()));
        }
        // Build breadth-first so node indices are BFS order.
        let mut nodes = vec![Node { lo: 0, hi: n_labels, children: None }];
        let mut queue = VecDeque::from([0usize]);
        while let Some(idx) = queue.pop_front() {
            let Node { lo, hi, .. } = nodes[idx];
            if hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                let l = nodes.len();
                nodes.push(Node { lo, hi: mid, children: None });
                nodes.push(Node { lo: mid, hi, children: None });
                nodes[idx].children = Some((l, l + 1));
                queue.extend([l, l + 1]);
            }
        }
        let paths = (0..n_labels)
            .map(|label| {
                let mut path = vec![0];
                let mut idx = 0;
                while let Some((l, r)) = nodes[idx].children {
                    idx = if label < nodes[l].hi { l } else { r };
                    path.push(idx);
                }
                path
            })
            .collect();
        Ok(Self { n_labels, nodes_per_page, paths, n_nodes: nodes.len() })
    }

    pub fn node_page(&self, node: usize) -> PageId {
        PageId((node / self.nodes_per_page) as u16)
    }

    pub fn n_node_pages(&self) -> usize {
        self.n_nodes.div_ceil(self.nodes_per_page)
    }

    /// Page script of one inference: every internal node visit is followed by
    /// the traversal code and split/sample reads, the leaf by the code page,
    /// and the epilogue touches the roots table and sample once more.
    pub fn script(&self, label: u8, aux: AuxPages) -> Vec<PageId> {
        let path = &self.paths[label as usize];
        let mut script = Vec::new();
        for (depth, &node) in path.iter().enumerate() {
            script.push(self.node_page(node));
            script.push(aux.code);
            if depth + 1 < path.len() {
                script.extend([aux.split, aux.code, aux.sample, aux.code]);
            }
        }
        script.extend([aux.roots, aux.code, aux.sample, aux.code]);
        script
    }

    pub fn signatures(&self, aux: AuxPages) -> Vec<PageAccessSignature> {
        (0..self.n_labels)
            .map(|label| PageAccessSignature { label, sequence: self.script(label, aux) })
            .collect()
    }
}

/// Non-node pages touched during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxPages {
    pub code: PageId,
    pub roots: PageId,
    pub split: PageId,
    pub sample: PageId,
}

/// Group labels whose full page sequences coincide. Classes are ordered by
/// their smallest label.
pub fn label_classes(signatures: &[PageAccessSignature]) -> Vec<Vec<u8>> {
    let mut by_seq: BTreeMap<&[PageId], Vec<u8>> = BTreeMap::new();
    for s in signatures {
        by_seq.entry(&s.sequence).or_default().push(s.label);
    }
    let mut classes: Vec<Vec<u8>> = by_seq
        .into_values()
        .map(|mut v| {
            v.sort_unstable();
            v
        })
        .collect();
    classes.sort();
    classes
}

fn induced(seq: &[PageId], keep: &BTreeSet<PageId>) -> Vec<PageId> {
    seq.iter().copied().filter(|p| keep.contains(p)).collect()
}

fn separates(signatures: &[PageAccessSignature], keep: &BTreeSet<PageId>) -> bool {
    let induced: BTreeSet<Vec<PageId>> = signatures.iter().map(|s| induced(&s.sequence, keep)).collect();
    induced.len() == signatures.len()
}

/// Reduce a label set's pages to the anchor page plus every page whose
/// number of accesses differs between some pair of labels.
pub fn discriminating_pages(signatures: &[PageAccessSignature]) -> Result<BTreeSet<PageId>, Error> {
    if signatures.len() < 2 {
        return Err(Error::Victim("need at least two signatures".into()));
    }
    if signatures.iter().any(|s| s.sequence.is_empty()) {
        return Err(Error::Victim("empty access sequence".into()));
    }
    let labels: BTreeSet<u8> = signatures.iter().map(|s| s.label).collect();
    if labels.len() != signatures.len() {
        return Err(Error::Victim("duplicate labels".into()));
    }
    for (i, a) in signatures.iter().enumerate() {
        for b in &signatures[i + 1..] {
            if a.sequence == b.sequence {
                return Err(Error::Victim(format!(
                    "labels {} and {} are not separable: identical page sequences",
                    a.label, b.label
                )));
            }
        }
    }

    let counts: Vec<BTreeMap<PageId, usize>> = signatures
        .iter()
        .map(|s| {
            let mut m = BTreeMap::new();
            for &p in &s.sequence {
                *m.entry(p).or_default() += 1;
            }
            m
        })
        .collect();
    let all: BTreeSet<PageId> = signatures.iter().flat_map(|s| s.sequence.iter().copied()).collect();

    let mut keep = BTreeSet::new();
    let first = signatures[0].sequence[0];
    if signatures.iter().all(|s| s.sequence[0] == first) {
        keep.insert(first);
    }
    for &p in &all {
        let c0 = counts[0].get(&p).copied().unwrap_or(0);
        if counts.iter().any(|m| m.get(&p).copied().unwrap_or(0) != c0) {
            keep.insert(p);
        }
    }
    if !separates(signatures, &keep) {
        // Sequences that differ only in order need every page.
        keep = all;
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(label: u8, s: &str) -> PageAccessSignature {
        PageAccessSignature { label, sequence: s.bytes().map(|b| PageId((b - b'A') as u16)).collect() }
    }

    fn pages(s: &str) -> BTreeSet<PageId> {
        s.bytes().map(|b| PageId((b - b'A') as u16)).collect()
    }

    #[test]
    fn two_label_example() {
        assert_eq!(discriminating_pages(&[sig(1, "ACD"), sig(2, "ACE")]).unwrap(), pages("ADE"));
    }

    #[test]
    fn identical_sequences_rejected() {
        assert!(discriminating_pages(&[sig(1, "AB"), sig(2, "AB")]).is_err());
    }

    #[test]
    fn three_label_example_separates() {
        let sigs = [sig(1, "ABD"), sig(2, "ABE"), sig(3, "ACD")];
        let keep = discriminating_pages(&sigs).unwrap();
        assert_eq!(keep, pages("ABCDE"));
        // Brute force: induced subsequences pairwise distinct.
        for (i, a) in sigs.iter().enumerate() {
            for b in &sigs[i + 1..] {
                assert_ne!(induced(&a.sequence, &keep), induced(&b.sequence, &keep));
            }
        }
    }

    #[test]
    fn order_only_difference_keeps_all_pages() {
        let keep = discriminating_pages(&[sig(1, "AB"), sig(2, "BA")]).unwrap();
        assert_eq!(keep, pages("AB"));
    }

    #[test]
    fn balanced_tree_shape() {
        let t = TreeLayout::balanced(10, 3).unwrap();
        assert_eq!(t.n_nodes, 19);
        assert_eq!(t.n_node_pages(), 7);
        for path in &t.paths {
            assert_eq!(path[0], 0);
            assert!((4..=5).contains(&path.len()));
        }
        let leaves: BTreeSet<usize> = t.paths.iter().map(|p| *p.last().unwrap()).collect();
        assert_eq!(leaves.len(), 10);
    }

    #[test]
    fn tree_label_classes() {
        let t = TreeLayout::balanced(10, 3).unwrap();
        let aux = AuxPages { code: PageId(7), roots: PageId(8), split: PageId(9), sample: PageId(10) };
        let classes = label_classes(&t.signatures(aux));
        assert_eq!(
            classes,
            vec![vec![0, 1], vec![2, 5], vec![3, 4], vec![6], vec![7], vec![8], vec![9]]
        );
    }
}
