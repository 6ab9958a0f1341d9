use crate::tensor::Real;

/// Word-level edit counts of one hypothesis against one reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl WerStats {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `edits / ref_words`. An empty reference gives 0 for an empty
    /// hypothesis and infinity otherwise.
    pub fn wer(&self) -> Real {
        match (self.edits(), self.ref_words) {
            (0, 0) => 0.0,
            (_, 0) => Real::INFINITY,
            (e, n) => e as Real / n as Real,
        }
    }

    pub fn merge(&mut self, other: &WerStats) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_words += other.ref_words;
    }
}

/// Levenshtein alignment with unit costs. Among minimum-edit alignments the
/// one with the most substitutions is reported, which makes the counts
/// symmetric: swapping arguments swaps insertions and deletions.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> WerStats {
    // cell = (edits, -substitutions, insertions, deletions)
    type Cell = (usize, isize, usize, usize);
    let (n, m) = (reference.len(), hyp.len());
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, 0, j, 0)).collect();
    for i in 1..=n {
        let mut cur: Vec<Cell> = vec![(i, 0, 0, i)];
        for j in 1..=m {
            let (e, s, ins, del) = prev[j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                (e, s, ins, del)
            } else {
                (e + 1, s - 1, ins, del)
            };
            let (e, s, ins, del) = prev[j];
            let up = (e + 1, s, ins, del + 1);
            let (e, s, ins, del) = cur[j - 1];
            let left = (e + 1, s, ins + 1, del);
            let best = [diag, up, left]
                .into_iter()
                .min_by_key(|c| (c.0, c.1))
                .unwrap();
            cur.push(best);
        }
        prev = cur;
    }
    let (_, s, ins, del) = prev[m];
    WerStats {
        substitutions: (-s) as usize,
        insertions: ins,
        deletions: del,
        ref_words: n,
    }
}

/// Word error statistics of whitespace-separated `hyp` against `reference`.
pub fn wer(hyp: &str, reference: &str) -> WerStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    align(&h, &r)
}
