use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{normalize_text, NUM_SPECIALS, SPECIAL_NAMES, UNK};
use crate::error::{Error, Result};

/// Prefixed to every word before merging; decodes back to a space.
pub const WORD_BOUNDARY: &str = "\u{2581}";

/// Classic byte-pair encoding over graphemes.
///
/// The vocabulary is the four specials, then the base alphabet in code-point
/// order, then each merged symbol in creation order.
#[derive(Debug)]
pub struct BpeModel {
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    unk_count: AtomicUsize,
}

impl BpeModel {
    fn from_parts(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut vocab: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for sym in alphabet
            .iter()
            .cloned()
            .chain(merges.iter().map(|(l, r)| format!("{l}{r}")))
        {
            if !index.contains_key(&sym) {
                index.insert(sym.clone(), vocab.len());
                vocab.push(sym);
            }
        }
        BpeModel {
            alphabet,
            merges,
            vocab,
            index,
            unk_count: AtomicUsize::new(0),
        }
    }

    /// Learns merges from `corpus` until the vocabulary (specials included)
    /// holds `vocab_size` ids or no adjacent pair occurs twice. Equal pair
    /// counts are broken by the lexicographically smallest `(left, right)`.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in normalize_text(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Contract("BPE training corpus is empty".into()));
        }
        let mut alphabet: BTreeSet<String> = BTreeSet::new();
        alphabet.insert(WORD_BOUNDARY.to_string());
        for w in word_counts.keys() {
            alphabet.extend(w.chars().map(String::from));
        }
        let alphabet: Vec<String> = alphabet.into_iter().collect();
        let base = NUM_SPECIALS + alphabet.len();
        if vocab_size <= base {
            return Err(Error::Config(format!(
                "BPE vocab size {vocab_size} must exceed the base vocabulary ({base}: {NUM_SPECIALS} specials + {} symbols)",
                alphabet.len()
            )));
        }

        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (split_word(&w), c))
            .collect();
        let mut merges = Vec::new();
        let mut symbols: BTreeSet<String> = alphabet.iter().cloned().collect();
        while NUM_SPECIALS + symbols.len() < vocab_size {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, count) in &words {
                for p in syms.windows(2) {
                    *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += count;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((l, r), count)) = best else { break };
            if count < 2 {
                break;
            }
            let merge = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                apply_merge(syms, &merge);
            }
            symbols.insert(format!("{}{}", merge.0, merge.1));
            merges.push(merge);
        }
        Ok(Self::from_parts(alphabet, merges))
    }

    /// Number of ids, specials included.
    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty() && self.alphabet.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn unk_count(&self) -> usize {
        self.unk_count.load(Ordering::Relaxed)
    }

    /// Segments each word of normalized `text` by replaying the merges in
    /// training order. Characters outside the alphabet become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in text.split(' ').filter(|w| !w.is_empty()) {
            let mut syms = split_word(word);
            for merge in &self.merges {
                apply_merge(&mut syms, merge);
            }
            for s in syms {
                ids.push(self.index.get(&s).copied().unwrap_or_else(|| {
                    self.unk_count.fetch_add(1, Ordering::Relaxed);
                    UNK
                }));
            }
        }
        ids
    }

    /// Concatenates symbols and turns boundary markers back into spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == UNK {
                s.push_str(SPECIAL_NAMES[UNK]);
            } else if id >= NUM_SPECIALS {
                if let Some(sym) = self.vocab.get(id) {
                    s.push_str(sym);
                }
            }
        }
        let s = s.replace(WORD_BOUNDARY, " ");
        s.strip_prefix(' ').unwrap_or(&s).to_string()
    }

    /// Header `<alphabet size>\t<merge count>`, the alphabet one symbol per
    /// line, then one `left\tright` merge per line.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{}\t{}\n", self.alphabet.len(), self.merges.len());
        for a in &self.alphabet {
            s.push_str(a);
            s.push('\n');
        }
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push('\t');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty BPE model file"))?;
        let (n_alpha, n_merges) = header
            .split_once('\t')
            .and_then(|(a, m)| Some((a.parse::<usize>().ok()?, m.parse::<usize>().ok()?)))
            .ok_or_else(|| err(1, "header must be '<alphabet size>\\t<merge count>'"))?;
        let mut alphabet = Vec::with_capacity(n_alpha);
        for i in 0..n_alpha {
            let sym = lines.next().ok_or_else(|| err(i + 2, "missing alphabet symbol"))?;
            if sym.chars().count() != 1 {
                return Err(err(i + 2, "alphabet symbols are single graphemes"));
            }
            alphabet.push(sym.to_string());
        }
        let mut known: BTreeSet<String> = alphabet.iter().cloned().collect();
        let mut merges = Vec::with_capacity(n_merges);
        for i in 0..n_merges {
            let line_no = i + 2 + n_alpha;
            let line = lines.next().ok_or_else(|| err(line_no, "missing merge"))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| err(line_no, "merge must be 'left\\tright'"))?;
            if !known.contains(l) || !known.contains(r) {
                return Err(err(line_no, "merge refers to a symbol not defined earlier"));
            }
            known.insert(format!("{l}{r}"));
            merges.push((l.to_string(), r.to_string()));
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(err(n_alpha + n_merges + 2, "trailing content after merges"));
        }
        Ok(Self::from_parts(alphabet, merges))
    }
}

impl Clone for BpeModel {
    fn clone(&self) -> Self {
        Self::from_parts(self.alphabet.clone(), self.merges.clone())
    }
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.alphabet == other.alphabet && self.merges == other.merges
    }
}

fn split_word(word: &str) -> Vec<String> {
    std::iter::once(WORD_BOUNDARY.to_string())
        .chain(word.chars().map(String::from))
        .collect()
}

/// Merges every non-overlapping occurrence of the pair, left to right.
fn apply_merge(syms: &mut Vec<String>, (l, r): &(String, String)) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && &syms[i] == l && &syms[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(l: &str, r: &str) -> (String, String) {
        (l.into(), r.into())
    }

    fn base(corpus: &[&str]) -> usize {
        let set: BTreeSet<char> = corpus.iter().flat_map(|l| l.chars()).filter(|c| *c != ' ').collect();
        NUM_SPECIALS + set.len() + 1
    }

    #[test]
    fn only_repeated_pair_merges_first() {
        let corpus = ["aa aa aa"];
        let m = BpeModel::train(&corpus, base(&corpus) + 1).unwrap();
        assert_eq!(m.merges(), &[pair("a", "a")]);
    }

    #[test]
    fn most_frequent_pair_wins() {
        let corpus = ["ab ab cd"];
        let m = BpeModel::train(&corpus, base(&corpus) + 1).unwrap();
        assert_eq!(m.merges(), &[pair("a", "b")]);
    }

    #[test]
    fn vocab_must_exceed_base() {
        let corpus = ["ab"];
        assert!(matches!(
            BpeModel::train(&corpus, base(&corpus)),
            Err(Error::Config(_))
        ));
        assert!(BpeModel::train(&[""], 100).is_err());
    }

    #[test]
    fn stops_when_nothing_repeats() {
        let m = BpeModel::train(&["abc"], 1000).unwrap();
        assert!(m.merges().is_empty());
    }

    #[test]
    fn round_trip_and_empty() {
        let m = BpeModel::train(&["hello world", "hello there", "low world"], 40).unwrap();
        assert_eq!(m.decode(&m.encode("hello world")), "hello world");
        assert!(m.encode("").is_empty());
        assert_eq!(m.unk_count(), 0);
    }

    #[test]
    fn out_of_alphabet_is_unk() {
        let m = BpeModel::train(&["ab ab"], 12).unwrap();
        let ids = m.encode("az");
        assert!(ids.contains(&UNK));
        assert_eq!(m.unk_count(), 1);
    }

    #[test]
    fn file_round_trip_and_validation() {
        let m = BpeModel::train(&["hello world", "hello there"], 30).unwrap();
        let text = m.to_file_string();
        let back = BpeModel::from_file_string(&text, "m").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_file_string(), text);
        assert!(BpeModel::from_file_string("1\t1\na\nx\ty\n", "m").is_err());
        assert!(BpeModel::from_file_string("junk", "m").is_err());
    }
}
