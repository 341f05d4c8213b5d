//! Eligibility rules that keep the detection test valid.
//!
//! A scored `(window, token)` tuple must (1) not repeat an earlier scored
//! tuple and (2) not have its window visible in the suspect's context: the
//! prompt in closed mode, the earlier part of the attention span in open mode.
//! The optional filter further restricts scoring to windows in a known set.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::hashing::{kgram_fingerprint, tuple_fingerprint, TokenId};

const FILTER_MAGIC: &[u8; 4] = b"RSF1";

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("duplicate candidate key (document {doc}, position {pos})")]
    DuplicateKey { doc: u64, pos: u32 },
    #[error("filter was built for k = {filter}, detection uses k = {detection}")]
    FilterWindow { filter: usize, detection: usize },
    #[error("malformed filter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    Open,
    Closed,
}

/// What counts as "already scored".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DedupUnit {
    /// Distinct `(k+1)`-tuples (window plus token).
    #[default]
    Tuple,
    /// Distinct k-gram windows.
    Window,
}

/// De-duplication memory for one detection run.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: AccessMode,
    unit: DedupUnit,
    seen: HashSet<u64>,
}

impl Tape {
    pub fn new(mode: AccessMode) -> Self {
        Self::with_unit(mode, DedupUnit::Tuple)
    }

    pub fn with_unit(mode: AccessMode, unit: DedupUnit) -> Self {
        Tape {
            mode,
            unit,
            seen: HashSet::new(),
        }
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    /// Decides whether `(window, token)` may be scored and records it if so.
    ///
    /// `local_context` is the prompt in closed mode. In open mode it is every
    /// token the suspect sees at this position, so the window is its suffix
    /// and only occurrences ending before the last token count.
    pub fn admit(&mut self, window: &[TokenId], token: TokenId, local_context: &[TokenId]) -> bool {
        let searched = match self.mode {
            AccessMode::Closed => local_context,
            AccessMode::Open => &local_context[..local_context.len().saturating_sub(1)],
        };
        let in_context = !window.is_empty()
            && searched.windows(window.len()).any(|w| w == window);
        self.admit_fingerprinted(window, token, in_context)
    }

    /// Same as [`Tape::admit`] with the context rule already evaluated.
    pub fn admit_fingerprinted(&mut self, window: &[TokenId], token: TokenId, in_context: bool) -> bool {
        if in_context {
            return false;
        }
        let fp = match self.unit {
            DedupUnit::Tuple => tuple_fingerprint(window, token),
            DedupUnit::Window => kgram_fingerprint(window),
        };
        self.seen.insert(fp)
    }
}

/// Where the filter's k-grams came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterSource {
    /// k-grams of the outputs known to have been handed to the suspect.
    Supervised,
    /// k-grams of freshly generated watermarked text.
    Fresh,
    /// Loaded from disk; provenance not recorded in the file.
    File,
}

/// Set of k-gram fingerprints that restricts which windows are scored.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSet {
    k: usize,
    kgrams: HashSet<u64>,
    source: FilterSource,
}

impl FilterSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.kgrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kgrams.is_empty()
    }

    pub fn source(&self) -> FilterSource {
        self.source
    }

    pub fn contains(&self, window: &[TokenId]) -> bool {
        window.len() == self.k && self.kgrams.contains(&kgram_fingerprint(window))
    }

    pub fn contains_fingerprint(&self, fp: u64) -> bool {
        self.kgrams.contains(&fp)
    }

    pub fn sorted_fingerprints(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.kgrams.iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// Binary layout: `RSF1`, `k` as one byte, count as u64 LE, then the
    /// sorted fingerprints as u64 LE.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let k = u8::try_from(self.k)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "k does not fit in one byte"))?;
        w.write_all(FILTER_MAGIC)?;
        w.write_all(&[k])?;
        let fps = self.sorted_fingerprints();
        w.write_all(&(fps.len() as u64).to_le_bytes())?;
        for fp in fps {
            w.write_all(&fp.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DedupError> {
        let mut head = [0u8; 13];
        r.read_exact(&mut head)
            .map_err(|_| DedupError::Format("truncated header".into()))?;
        if &head[..4] != FILTER_MAGIC {
            return Err(DedupError::Format("bad magic".into()));
        }
        let k = head[4] as usize;
        if k == 0 {
            return Err(DedupError::Format("k must be at least 1".into()));
        }
        let count = u64::from_le_bytes(head[5..13].try_into().unwrap());
        let mut kgrams = HashSet::new();
        let mut buf = [0u8; 8];
        let mut prev: Option<u64> = None;
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| DedupError::Format("truncated fingerprint list".into()))?;
            let fp = u64::from_le_bytes(buf);
            if prev.is_some_and(|p| p >= fp) {
                return Err(DedupError::Format("fingerprints are not strictly sorted".into()));
            }
            prev = Some(fp);
            kgrams.insert(fp);
        }
        if r.read(&mut buf)? != 0 {
            return Err(DedupError::Format("trailing bytes".into()));
        }
        Ok(FilterSet {
            k,
            kgrams,
            source: FilterSource::File,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DedupError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DedupError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }
}

/// All distinct k-grams of a corpus. Windows never span documents.
pub fn build_filter<'a, I>(documents: I, k: usize, source: FilterSource) -> FilterSet
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    assert!(k >= 1, "filter window must be at least 1");
    let kgrams = documents
        .into_iter()
        .flat_map(|doc| doc.windows(k).map(kgram_fingerprint))
        .collect();
    FilterSet { k, kgrams, source }
}

/// k-gram fingerprints of a prompt, for the closed-mode context rule.
pub fn prompt_kgrams(prompt: &[TokenId], k: usize) -> HashSet<u64> {
    prompt.windows(k).map(kgram_fingerprint).collect()
}

/// Open-mode context rule for every scorable position of a document.
///
/// Entry `t - k` is true when the window `doc[t-k..t]` already occurred
/// starting before `t - k`, within the last `span` tokens (`None` means the
/// whole prefix).
pub fn open_mode_repeats(doc: &[TokenId], k: usize, span: Option<usize>) -> Vec<bool> {
    if doc.len() <= k {
        return Vec::new();
    }
    let fps: Vec<u64> = doc.windows(k).map(kgram_fingerprint).collect();
    let mut live: HashMap<u64, u32> = HashMap::new();
    let mut next_add = 0usize;
    let mut next_drop = 0usize;
    let mut out = Vec::with_capacity(doc.len() - k);
    for t in k..doc.len() {
        let start = t - k;
        // earlier windows start in [lo, start), with lo keeping them inside the span
        let lo = span.map_or(0, |s| t.saturating_sub(s));
        while next_add < start {
            *live.entry(fps[next_add]).or_default() += 1;
            next_add += 1;
        }
        while next_drop < lo.min(next_add) {
            let c = live.get_mut(&fps[next_drop]).unwrap();
            *c -= 1;
            if *c == 0 {
                live.remove(&fps[next_drop]);
            }
            next_drop += 1;
        }
        out.push(live.contains_key(&fps[start]));
    }
    out
}

/// One potential scored tuple with its ordering key.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc: u64,
    pub pos: u32,
    pub window: Vec<TokenId>,
    pub token: TokenId,
    /// The window is visible in the suspect's context (rule 2).
    pub in_context: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct DedupStats {
    pub candidates: u64,
    pub admitted: u64,
    pub context_excluded: u64,
    pub duplicates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterStats {
    pub filter_size: u64,
    pub hits: u64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DedupOptions {
    pub mode: AccessMode,
    pub unit: DedupUnit,
    /// Disabling the tape admits every candidate. The resulting p-values are
    /// not valid; this exists to demonstrate why the rules are needed.
    pub enabled: bool,
}

impl DedupOptions {
    pub fn new(mode: AccessMode) -> Self {
        DedupOptions {
            mode,
            unit: DedupUnit::Tuple,
            enabled: true,
        }
    }
}

pub struct DedupOutcome {
    pub admitted: Vec<Candidate>,
    pub stats: DedupStats,
    pub filter: Option<FilterStats>,
}

/// Second phase of de-duplication: candidates may be collected in any order
/// (for instance in parallel), then the filter and the tape are applied in
/// `(doc, pos)` order so the outcome does not depend on collection order.
pub fn canonical_dedup(
    mut candidates: Vec<Candidate>,
    opts: DedupOptions,
    filter: Option<&FilterSet>,
) -> Result<DedupOutcome, DedupError> {
    candidates.sort_by_key(|c| (c.doc, c.pos));
    if let Some(w) = candidates
        .windows(2)
        .find(|w| (w[0].doc, w[0].pos) == (w[1].doc, w[1].pos))
    {
        return Err(DedupError::DuplicateKey {
            doc: w[0].doc,
            pos: w[0].pos,
        });
    }
    let mut stats = DedupStats {
        candidates: candidates.len() as u64,
        ..Default::default()
    };
    let mut hits = 0u64;
    let mut tape = Tape::with_unit(opts.mode, opts.unit);
    let mut admitted = Vec::new();
    for c in candidates {
        if let Some(phi) = filter {
            if !phi.contains(&c.window) {
                continue;
            }
            hits += 1;
        }
        if opts.enabled {
            if c.in_context {
                stats.context_excluded += 1;
                continue;
            }
            if !tape.admit_fingerprinted(&c.window, c.token, false) {
                stats.duplicates += 1;
                continue;
            }
        }
        admitted.push(c);
    }
    stats.admitted = admitted.len() as u64;
    let filter = filter.map(|phi| FilterStats {
        filter_size: phi.len() as u64,
        hits,
        hit_rate: if stats.candidates == 0 {
            0.0
        } else {
            hits as f64 / stats.candidates as f64
        },
    });
    Ok(DedupOutcome {
        admitted,
        stats,
        filter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_tuple_rejected() {
        let mut tape = Tape::new(AccessMode::Closed);
        assert!(tape.admit(&[1, 2], 3, &[]));
        assert!(!tape.admit(&[1, 2], 3, &[]));
        assert!(tape.admit(&[1, 2], 4, &[]));
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn closed_mode_prompt_window_rejected() {
        let mut tape = Tape::new(AccessMode::Closed);
        assert!(!tape.admit(&[5, 6], 9, &[1, 5, 6, 2]));
        assert!(tape.admit(&[6, 5], 9, &[1, 5, 6, 2]));
    }

    #[test]
    fn open_mode_first_occurrence_admitted() {
        let mut tape = Tape::new(AccessMode::Open);
        // window (3, 4) is the suffix of what the suspect sees, nothing earlier
        assert!(tape.admit(&[3, 4], 8, &[1, 2, 3, 4]));
        // second occurrence of (3, 4) in the span
        assert!(!tape.admit(&[3, 4], 7, &[1, 3, 4, 2, 3, 4]));
    }

    #[test]
    fn window_unit_dedups_on_window_only() {
        let mut tape = Tape::with_unit(AccessMode::Closed, DedupUnit::Window);
        assert!(tape.admit(&[1, 2], 3, &[]));
        assert!(!tape.admit(&[1, 2], 4, &[]));
    }

    #[test]
    fn filter_enumeration() {
        let empty: Vec<&[TokenId]> = Vec::new();
        assert!(build_filter(empty, 2, FilterSource::Supervised).is_empty());
        let doc: &[TokenId] = &[10, 11, 12];
        let phi = build_filter([doc], 2, FilterSource::Supervised);
        assert_eq!(phi.len(), 2);
        assert!(phi.contains(&[10, 11]) && phi.contains(&[11, 12]));
        assert!(!phi.contains(&[12, 10]));
        assert!(!phi.contains(&[10]));
    }

    #[test]
    fn filter_windows_do_not_span_documents() {
        let a: &[TokenId] = &[1, 2];
        let b: &[TokenId] = &[3, 4];
        let phi = build_filter([a, b], 2, FilterSource::Fresh);
        assert_eq!(phi.len(), 2);
        assert!(!phi.contains(&[2, 3]));
    }

    #[test]
    fn filter_file_layout_is_pinned() {
        let doc: &[TokenId] = &[1, 2, 3];
        let phi = build_filter([doc], 2, FilterSource::Supervised);
        let mut bytes = Vec::new();
        phi.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RSF1");
        assert_eq!(bytes[4], 2);
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 13 + 16);
        let mut expected = vec![kgram_fingerprint(&[1, 2]), kgram_fingerprint(&[2, 3])];
        expected.sort_unstable();
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), expected[0]);

        let back = FilterSet::read_from(&bytes[..]).unwrap();
        assert_eq!(back.sorted_fingerprints(), phi.sorted_fingerprints());
        assert_eq!(back.source(), FilterSource::File);

        assert!(FilterSet::read_from(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FilterSet::read_from(&bad[..]).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(FilterSet::read_from(&trailing[..]).is_err());
    }

    #[test]
    fn open_repeats_unbounded_and_span() {
        // windows (k=2): t=2 (1,2) t=3 (2,3) t=4 (3,1) t=5 (1,2) t=6 (2,9)
        let doc = [1, 2, 3, 1, 2, 9, 0];
        assert_eq!(
            open_mode_repeats(&doc, 2, None),
            vec![false, false, false, true, false]
        );
        // a span of 4 tokens at t=5 covers doc[1..5], the earlier (1,2) at 0 is out of view
        assert_eq!(
            open_mode_repeats(&doc, 2, Some(4)),
            vec![false, false, false, false, false]
        );
        assert!(open_mode_repeats(&[1, 2], 2, None).is_empty());
    }

    fn cand(doc: u64, pos: u32, window: Vec<TokenId>, token: TokenId) -> Candidate {
        Candidate {
            doc,
            pos,
            window,
            token,
            in_context: false,
        }
    }

    #[test]
    fn canonical_order_independent() {
        let base = vec![
            cand(0, 2, vec![1, 2], 3),
            cand(0, 3, vec![2, 3], 4),
            cand(1, 2, vec![1, 2], 3),
            cand(1, 3, vec![5, 5], 5),
        ];
        let mut rev = base.clone();
        rev.reverse();
        let opts = DedupOptions::new(AccessMode::Closed);
        let a = canonical_dedup(base, opts, None).unwrap();
        let b = canonical_dedup(rev, opts, None).unwrap();
        assert_eq!(a.admitted, b.admitted);
        assert_eq!(a.stats.admitted, 3);
        assert_eq!(a.stats.duplicates, 1);
        assert_eq!(a.admitted[1], cand(0, 3, vec![2, 3], 4));
    }

    #[test]
    fn canonical_rejects_duplicate_keys() {
        let c = vec![cand(0, 2, vec![1, 2], 3), cand(0, 2, vec![1, 2], 4)];
        assert!(matches!(
            canonical_dedup(c, DedupOptions::new(AccessMode::Closed), None),
            Err(DedupError::DuplicateKey { doc: 0, pos: 2 })
        ));
    }

    #[test]
    fn disabled_tape_admits_everything_but_filter_still_applies() {
        let mut c = vec![cand(0, 2, vec![1, 2], 3), cand(0, 3, vec![1, 2], 3)];
        c[1].in_context = true;
        let mut opts = DedupOptions::new(AccessMode::Closed);
        opts.enabled = false;
        assert_eq!(canonical_dedup(c.clone(), opts, None).unwrap().admitted.len(), 2);
        let doc: &[TokenId] = &[7, 7];
        let phi = build_filter([doc], 2, FilterSource::Supervised);
        let out = canonical_dedup(c, opts, Some(&phi)).unwrap();
        assert!(out.admitted.is_empty());
        assert_eq!(out.filter.unwrap().hit_rate, 0.0);
    }
}
