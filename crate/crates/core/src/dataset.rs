//! Training corpora: complete commit windows as labeled rows, negative
//! sampling for the fix scorer, and leakage-free holdout/fold splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advisory::{owasp_class_of, parse_advisory, Advisory, AdvisoryError, CweOwaspMap, OwaspClass};
use crate::features::{assemble_window, AdvisoryContext, FeatureError, FeatureVector, Providers, FEATURE_NAMES};
use crate::vfc_score::Lexicon;
use crate::window::{read_window_records, write_window_records, CommitRecord, CommitWindow, Language, WindowError};

pub const DEFAULT_NEGATIVE_RATIO: usize = 5;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.10;
pub const DEFAULT_FOLDS: usize = 5;

const ADVISORIES_FILE: &str = "advisories.ndjson";
const WINDOWS_FILE: &str = "windows.ndjson";
const LABELS_FILE: &str = "labels.tsv";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("corpus I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Advisory(#[from] AdvisoryError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{file} line {line}: {reason}")]
    BadLine { file: String, line: usize, reason: String },
    #[error("need at least {folds} advisories to split, got {got}")]
    TooFewAdvisories { folds: usize, got: usize },
}

/// An advisory with its mined windows and known fixing commits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryWindows {
    pub advisory: Advisory,
    pub windows: Vec<CommitWindow>,
    pub vfcs: BTreeSet<String>,
}

impl AdvisoryWindows {
    pub fn commits(&self) -> impl Iterator<Item = &CommitRecord> {
        self.windows.iter().flat_map(|w| w.commits.iter())
    }

    pub fn shas(&self) -> impl Iterator<Item = &str> {
        self.commits().map(|c| c.sha.as_str())
    }

    /// Most frequent study language over changed files; `Other` when none.
    /// Ties go to the earlier language in [`Language::ALL`].
    pub fn dominant_language(&self) -> Language {
        let mut counts: BTreeMap<Language, usize> = BTreeMap::new();
        for f in self.commits().flat_map(|c| c.files.iter()) {
            if f.language != Language::Other {
                *counts.entry(f.language).or_default() += 1;
            }
        }
        let mut best = (Language::Other, 0);
        for (l, n) in counts {
            if n > best.1 {
                best = (l, n);
            }
        }
        best.0
    }

    pub fn class(&self, map: &CweOwaspMap) -> OwaspClass {
        owasp_class_of(&self.advisory, map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub advisory_id: String,
    pub sha: String,
    pub features: FeatureVector,
    pub label: bool,
    /// Distinct languages of the commit's files.
    pub languages: Vec<Language>,
}

fn commit_languages(c: &CommitRecord) -> Vec<Language> {
    let set: BTreeSet<Language> = c.files.iter().map(|f| f.language).collect();
    set.into_iter().collect()
}

/// One row per commit of every window, in window order.
pub fn contiguous_sample(
    items: &[AdvisoryWindows],
    map: &CweOwaspMap,
    providers: &Providers,
) -> Result<Vec<LabeledRow>, DatasetError> {
    let mut rows = Vec::new();
    for item in items {
        let ctx = AdvisoryContext::new(item.advisory.clone(), map, providers)?;
        for window in &item.windows {
            let assembled = assemble_window(&ctx, window, providers)?;
            for (commit, (sha, a)) in window.commits.iter().zip(assembled) {
                rows.push(LabeledRow {
                    advisory_id: item.advisory.id.clone(),
                    label: item.vfcs.contains(&sha),
                    sha,
                    features: a.vector,
                    languages: commit_languages(commit),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub negatives: Vec<String>,
    /// Fewer than `ratio` negatives per fix were available.
    pub insufficient: bool,
}

/// Commits eligible as negatives: no lexicon hit in the message, at least
/// one study-language file, and not a known fix.
pub fn eligible_negatives<'a>(
    history: &'a [CommitRecord],
    vfcs: &[String],
    lexicon: &Lexicon,
) -> Vec<&'a CommitRecord> {
    let fixes: BTreeSet<&str> = vfcs.iter().map(String::as_str).collect();
    history
        .iter()
        .filter(|c| !fixes.contains(c.sha.as_str()))
        .filter(|c| c.touches_study_language())
        .filter(|c| lexicon.hits(&c.message) == 0)
        .collect()
}

/// `ratio` distinct negatives per fix from the same history, by seeded
/// shuffle.
pub fn sample_non_vfcs(
    history: &[CommitRecord],
    vfcs: &[String],
    lexicon: &Lexicon,
    ratio: usize,
    seed: u64,
) -> NegativeSample {
    let mut pool: Vec<&str> = eligible_negatives(history, vfcs, lexicon)
        .into_iter()
        .map(|c| c.sha.as_str())
        .collect();
    pool.sort_unstable();
    pool.dedup();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let want = ratio * vfcs.len();
    NegativeSample {
        insufficient: pool.len() < want,
        negatives: pool.into_iter().take(want).map(str::to_string).collect(),
    }
}

/// Negatives for every advisory of a corpus as `(advisory_id, sha)`, the
/// i-th advisory sampled with `seed ^ i`. Also returns how many advisories
/// fell short of `ratio` per fix.
pub fn corpus_negatives(
    items: &[AdvisoryWindows],
    lexicon: &Lexicon,
    ratio: usize,
    seed: u64,
) -> (Vec<(String, String)>, usize) {
    let mut out = Vec::new();
    let mut short = 0;
    for (i, item) in items.iter().enumerate() {
        let history: Vec<CommitRecord> = item.commits().cloned().collect();
        let vfcs: Vec<String> = item.vfcs.iter().cloned().collect();
        let s = sample_non_vfcs(&history, &vfcs, lexicon, ratio, seed ^ i as u64);
        short += usize::from(s.insufficient);
        out.extend(s.negatives.into_iter().map(|sha| (item.advisory.id.clone(), sha)));
    }
    (out, short)
}

/// `n` of the corpus negatives picked at random for a manual audit.
pub fn audit_sample(items: &[AdvisoryWindows], lexicon: &Lexicon, ratio: usize, n: usize, seed: u64) -> Vec<(String, String)> {
    let (mut all, _) = corpus_negatives(items, lexicon, ratio, seed);
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    all.truncate(n);
    all
}

/// Advisories usable for type-model training: exactly one CWE.
pub fn type_training_subset(items: &[AdvisoryWindows]) -> Vec<&AdvisoryWindows> {
    items.iter().filter(|i| i.advisory.cwe_ids.len() == 1).collect()
}

/// Input to [`split`]: one advisory with its stratum and window shas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitItem {
    pub advisory_id: String,
    pub class: OwaspClass,
    pub language: Language,
    pub shas: Vec<String>,
}

impl SplitItem {
    pub fn from_windows(item: &AdvisoryWindows, map: &CweOwaspMap) -> SplitItem {
        SplitItem {
            advisory_id: item.advisory.id.clone(),
            class: item.class(map),
            language: item.dominant_language(),
            shas: item.shas().map(str::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub holdout: BTreeSet<String>,
    pub folds: Vec<BTreeSet<String>>,
    /// Strata with fewer groups than folds, pooled and split unstratified.
    pub merged_strata: Vec<(OwaspClass, Language)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub holdout: BTreeSet<String>,
}

impl SplitPlan {
    /// Fold `test_fold` as test, the other folds as train.
    pub fn corpus_split(&self, test_fold: usize) -> CorpusSplit {
        CorpusSplit {
            train: self
                .folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != test_fold)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect(),
            test: self.folds[test_fold].clone(),
            holdout: self.holdout.clone(),
        }
    }

    /// Every advisory not held out.
    pub fn development(&self) -> BTreeSet<String> {
        self.folds.iter().flatten().cloned().collect()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Largest-remainder apportionment of `total` seats by `weights`.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut seats: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (total * w % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - seats.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        seats[i] += 1;
    }
    seats
}

/// Stratified advisory-level split into a holdout set and `folds` folds.
///
/// Advisories whose windows share a commit are grouped and always land in
/// the same part. Strata are `(class, dominant language)`.
pub fn split(
    items: &[SplitItem],
    holdout_fraction: f64,
    folds: usize,
    seed: u64,
) -> Result<SplitPlan, DatasetError> {
    assert!(folds >= 1 && (0.0..1.0).contains(&holdout_fraction));
    if items.len() < folds {
        return Err(DatasetError::TooFewAdvisories {
            folds,
            got: items.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].advisory_id.cmp(&items[b].advisory_id));

    // group advisories that share any sha
    let mut parent: Vec<usize> = (0..items.len()).collect();
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for &i in &order {
        for sha in &items[i].shas {
            match owner.get(sha.as_str()) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
                None => {
                    owner.insert(sha, i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();

    // strata keyed by the group's first advisory
    let mut strata: BTreeMap<(OwaspClass, Language), Vec<usize>> = BTreeMap::new();
    for (g, members) in groups.iter().enumerate() {
        let first = &items[members[0]];
        strata.entry((first.class, first.language)).or_default().push(g);
    }
    let mut merged_strata = Vec::new();
    let mut pooled = Vec::new();
    let mut kept: Vec<((OwaspClass, Language), Vec<usize>)> = Vec::new();
    for (key, gs) in strata {
        if gs.len() < folds {
            merged_strata.push(key);
            pooled.extend(gs);
        } else {
            kept.push((key, gs));
        }
    }
    if !pooled.is_empty() {
        kept.push(((OwaspClass::Other, Language::Other), pooled));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, gs) in kept.iter_mut() {
        gs.sort_unstable();
        gs.shuffle(&mut rng);
    }

    let size = |g: usize| groups[g].len();
    let target = (holdout_fraction * items.len() as f64).round() as usize;
    let weights: Vec<usize> = kept.iter().map(|(_, gs)| gs.iter().map(|&g| size(g)).sum()).collect();
    let quotas = apportion(target, &weights);

    let mut holdout_groups = BTreeSet::new();
    let mut held = 0;
    for ((_, gs), quota) in kept.iter().zip(&quotas) {
        let mut taken = 0;
        for &g in gs {
            if taken + size(g) <= *quota {
                holdout_groups.insert(g);
                taken += size(g);
            }
        }
        held += taken;
    }
    // top up when group sizes kept a stratum under its quota
    for (_, gs) in &kept {
        for &g in gs {
            if held < target && !holdout_groups.contains(&g) && held + size(g) <= target {
                holdout_groups.insert(g);
                held += size(g);
            }
        }
    }

    // folds: largest groups first, each to the smallest fold, ties to the
    // fold holding the fewest of its stratum
    let mut queue: Vec<(usize, usize, usize)> = Vec::new();
    for (s, (_, gs)) in kept.iter().enumerate() {
        for (pos, &g) in gs.iter().enumerate() {
            if !holdout_groups.contains(&g) {
                queue.push((g, s, pos));
            }
        }
    }
    queue.sort_by(|a, b| size(b.0).cmp(&size(a.0)).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    let mut fold_sizes = vec![0usize; folds];
    let mut fold_strata = vec![vec![0usize; kept.len()]; folds];
    let mut fold_sets = vec![BTreeSet::new(); folds];
    for (g, s, _) in queue {
        let f = (0..folds)
            .min_by_key(|&f| (fold_sizes[f], fold_strata[f][s], f))
            .expect("folds >= 1");
        fold_sizes[f] += size(g);
        fold_strata[f][s] += 1;
        fold_sets[f].extend(groups[g].iter().map(|&i| items[i].advisory_id.clone()));
    }

    Ok(SplitPlan {
        holdout: holdout_groups
            .into_iter()
            .flat_map(|g| groups[g].iter().map(|&i| items[i].advisory_id.clone()))
            .collect(),
        folds: fold_sets,
        merged_strata,
    })
}

/// `advisory_id<TAB>sha<TAB>label` for every commit of every window.
pub fn write_labels<W: Write>(out: &mut W, items: &[AdvisoryWindows]) -> std::io::Result<()> {
    for item in items {
        for sha in item.shas() {
            let label = u8::from(item.vfcs.contains(sha));
            writeln!(out, "{}\t{sha}\t{label}", item.advisory.id)?;
        }
    }
    Ok(())
}

/// Fixing commits per advisory from a labels file.
pub fn read_labels<R: BufRead>(input: R) -> Result<BTreeMap<String, BTreeSet<String>>, DatasetError> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| DatasetError::BadLine {
            file: LABELS_FILE.into(),
            line: n + 1,
            reason: reason.into(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, sha, label] = cols[..] else {
            return Err(bad("expected 3 tab-separated columns"));
        };
        let entry = out.entry(id.to_string()).or_default();
        match label.trim() {
            "1" => {
                entry.insert(sha.to_string());
            }
            "0" => {}
            _ => return Err(bad("label must be 0 or 1")),
        }
    }
    Ok(out)
}

/// Write `advisories.ndjson`, `windows.ndjson` and `labels.tsv` into `dir`.
pub fn write_corpus(dir: &Path, items: &[AdvisoryWindows]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let mut adv = BufWriter::new(fs::File::create(dir.join(ADVISORIES_FILE))?);
    let mut win = BufWriter::new(fs::File::create(dir.join(WINDOWS_FILE))?);
    let mut lab = BufWriter::new(fs::File::create(dir.join(LABELS_FILE))?);
    for item in items {
        serde_json::to_writer(&mut adv, &item.advisory.to_osv()).map_err(std::io::Error::from)?;
        adv.write_all(b"\n")?;
        for w in &item.windows {
            write_window_records(&mut win, &item.advisory.id, w)?;
        }
    }
    write_labels(&mut lab, items)?;
    adv.flush()?;
    win.flush()?;
    lab.flush()?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Vec<AdvisoryWindows>, DatasetError> {
    let mut items = Vec::new();
    let mut index = HashMap::new();
    for (n, line) in BufReader::new(fs::File::open(dir.join(ADVISORIES_FILE))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let advisory = parse_advisory(&line).map_err(|e| DatasetError::BadLine {
            file: ADVISORIES_FILE.into(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        index.insert(advisory.id.clone(), items.len());
        items.push(AdvisoryWindows {
            advisory,
            windows: Vec::new(),
            vfcs: BTreeSet::new(),
        });
    }
    let windows = read_window_records(BufReader::new(fs::File::open(dir.join(WINDOWS_FILE))?))?;
    for (id, w) in windows {
        let &i = index.get(&id).ok_or_else(|| DatasetError::BadLine {
            file: WINDOWS_FILE.into(),
            line: 0,
            reason: format!("window for unknown advisory {id}"),
        })?;
        items[i].windows.push(w);
    }
    let labels = read_labels(BufReader::new(fs::File::open(dir.join(LABELS_FILE))?))?;
    for (id, shas) in labels {
        if let Some(&i) = index.get(&id) {
            items[i].vfcs = shas;
        }
    }
    Ok(items)
}

const MATRIX_PREFIX: [&str; 2] = ["advisory_id", "sha"];
const MATRIX_SUFFIX: [&str; 2] = ["label", "languages"];

pub fn matrix_header() -> String {
    MATRIX_PREFIX
        .iter()
        .chain(FEATURE_NAMES.iter())
        .chain(MATRIX_SUFFIX.iter())
        .copied()
        .collect::<Vec<_>>()
        .join(",")
}

/// CSV with a header naming the seven features in model order. Languages
/// are `;`-separated.
pub fn write_feature_matrix<W: Write>(out: &mut W, rows: &[LabeledRow]) -> std::io::Result<()> {
    writeln!(out, "{}", matrix_header())?;
    for r in rows {
        let mut line = format!("{},{}", r.advisory_id, r.sha);
        for v in r.features.to_array() {
            let _ = write!(line, ",{v}");
        }
        let langs: Vec<&str> = r.languages.iter().map(|l| l.name()).collect();
        let _ = write!(line, ",{},{}", u8::from(r.label), langs.join(";"));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_feature_matrix<R: BufRead>(input: R) -> Result<Vec<LabeledRow>, DatasetError> {
    let mut lines = input.lines().enumerate();
    let bad = |line: usize, reason: String| DatasetError::BadLine {
        file: "feature matrix".into(),
        line,
        reason,
    };
    match lines.next() {
        Some((_, Ok(h))) if h.trim_end() == matrix_header() => {}
        _ => return Err(bad(1, format!("header must be {}", matrix_header()))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(bad(n + 1, format!("expected 11 columns, got {}", cols.len())));
        }
        let mut a = [0.0; 7];
        for (slot, raw) in a.iter_mut().zip(&cols[2..9]) {
            *slot = raw.parse().map_err(|_| bad(n + 1, format!("bad number {raw:?}")))?;
        }
        let languages = if cols[10].is_empty() {
            Vec::new()
        } else {
            cols[10]
                .split(';')
                .map(|l| l.parse().map_err(|_| bad(n + 1, format!("bad language {l:?}"))))
                .collect::<Result<_, _>>()?
        };
        rows.push(LabeledRow {
            advisory_id: cols[0].to_string(),
            sha: cols[1].to_string(),
            features: FeatureVector::from_array(a),
            label: match cols[9] {
                "1" => true,
                "0" => false,
                other => return Err(bad(n + 1, format!("bad label {other:?}"))),
            },
            languages,
        });
    }
    Ok(rows)
}
