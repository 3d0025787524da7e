//! The `vfcfinder` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use vfcfinder_core::advisory::fix_commits_from_osv;
use vfcfinder_core::dataset::{
    audit_sample as draw_audit, contiguous_sample, corpus_negatives, read_corpus, read_feature_matrix, split, write_corpus,
    write_feature_matrix, AdvisoryWindows, LabeledRow, SplitItem, SplitPlan, DEFAULT_FOLDS,
    DEFAULT_HOLDOUT_FRACTION, DEFAULT_NEGATIVE_RATIO,
};
use vfcfinder_core::pipeline::{evaluate as evaluate_rows, match_fixes, mine, train_on, truth_map, Ensemble};
use vfcfinder_core::ranker::{load_model, permutation_importance, save_model, RankParams};
use vfcfinder_core::resolver::{resolve_source_url, Ecosystem, Fetch, FixtureFetch, RegistryQuery};
use vfcfinder_core::vfc_score::{Lexicon, DEFAULT_THRESHOLD};
use vfcfinder_core::{parse_advisory, CweOwaspMap, GitRepo, Providers, FEATURE_NAMES};

use crate::live::LiveFetch;
use crate::ranking::{failure_reason, open_repo, rank_in_repo, Source};

pub const FEATURES_FILE: &str = "features.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const NEGATIVES_FILE: &str = "negatives.tsv";
pub const SKIPPED_FILE: &str = "skipped.tsv";

pub fn resolve(ecosystem: &str, package: &str, fixtures: Option<&Path>) -> Result<String> {
    let eco: Ecosystem = ecosystem.parse()?;
    let q = RegistryQuery::new(eco, package)?;
    let fetch: Box<dyn Fetch> = match fixtures {
        Some(dir) => Box::new(FixtureFetch::new(dir)),
        None => Box::new(LiveFetch::polite().map_err(|e| anyhow::anyhow!("{e}"))?),
    };
    Ok(resolve_source_url(&q, fetch.as_ref())?)
}

fn read_advisory(path: &Path) -> Result<vfcfinder_core::Advisory> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_advisory(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `--repo` is a local clone when it names a directory, otherwise a URL
/// cloned under `cache`.
pub fn rank(advisory_file: &Path, repo: &str, model: &Path, top: usize, cache: &Path) -> Result<serde_json::Value> {
    let advisory = read_advisory(advisory_file)?;
    let model = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
    let git = if Path::new(repo).is_dir() {
        open_repo(&advisory, &Source::Local(Path::new(repo)))?
    } else {
        let key = repo.trim_end_matches('/').rsplit('/').take(2).collect::<Vec<_>>();
        let dest = cache.join(key.iter().rev().cloned().collect::<Vec<_>>().join("__"));
        GitRepo::clone_or_open(repo, &dest)?
    };
    let out = rank_in_repo(
        &advisory,
        &git,
        &Ensemble::single(model),
        &Providers::reference(),
        &CweOwaspMap::builtin(),
    )?;
    let shown: Vec<_> = out
        .candidates
        .iter()
        .take(top)
        .map(|c| {
            json!({
                "rank": c.rank_position,
                "sha": c.sha,
                "probability": c.probability,
                "fixed_version": c.fixed_version,
                "features": c.features,
                "message": c.message.lines().next().unwrap_or(""),
            })
        })
        .collect();
    Ok(json!({
        "advisory_id": advisory.id,
        "total": out.candidates.len(),
        "skipped": out.skipped,
        "candidates": shown,
    }))
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub repos: PathBuf,
    pub seed: u64,
    pub folds: usize,
    pub holdout: f64,
    pub negative_ratio: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            repos: PathBuf::from(".vfcfinder/repos"),
            seed: 0,
            folds: DEFAULT_FOLDS,
            holdout: DEFAULT_HOLDOUT_FRACTION,
            negative_ratio: DEFAULT_NEGATIVE_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildSummary {
    pub advisories: usize,
    pub rows: usize,
    pub skipped: Vec<(String, String)>,
    pub insufficient_negatives: usize,
}

/// Mine every OSV document in `advisory_dir` and write a corpus with its
/// feature matrix, split and negative sample.
pub fn build_dataset(advisory_dir: &Path, out: &Path, opts: &BuildOptions) -> Result<BuildSummary> {
    let mut files: Vec<PathBuf> = fs::read_dir(advisory_dir)
        .with_context(|| format!("listing {}", advisory_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();

    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let text = fs::read_to_string(path)?;
        let name = path.display().to_string();
        let advisory = match parse_advisory(&text) {
            Ok(a) => a,
            Err(e) => {
                skipped.push((name, format!("malformed: {e}")));
                continue;
            }
        };
        let id = advisory.id.clone();
        let fixes = fix_commits_from_osv(&text)?;
        if fixes.is_empty() {
            skipped.push((id, "no_fix_reference".into()));
            continue;
        }
        let repo = match open_repo(&advisory, &Source::Cached(&opts.repos)) {
            Ok(r) => r,
            Err(f) => {
                skipped.push((id, f.reason.code().to_string()));
                continue;
            }
        };
        let mined = mine(&advisory, &repo)?;
        if mined.windows.is_empty() {
            let why = mined
                .failures
                .first()
                .map_or("no_fixed_version".to_string(), |(_, e)| failure_reason(e).code().to_string());
            skipped.push((id, why));
            continue;
        }
        let vfcs = match_fixes(&mined.windows, &fixes);
        if vfcs.is_empty() {
            skipped.push((id, "fix_outside_window".into()));
            continue;
        }
        items.push(AdvisoryWindows {
            advisory,
            windows: mined.windows,
            vfcs,
        });
    }
    if items.len() < opts.folds {
        bail!("only {} usable advisories; need at least {}", items.len(), opts.folds);
    }

    write_corpus(out, &items)?;
    let map = CweOwaspMap::builtin();
    let rows = contiguous_sample(&items, &map, &Providers::reference())?;
    let mut w = BufWriter::new(fs::File::create(out.join(FEATURES_FILE))?);
    write_feature_matrix(&mut w, &rows)?;
    w.flush()?;

    let split_items: Vec<SplitItem> = items.iter().map(|i| SplitItem::from_windows(i, &map)).collect();
    let plan = split(&split_items, opts.holdout, opts.folds, opts.seed)?;
    fs::write(out.join(SPLIT_FILE), serde_json::to_string_pretty(&plan)?)?;

    let (negatives, insufficient) = corpus_negatives(&items, &Lexicon::builtin(), opts.negative_ratio, opts.seed);
    let mut neg = String::from("advisory_id\tsha\n");
    for (id, sha) in negatives {
        let _ = writeln!(neg, "{id}\t{sha}");
    }
    fs::write(out.join(NEGATIVES_FILE), neg)?;

    let mut skip = String::from("advisory\treason\n");
    for (a, r) in &skipped {
        let _ = writeln!(skip, "{a}\t{r}");
    }
    fs::write(out.join(SKIPPED_FILE), skip)?;

    Ok(BuildSummary {
        advisories: items.len(),
        rows: rows.len(),
        skipped,
        insufficient_negatives: insufficient,
    })
}

pub struct Corpus {
    pub items: Vec<AdvisoryWindows>,
    pub rows: Vec<LabeledRow>,
    pub plan: SplitPlan,
}

/// Read a corpus directory, reusing its stored feature matrix and split
/// when present.
pub fn load_corpus(dir: &Path, seed: u64) -> Result<Corpus> {
    let items = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let map = CweOwaspMap::builtin();
    let features = dir.join(FEATURES_FILE);
    let rows = if features.exists() {
        read_feature_matrix(BufReader::new(fs::File::open(&features)?))?
    } else {
        contiguous_sample(&items, &map, &Providers::reference())?
    };
    let split_file = dir.join(SPLIT_FILE);
    let plan = if split_file.exists() {
        serde_json::from_str(&fs::read_to_string(&split_file)?).context("reading split")?
    } else {
        let split_items: Vec<SplitItem> = items.iter().map(|i| SplitItem::from_windows(i, &map)).collect();
        split(&split_items, DEFAULT_HOLDOUT_FRACTION, DEFAULT_FOLDS, seed)?
    };
    Ok(Corpus { items, rows, plan })
}

pub fn train(corpus: &Path, out: &Path, params: &RankParams) -> Result<serde_json::Value> {
    let c = load_corpus(corpus, params.seed)?;
    let dev = c.plan.development();
    let trained = train_on(&c.rows, &dev, params)?;
    save_model(&trained.model, out).with_context(|| format!("writing {}", out.display()))?;
    let used: Vec<_> = c.rows.iter().filter(|r| dev.contains(&r.advisory_id)).collect();
    Ok(json!({
        "model": out.display().to_string(),
        "advisories": dev.len(),
        "rows": used.len(),
        "positives": used.iter().filter(|r| r.label).count(),
        "trees": trained.model.trees.len(),
        "degenerate": trained.degenerate,
    }))
}

pub fn evaluate(corpus: &Path, model: &Path, threshold: Option<f64>) -> Result<vfcfinder_core::eval::EvalReport> {
    let c = load_corpus(corpus, 0)?;
    let model = load_model(model)?;
    let report = evaluate_rows(
        &Ensemble::single(model),
        &c.rows,
        &c.plan.holdout,
        &truth_map(&c.items),
        threshold.unwrap_or(DEFAULT_THRESHOLD),
    )?;
    Ok(report)
}

/// Permutation importance on the holdout rows, most important first.
pub fn importance(corpus: &Path, model: &Path, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let c = load_corpus(corpus, 0)?;
    let model = load_model(model)?;
    let (x, y): (Vec<_>, Vec<_>) = c
        .rows
        .iter()
        .filter(|r| c.plan.holdout.contains(&r.advisory_id))
        .map(|r| (r.features.to_array(), r.label))
        .unzip();
    if x.is_empty() {
        bail!("the corpus has no holdout rows");
    }
    let imp = permutation_importance(&model, &x, &y, seed);
    let mut out: Vec<(&'static str, f64)> = FEATURE_NAMES.iter().copied().zip(imp).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(out)
}

/// A seeded draw of sampled negatives for manual review, as
/// `advisory<TAB>sha<TAB>subject` lines.
pub fn audit_sample(corpus: &Path, n: usize, seed: u64) -> Result<String> {
    let items = read_corpus(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let mut out = String::from("advisory_id\tsha\tsubject\n");
    for (id, sha) in draw_audit(&items, &Lexicon::builtin(), DEFAULT_NEGATIVE_RATIO, n, seed) {
        let subject = items
            .iter()
            .find(|i| i.advisory.id == id)
            .and_then(|i| i.commits().find(|c| c.sha == sha))
            .map_or("", |c| c.message.lines().next().unwrap_or(""));
        let _ = writeln!(out, "{id}\t{sha}\t{subject}");
    }
    Ok(out)
}
