//! Acceptance criteria P1 to P9. Runs without the libtest harness so the
//! PASS/FAIL lines always reach stdout.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write as _;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vfcfinder_core::advisory::OwaspClass;
use vfcfinder_core::dataset::{
    contiguous_sample, sample_non_vfcs, split, SplitItem, DEFAULT_FOLDS, DEFAULT_HOLDOUT_FRACTION,
};
use vfcfinder_core::encoder::{encode_file_chunk, TokenizerProvider};
use vfcfinder_core::eval::{
    classification_metrics, confusion_matrix, metrics_from_confusion, roc_auc, topn_recall, ConfusionMatrix, Judged,
};
use vfcfinder_core::pipeline::{evaluate, train_cross_validated, train_on, truth_map, Ensemble};
use vfcfinder_core::ranker::{
    find_best_split, load_model, model_to_string, save_model, train, ModelIoError, RankParams, RankedEntry,
    RankedResult,
};
use vfcfinder_core::synthetic::{generate_corpus, random_dag_repo, CorpusConfig, SyntheticCorpus};
use vfcfinder_core::type_score::{aggregate_type, weighted_ce_grad, weighted_ce_loss, ClassWeights, TypeDistribution};
use vfcfinder_core::vfc_score::{aggregate_commit, bce_grad, bce_loss, classify_vfc, FilePrediction, Lexicon, LossSample};
use vfcfinder_core::window::{enumerate_window, find_fixed, select_prior, sort_tags, TagError};
use vfcfinder_core::{CweOwaspMap, FeatureVector, FileDiff, HashTokenizer, Providers};

type Criterion = (&'static str, &'static str, fn() -> String);

fn main() {
    let criteria: [Criterion; 9] = [
        ("P1", "window oracle", p1_windows),
        ("P2", "encoder layout", p2_encoder),
        ("P3", "loss gradients", p3_gradients),
        ("P4", "aggregation oracles", p4_aggregation),
        ("P5", "gbdt correctness", p5_gbdt),
        ("P6", "end-to-end synthetic ranking", p6_end_to_end),
        ("P7", "sampling integrity", p7_sampling),
        ("P8", "metric oracles", p8_metrics),
        ("P9", "persistence", p9_persistence),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('P')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL {id} {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    std::io::stdout().flush().unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- P1

/// (major, minor, patch, is_release, rc) for the generator's tag shapes.
type OracleKey = (u64, u64, u64, u8, u64);

fn oracle_version(raw: &str) -> Option<OracleKey> {
    let s = raw.strip_prefix('v').unwrap_or(raw);
    let (core, rc) = match s.split_once("rc") {
        Some((c, n)) => (c, Some(n.parse::<u64>().ok()?)),
        None => (s, None),
    };
    let parts: Vec<u64> = core.split('.').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    let [a, b, c] = parts[..] else { return None };
    Some(match rc {
        Some(n) => (a, b, c, 0, n),
        None => (a, b, c, 1, 0),
    })
}

fn ancestors(parents: &[Vec<usize>], tip: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![tip];
    while let Some(i) = stack.pop() {
        if seen.insert(i) {
            stack.extend(&parents[i]);
        }
    }
    seen
}

fn p1_windows() -> String {
    let t = Instant::now();
    let mut checked = 0;
    let mut sizes = Vec::new();
    for seed in 0..50u64 {
        let synth = random_dag_repo(seed);
        let dir = tempfile::tempdir().unwrap();
        let built = synth.build(dir.path()).unwrap();
        let parents: Vec<Vec<usize>> = synth.commits.iter().map(|c| c.parents.clone()).collect();
        let index: BTreeMap<&str, usize> = built.shas.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let sorted = sort_tags(&built.repo.tags().unwrap());
        let versions: Vec<(&str, usize, OracleKey)> = synth
            .tags
            .iter()
            .filter_map(|(raw, at)| oracle_version(raw).map(|k| (raw.as_str(), *at, k)))
            .collect();
        let parsed: BTreeSet<&str> = sorted.tags.iter().map(|t| t.raw.as_str()).collect();
        let expected: BTreeSet<&str> = versions.iter().map(|v| v.0).collect();
        assert_eq!(parsed, expected, "seed {seed}: version tags");

        for (n, &(raw, at, key)) in versions.iter().enumerate() {
            // query by tag name and by bare version alternately
            let query = if n % 2 == 0 { raw.to_string() } else { raw.trim_start_matches('v').to_string() };
            let mut prior: Option<(&str, usize, OracleKey)> = None;
            for &(r, a, k) in &versions {
                if k < key && prior.map_or(true, |p| k > p.2) {
                    prior = Some((r, a, k));
                }
            }
            let got = select_prior(&query, &sorted.tags);
            let Some((prior_raw, prior_at, _)) = prior else {
                assert_eq!(got, Err(TagError::NoPriorTag(query.clone())), "seed {seed} {raw}");
                continue;
            };
            let got = got.unwrap_or_else(|e| panic!("seed {seed} {raw}: {e}"));
            assert_eq!(got.raw, prior_raw, "seed {seed}: prior of {raw}");

            let fixed_tag = find_fixed(&query, &sorted.tags).unwrap();
            assert_eq!(fixed_tag.raw, raw);
            let want: BTreeSet<usize> = ancestors(&parents, at)
                .difference(&ancestors(&parents, prior_at))
                .copied()
                .collect();
            match enumerate_window(&built.repo, got, fixed_tag) {
                Ok(w) => {
                    let got_idx: Vec<usize> = w.commits.iter().map(|c| index[c.sha.as_str()]).collect();
                    assert_eq!(got_idx.iter().copied().collect::<BTreeSet<_>>(), want, "seed {seed}: window {raw}");
                    assert_eq!(got_idx.len(), want.len(), "seed {seed}: duplicates in window {raw}");
                    // oldest first: parents inside the window come before children
                    let pos: BTreeMap<usize, usize> = got_idx.iter().enumerate().map(|(p, &i)| (i, p)).collect();
                    for (p, &i) in got_idx.iter().enumerate() {
                        assert!(parents[i].iter().all(|q| pos.get(q).map_or(true, |&pq| pq < p)));
                        assert_eq!(w.commits[p].rank, p + 1);
                    }
                    sizes.push(want.len());
                }
                Err(e) => assert!(want.is_empty(), "seed {seed}: window {raw} failed: {e}"),
            }
            checked += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s");
    format!(
        "{checked} fixed versions over 50 repositories, windows of {}..={} commits",
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap()
    )
}

// ---------------------------------------------------------------- P2

const WORDS: [&str; 16] = [
    "fix", "xss", "sanitize", "input", "(", ")", "path", "traversal", ";", "buffer", "+=", "CVE-2021-1234", "é",
    "user_id", "0x1f", "\t",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(0..=max_words);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push(if rng.random_bool(0.1) { '\n' } else { ' ' });
        }
        s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    s
}

fn p2_encoder() -> String {
    let t = Instant::now();
    let tok = HashTokenizer::default();
    let sp = tok.specials();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut cut_diff, mut cut_msg) = (0, 0);
    for i in 0..1000 {
        let message = random_text(&mut rng, 400);
        let patch = format!("@@ -1 +1 @@\n+{}", random_text(&mut rng, 700));
        let max_len = if i % 2 == 0 { 512 } else { rng.random_range(8..=512) };
        let diff = FileDiff::text("src/app.py", patch);
        let enc = encode_file_chunk(&message, &diff, 4, &tok, max_len);

        let m = tok.encode(&message);
        let d = tok.encode(&diff.patch_text);
        let budget = max_len - 3;
        let mk = m.len().min(budget);
        let dk = d.len().min(budget - mk);
        cut_diff += usize::from(dk < d.len());
        cut_msg += usize::from(mk < m.len());
        // the diff is cut first: a truncated message leaves no diff
        if mk < m.len() {
            assert_eq!(dk, 0);
        }

        let ids = &enc.input_ids;
        assert!(ids.len() <= max_len && ids.len() <= 512);
        assert_eq!(ids.len(), mk + dk + 3, "case {i}");
        assert_eq!(ids[0], sp.cls);
        assert_eq!(ids[mk + 1], sp.sep);
        assert_eq!(*ids.last().unwrap(), sp.eos);
        assert_eq!(&ids[1..=mk], &m[..mk]);
        assert_eq!(&ids[mk + 2..mk + 2 + dk], &d[..dk]);
        for special in [sp.pad, sp.cls, sp.sep, sp.eos] {
            let expect = usize::from(special != sp.pad);
            assert_eq!(ids.iter().filter(|&&x| x == special).count(), expect, "case {i}");
        }
        let boundary = mk + 2;
        assert!(enc.token_type_ids[..boundary].iter().all(|&x| x == 0));
        assert!(enc.token_type_ids[boundary..].iter().all(|&x| x == 1));
        assert!(enc.attention_mask.iter().all(|&x| x == 1));
        assert_eq!(enc.attention_mask.len(), ids.len());
        assert_eq!(enc.file_index, 4);
        assert_eq!(enc.message_tokens(), &m[..mk]);
        assert_eq!(enc.diff_tokens(), &d[..dk]);
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.1}s");
    format!("1000 pairs, {cut_diff} with the diff truncated, {cut_msg} with the message truncated")
}

// ---------------------------------------------------------------- P3

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn p3_gradients() -> String {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x: f64 = rng.random_range(0.01..0.99);
        let y = rng.random_bool(0.5);
        let h = 1e-6 * x.min(1.0 - x);
        let fd = (bce_loss(LossSample::new(x + h, y)) - bce_loss(LossSample::new(x - h, y))) / (2.0 * h);
        let e = rel_err(bce_grad(LossSample::new(x, y)), fd);
        assert!(e <= 1e-5, "bce at x={x} y={y}: {e}");
        worst = worst.max(e);
    }
    let w = ClassWeights::default_from_counts();
    for _ in 0..200 {
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = OwaspClass::TRAINED[rng.random_range(0..10)];
        let g = weighted_ce_grad(&logits, y, &w);
        for k in 0..10 {
            let h = 1e-5;
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (weighted_ce_loss(&up, y, &w) - weighted_ce_loss(&down, y, &w)) / (2.0 * h);
            let e = rel_err(g[k], fd);
            assert!(e <= 1e-5, "weighted ce logit {k} class {y}: {e} ({} vs {fd})", g[k]);
            worst = worst.max(e);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 5.0, "took {secs:.1}s");
    format!("200 + 200 points, worst relative error {worst:.1e}")
}

// ---------------------------------------------------------------- P4

fn p4_aggregation() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let preds: Vec<FilePrediction> = (0..n)
            .map(|i| FilePrediction { file_index: i, probability: rng.random_range(0.0..=1.0) })
            .collect();
        let mut sum = 0.0;
        for p in &preds {
            sum += p.probability;
        }
        assert_eq!(aggregate_commit(&preds).unwrap().to_bits(), (sum / n as f64).to_bits());

        let files = rng.random_range(1..=8);
        let dists: Vec<(usize, TypeDistribution)> = (0..files)
            .map(|i| {
                // one decimal so equal logits, hence equal probabilities, occur
                let logits: Vec<f64> = (0..10).map(|_| f64::from(rng.random_range(-5i32..=5)) / 2.0).collect();
                (i, TypeDistribution::from_logits(&logits))
            })
            .collect();
        let mut all: Vec<(OwaspClass, f64)> = Vec::new();
        for (_, d) in &dists {
            for c in OwaspClass::TRAINED {
                all.push((c, d.get(c)));
            }
        }
        let max = all.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let winners: BTreeSet<OwaspClass> = all.iter().filter(|x| x.1 == max).map(|x| x.0).collect();
        ties += usize::from(winners.len() > 1);
        let want = (*winners.iter().next().unwrap(), max);
        assert_eq!(aggregate_type(&dists).unwrap(), want);
    }
    assert!(ties > 0, "no tied instance generated");
    let half = 0.5f64;
    let below = f64::from_bits(half.to_bits() - 1);
    let above = f64::from_bits(half.to_bits() + 1);
    assert_eq!(classify_vfc(half, 0.5), 1);
    assert_eq!(classify_vfc(below, 0.5), 0);
    assert_eq!(classify_vfc(above, 0.5), 1);
    format!("1000 instances ({ties} with tied maxima), threshold 0.5 inclusive")
}

// ---------------------------------------------------------------- P5

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Best split by trying every distinct value of every feature as the
/// threshold and re-summing all rows.
fn brute_force_split(x: &[[f64; 7]], g: &[f64], h: &[f64], p: &RankParams) -> Option<(usize, f64, Vec<bool>)> {
    let (tg, th): (f64, f64) = (g.iter().sum(), h.iter().sum());
    let score = |g: f64, h: f64| g * g / (h + p.l2_lambda);
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for f in 0..7 {
        let mut values: Vec<f64> = x.iter().map(|r| r[f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for &t in &values[1..] {
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in 0..x.len() {
                if x[i][f] < t {
                    gl += g[i];
                    hl += h[i];
                }
            }
            let (gr, hr) = (tg - gl, th - hl);
            if hl < p.min_child_weight || hr < p.min_child_weight {
                continue;
            }
            let gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(tg, th));
            if gain > 0.0 && best.as_ref().map_or(true, |b| gain > b.1 + 1e-9 * b.1.abs()) {
                best = Some((f, gain, x.iter().map(|r| r[f] < t).collect()));
            }
        }
    }
    best
}

fn p5_gbdt() -> String {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = RankParams::default();
    for case in 0..20 {
        let x: Vec<[f64; 7]> = (0..200)
            .map(|_| {
                let mut r = [0.0; 7];
                for (f, v) in r.iter_mut().enumerate() {
                    *v = match f {
                        1 | 2 | 4 | 5 => f64::from(u8::from(rng.random_bool(0.3))),
                        6 => f64::from(rng.random_range(0..20)) / 20.0,
                        _ => rng.random_range(0.0..1.0),
                    };
                }
                r
            })
            .collect();
        let g: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..200).map(|_| rng.random_range(0.01..0.25)).collect();
        let rows: Vec<usize> = (0..200).collect();
        let got = find_best_split(&x, &g, &h, &rows, &params);
        let want = brute_force_split(&x, &g, &h, &params);
        match (got, want) {
            (None, None) => {}
            (Some(s), Some((f, gain, left))) => {
                assert_eq!(s.feature, f, "case {case}");
                assert!(rel_err(s.gain, gain) < 1e-9, "case {case}: gain {} vs {gain}", s.gain);
                let got_left: Vec<bool> = x.iter().map(|r| r[f] < s.threshold).collect();
                assert_eq!(got_left, left, "case {case}: partition");
            }
            (a, b) => panic!("case {case}: {a:?} vs {:?}", b.map(|b| (b.0, b.1))),
        }
    }

    // logistic data whose generating scorer separates the classes well
    let w = [2.5, -1.5, 1.0, 3.0, 0.0, -2.0, 1.5];
    let x: Vec<[f64; 7]> = (0..2000)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let z: Vec<f64> = x.iter().map(|r| 3.0 * r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect();
    let y: Vec<bool> = z.iter().map(|&z| rng.random_bool(logistic(z))).collect();
    let oracle_auc = pair_auc(&z, &y);
    assert!(oracle_auc >= 0.95, "generator too noisy: {oracle_auc}");

    let p = RankParams { rounds: 100, learning_rate: 0.1, ..RankParams::default() };
    let model = train(&x, &y, &p).unwrap().model;
    let loss = |n: usize| {
        x.iter()
            .zip(&y)
            .map(|(r, &yy)| {
                let q = logistic(model.margin_with(r, n)).clamp(1e-12, 1.0 - 1e-12);
                if yy { -q.ln() } else { -(1.0 - q).ln() }
            })
            .sum::<f64>()
            / x.len() as f64
    };
    let curve: Vec<f64> = (0..=100).map(loss).collect();
    for (i, pair) in curve.windows(2).enumerate() {
        assert!(pair[1] <= pair[0] + 1e-12, "loss rose at round {}: {} -> {}", i + 1, pair[0], pair[1]);
    }
    let scores: Vec<f64> = x.iter().map(|r| model.predict_array(r)).collect();
    let auc = roc_auc(&scores, &y).unwrap();
    assert!(auc >= 0.95, "auc {auc}");
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 120.0, "took {secs:.1}s");
    format!(
        "20 split searches exact, log-loss {:.4} -> {:.4} monotone, AUC {auc:.4} (generator {oracle_auc:.4})",
        curve[0], curve[100]
    )
}

// ---------------------------------------------------------------- P6

fn p6_end_to_end() -> String {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&CorpusConfig::default(), dir.path()).unwrap();
    let items = corpus.mine().unwrap();
    let mut windows: Vec<usize> = items.iter().map(|i| i.windows.iter().map(|w| w.total()).sum()).collect();
    windows.sort_unstable();
    let map = CweOwaspMap::builtin();
    let rows = contiguous_sample(&items, &map, &Providers::reference()).unwrap();
    let split_items: Vec<SplitItem> = items.iter().map(|i| SplitItem::from_windows(i, &map)).collect();
    let plan = split(&split_items, DEFAULT_HOLDOUT_FRACTION, DEFAULT_FOLDS, 0).unwrap();
    let models = train_cross_validated(&rows, &plan, &RankParams::default()).unwrap();
    let ensemble = Ensemble { models: models.into_iter().map(|m| m.model).collect() };
    let report = evaluate(&ensemble, &rows, &plan.holdout, &truth_map(&items), 0.5).unwrap();
    let (top1, top5) = (report.topn_recall[&1], report.topn_recall[&5]);
    assert!(top1 >= 0.85, "top1 {top1}");
    assert!(top5 >= 0.95, "top5 {top5}");
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 300.0, "took {secs:.1}s");
    format!(
        "{} advisories, median window {}, holdout {}: top1 {top1:.3} top5 {top5:.3}",
        items.len(),
        windows[windows.len() / 2],
        report.advisories
    )
}

// ---------------------------------------------------------------- P7

fn words(text: &str) -> HashSet<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn p7_sampling() -> String {
    let lexicon = Lexicon::builtin();
    let keywords: Vec<String> = lexicon
        .to_tsv()
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .filter(|(k, w)| *k != "__bias__" && w.parse::<f64>().is_ok_and(|w| w > 0.0))
        .map(|(k, _)| k.to_string())
        .collect();
    let map = CweOwaspMap::builtin();
    let (mut advisories, mut exact, mut short) = (0, 0, 0);
    for seed in 1..=3u64 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { advisories: 40, seed, shared_window_rate: 0.3, ..CorpusConfig::default() };
        let items = generate_corpus(&cfg, dir.path()).unwrap().mine().unwrap();
        advisories += items.len();
        let split_items: Vec<SplitItem> = items.iter().map(|i| SplitItem::from_windows(i, &map)).collect();
        let plan = split(&split_items, 0.1, 5, seed).unwrap();
        assert_eq!(plan, split(&split_items, 0.1, 5, seed).unwrap(), "split not deterministic");

        let mut part_of: BTreeMap<&str, usize> = BTreeMap::new();
        let parts: Vec<&BTreeSet<String>> = std::iter::once(&plan.holdout).chain(&plan.folds).collect();
        for (p, set) in parts.iter().enumerate() {
            for id in set.iter() {
                assert!(part_of.insert(id, p).is_none(), "{id} in two parts");
            }
        }
        assert_eq!(part_of.len(), items.len(), "every advisory is placed");
        let mut sha_part: BTreeMap<&str, usize> = BTreeMap::new();
        for it in &items {
            let p = part_of[it.advisory.id.as_str()];
            for sha in it.shas() {
                let prev = *sha_part.entry(sha).or_insert(p);
                assert_eq!(prev, p, "sha {sha} shared between parts");
            }
        }

        for (i, it) in items.iter().enumerate() {
            let history: Vec<_> = it.commits().cloned().collect();
            let vfcs: Vec<String> = it.vfcs.iter().cloned().collect();
            let a = sample_non_vfcs(&history, &vfcs, &lexicon, 5, seed ^ i as u64);
            assert_eq!(a, sample_non_vfcs(&history, &vfcs, &lexicon, 5, seed ^ i as u64));
            let eligible: BTreeSet<&str> = history
                .iter()
                .filter(|c| !it.vfcs.contains(&c.sha))
                .filter(|c| c.touches_study_language())
                .filter(|c| {
                    let w = words(&c.message);
                    !keywords.iter().any(|k| w.contains(k))
                })
                .map(|c| c.sha.as_str())
                .collect();
            let chosen: BTreeSet<&str> = a.negatives.iter().map(String::as_str).collect();
            assert_eq!(chosen.len(), a.negatives.len(), "duplicate negatives");
            assert!(chosen.is_subset(&eligible));
            if eligible.len() >= 5 * vfcs.len() {
                assert!(!a.insufficient);
                assert_eq!(a.negatives.len(), 5 * vfcs.len());
                exact += 1;
            } else {
                assert!(a.insufficient);
                assert_eq!(chosen, eligible);
                short += 1;
            }
        }
    }
    assert!(exact > short, "too few advisories with enough negatives");
    format!("{advisories} advisories in 3 corpora, ratio exactly 5 for {exact}, {short} short of negatives")
}

// ---------------------------------------------------------------- P8

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn p8_metrics() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fv = FeatureVector::from_array([0.0; 7]);
    for case in 0..100 {
        // top-n recall
        let n_adv = rng.random_range(1..=30);
        let results: Vec<RankedResult> = (0..n_adv)
            .map(|a| RankedResult {
                advisory_id: format!("A{a}"),
                entries: (0..rng.random_range(1..=40))
                    .map(|i| RankedEntry { sha: format!("s{i}"), probability: 0.0, features: fv, rank_position: i + 1 })
                    .collect(),
            })
            .collect();
        let truths: Vec<BTreeSet<String>> = results
            .iter()
            .map(|r| {
                (0..rng.random_range(1..=3))
                    .map(|_| {
                        if rng.random_bool(0.1) {
                            "outside".to_string()
                        } else {
                            format!("s{}", rng.random_range(0..r.entries.len()))
                        }
                    })
                    .collect()
            })
            .collect();
        let judged: Vec<Judged<'_>> = results.iter().zip(&truths).map(|(result, truth)| Judged { result, truth }).collect();
        for n in [1, 2, 3, 5, 10] {
            let hits = results
                .iter()
                .zip(&truths)
                .filter(|(r, t)| r.entries.iter().take(n).any(|e| t.contains(&e.sha)))
                .count();
            assert_eq!(topn_recall(&judged, n).unwrap(), hits as f64 / n_adv as f64, "case {case} n {n}");
        }

        // precision / recall / F1
        let k = rng.random_range(2..=6);
        let len = rng.random_range(1..=200);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..k) })
            .collect();
        let m = classification_metrics(&preds, &labels, k).unwrap();
        let cm = confusion_matrix(&preds, &labels, k).unwrap();
        let (mut f1s, mut weighted, mut supported) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let tp = preds.iter().zip(&labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
            let fp = preds.iter().zip(&labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
            let fneg = preds.iter().zip(&labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
            let support = labels.iter().filter(|&&l| l == c).count();
            assert_eq!(cm.row_support()[c], support as u64, "confusion row {c}");
            if support == 0 {
                continue;
            }
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = tp / (tp + fneg);
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            f1s += f1;
            supported += 1.0;
            weighted += f1 * support as f64;
        }
        assert!((m.macro_f1 - f1s / supported).abs() < 1e-12, "case {case} macro f1");
        assert!((m.weighted_f1 - weighted / len as f64).abs() < 1e-12, "case {case} weighted f1");

        // ROC AUC with ties
        let len = rng.random_range(2..=150);
        let mut y: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
        y[0] = true;
        y[1] = false;
        let s: Vec<f64> = (0..len).map(|_| (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0).collect();
        let got = roc_auc(&s, &y).unwrap();
        let want = pair_auc(&s, &y);
        assert!((got - want).abs() <= 1e-12, "case {case}: auc {got} vs {want}");
    }

    let published = ConfusionMatrix { counts: vec![vec![4452, 100], vec![209, 704]] };
    let acc = metrics_from_confusion(&published).unwrap().accuracy;
    assert!((acc - 0.9435).abs() <= 5e-4, "accuracy {acc}");
    format!("100 instances exact, published counts give accuracy {acc:.4}")
}

// ---------------------------------------------------------------- P9

struct Server {
    child: Option<Child>,
    args: Vec<String>,
    base: String,
}

impl Server {
    fn start(store: &Path, model: &Path, repos: &Path) -> Server {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let args = vec![
            "serve".to_string(),
            "--port".into(),
            port.to_string(),
            "--store".into(),
            store.display().to_string(),
            "--model".into(),
            model.display().to_string(),
            "--repos".into(),
            repos.display().to_string(),
        ];
        let mut s = Server { child: None, args, base: format!("http://127.0.0.1:{port}") };
        s.spawn();
        s
    }

    fn spawn(&mut self) {
        let child = Command::new(env!("CARGO_BIN_EXE_vfcfinder"))
            .args(&self.args)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .expect("server starts");
        self.child = Some(child);
        let client = reqwest::blocking::Client::new();
        for _ in 0..200 {
            if client.get(format!("{}/health", self.base)).send().is_ok_and(|r| r.status().is_success()) {
                return;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        panic!("server did not come up");
    }

    /// SIGKILL, no chance to flush or shut down.
    fn kill(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.kill();
    }
}

fn request(method: &str, url: &str, body: Option<Value>) -> (u16, Value) {
    let client = reqwest::blocking::Client::new();
    let mut req = match method {
        "GET" => client.get(url),
        _ => client.post(url),
    };
    if let Some(b) = body {
        req = req.header("content-type", "application/json").body(b.to_string());
    }
    let resp = req.send().expect("request sent");
    let status = resp.status().as_u16();
    let text = resp.text().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

fn trained_fixture(dir: &Path) -> (SyntheticCorpus, PathBuf) {
    let cfg = CorpusConfig { advisories: 8, seed: 9, ..CorpusConfig::default() };
    let corpus = generate_corpus(&cfg, &dir.join("repos")).unwrap();
    let items = corpus.mine().unwrap();
    let rows = contiguous_sample(&items, &CweOwaspMap::builtin(), &Providers::reference()).unwrap();
    let all: BTreeSet<String> = items.iter().map(|i| i.advisory.id.clone()).collect();
    let params = RankParams { rounds: 60, learning_rate: 0.1, ..RankParams::default() };
    let model = train_on(&rows, &all, &params).unwrap().model;
    let path = dir.join("model.txt");
    save_model(&model, &path).unwrap();

    // bit-exact round trip
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(model_to_string(&loaded), std::fs::read_to_string(&path).unwrap());
    assert_eq!(loaded.base_score.to_bits(), model.base_score.to_bits());
    for r in &rows {
        let x = r.features.to_array();
        assert_eq!(loaded.predict_array(&x).to_bits(), model.predict_array(&x).to_bits());
    }
    // any edit to the body breaks the checksum
    let text = std::fs::read_to_string(&path).unwrap();
    let at = text.find("\"base_score\"").unwrap() + 15;
    let mut bytes = text.into_bytes();
    bytes[at] = if bytes[at] == b'1' { b'2' } else { b'1' };
    let tampered = dir.join("tampered.txt");
    std::fs::write(&tampered, bytes).unwrap();
    assert!(matches!(load_model(&tampered), Err(ModelIoError::CorruptModel(_))));
    (corpus, path)
}

type Expected = BTreeMap<(String, String), String>;

fn apply(expected: &mut Expected, body: &Value) {
    let records = std::iter::once(&body["record"]).chain(body["side_effects"].as_array().unwrap());
    for r in records {
        let key = (r["advisory_id"].as_str().unwrap().to_string(), r["sha"].as_str().unwrap().to_string());
        expected.insert(key, r["decision"].as_str().unwrap().to_string());
    }
}

fn verify(base: &str, ids: &[String], expected: &Expected) -> usize {
    let mut confirmed = 0;
    for id in ids {
        let (status, body) = request("GET", &format!("{base}/advisories/{id}/candidates?k=100000"), None);
        assert_eq!(status, 200, "{id}: {body}");
        for c in body["candidates"].as_array().unwrap() {
            let sha = c["sha"].as_str().unwrap().to_string();
            let want = expected.get(&(id.clone(), sha.clone())).map_or("pending", String::as_str);
            assert_eq!(c["decision"], want, "{id} {sha}");
            confirmed += usize::from(want == "confirmed");
        }
    }
    let (_, export) = request("GET", &format!("{base}/backfill/export"), None);
    let mut got: BTreeSet<(String, String)> = BTreeSet::new();
    for e in export["entries"].as_array().unwrap() {
        for sha in e["confirmed"].as_array().unwrap() {
            got.insert((e["advisory_id"].as_str().unwrap().to_string(), sha.as_str().unwrap().to_string()));
        }
    }
    let want: BTreeSet<(String, String)> =
        expected.iter().filter(|(_, d)| *d == "confirmed").map(|(k, _)| k.clone()).collect();
    assert_eq!(got, want, "export");
    confirmed
}

fn p9_persistence() -> String {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, model) = trained_fixture(dir.path());
    let store = dir.path().join("store.ndjson");
    let mut server = Server::start(&store, &model, &dir.path().join("repos"));
    let base = server.base.clone();

    let ids: Vec<String> = corpus.items.iter().map(|i| i.advisory.id.clone()).collect();
    for item in &corpus.items {
        let doc: Value = serde_json::from_str(&item.osv).unwrap();
        let (status, body) = request("POST", &format!("{base}/advisories"), Some(doc));
        assert_eq!(status, 201, "{body}");
    }
    let mut candidates: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for id in &ids {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let (status, body) = request("GET", &format!("{base}/advisories/{id}/candidates?k=100000"), None);
            if status == 200 {
                let shas = body["candidates"].as_array().unwrap().iter().map(|c| c["sha"].as_str().unwrap().to_string());
                candidates.insert(id.clone(), shas.collect());
                break;
            }
            assert_eq!(status, 202, "{id}: {body}");
            assert!(Instant::now() < deadline, "ranking {id} timed out");
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut expected = Expected::new();
    let (mut acked, mut restarts) = (0, 0);
    for step in 0..100 {
        if [20, 45, 70, 90].contains(&step) {
            server.kill();
            if step == 45 {
                // a write torn by the crash
                let mut f = std::fs::OpenOptions::new().append(true).open(&store).unwrap();
                f.write_all(br#"{"event":"decision","record":{"advisory_id":"#).unwrap();
            }
            server.spawn();
            restarts += 1;
            verify(&base, &ids, &expected);
        }
        let id = &ids[rng.random_range(0..ids.len())];
        let shas = &candidates[id];
        let sha = &shas[rng.random_range(0..shas.len().min(6))];
        let decision = if rng.random_bool(0.4) { "confirmed" } else { "rejected" };
        let body = json!({
            "decision": decision,
            "reviewer": format!("r{}", step % 3),
            "override": rng.random_bool(0.5),
        });
        let (status, resp) = request("POST", &format!("{base}/advisories/{id}/candidates/{sha}/decision"), Some(body));
        match status {
            200 | 201 => {
                apply(&mut expected, &resp);
                acked += 1;
            }
            409 => assert_eq!(resp["reason"], "conflicting_confirm"),
            _ => panic!("step {step}: {status} {resp}"),
        }
    }
    server.kill();
    server.spawn();
    let confirmed = verify(&base, &ids, &expected);
    assert!(confirmed > 0, "session confirmed nothing");
    format!(
        "model round trip bit-exact, checksum rejects edits; 100-decision session, {acked} acknowledged, \
         {restarts} kill-restarts plus a final one, {confirmed} confirmations all recovered"
    )
}
