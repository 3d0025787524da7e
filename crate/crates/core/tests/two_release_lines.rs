//! An advisory fixed on two maintained release lines yields one window and
//! one fixing commit per line.

use std::collections::BTreeSet;
use std::path::PathBuf;

use vfcfinder_core::advisory::owasp_class_of;
use vfcfinder_core::dataset::{contiguous_sample, AdvisoryWindows};
use vfcfinder_core::pipeline::{context, mine, rank_advisory, Ensemble};
use vfcfinder_core::ranker::RankModel;
use vfcfinder_core::synthetic::{FileChange, SynthCommit, SynthRepo};
use vfcfinder_core::{parse_advisory, CweOwaspMap, OwaspClass, Providers};

fn osv() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/osv/GHSA-h47x-2j37-fw5m.json");
    std::fs::read_to_string(path).unwrap()
}

fn commit(parent: Option<usize>, msg: &str, path: &str, body: &str) -> SynthCommit {
    SynthCommit {
        parents: parent.into_iter().collect(),
        message: msg.into(),
        changes: vec![FileChange::Write {
            path: path.into(),
            content: body.into(),
        }],
    }
}

/// 0..=2 shared history, 8.2 line branches at 1, 9.4 line continues from 2.
fn repo() -> (SynthRepo, [usize; 2]) {
    let mut r = SynthRepo::default();
    r.commits.push(commit(None, "Initial import", "src/Server.java", "class Server {}\n"));
    r.commits.push(commit(Some(0), "Add error pages", "src/Error.java", "class Error {}\n"));
    r.commits.push(commit(Some(1), "Start 9.x development", "src/Server.java", "class Server { int v = 9; }\n"));
    // 8.2 line
    r.commits.push(commit(Some(1), "Backport connector tweaks", "src/Conn.java", "class Conn {}\n"));
    r.commits.push(commit(
        Some(3),
        "Fix security vulnerability: do not leak internal paths in error page",
        "src/Error.java",
        "class Error { String render() { return escape(msg); } }\n",
    ));
    // 9.4 line
    r.commits.push(commit(Some(2), "Update docs", "README.md", "docs\n"));
    r.commits.push(commit(
        Some(5),
        "Fix security vulnerability: error page leaks internal paths",
        "src/Error.java",
        "class Error { String render() { return escape(msg); } int v = 9; }\n",
    ));
    r.commits.push(commit(Some(6), "Tidy imports", "src/Server.java", "class Server { int v = 9; }\n// tidy\n"));
    r.tags = vec![
        ("v8.2.11".into(), 1),
        ("v8.2.12".into(), 4),
        ("v9.4.16".into(), 2),
        ("v9.4.17".into(), 7),
    ];
    (r, [4, 6])
}

#[test]
fn fixture_parses_with_two_fixed_versions() {
    let a = parse_advisory(&osv()).unwrap();
    assert_eq!(a.id, "GHSA-h47x-2j37-fw5m");
    assert_eq!(a.fixed_versions, vec!["9.4.17".to_string(), "8.2.12".to_string()]);
    assert_eq!(a.repo_url, None);
    assert_eq!(owasp_class_of(&a, &CweOwaspMap::builtin()), OwaspClass::A01);
    assert_eq!(parse_advisory(&a.to_osv().to_string()).unwrap(), a);
}

#[test]
fn each_release_line_contributes_its_fix() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, fixes) = repo();
    let built = spec.build(dir.path()).unwrap();
    let advisory = parse_advisory(&osv()).unwrap();
    let mined = mine(&advisory, &built.repo).unwrap();
    assert!(mined.failures.is_empty(), "{:?}", mined.failures);
    assert_eq!(mined.windows.len(), 2);
    let shas = |w: usize| -> Vec<&str> { mined.windows[w].commits.iter().map(|c| c.sha.as_str()).collect() };
    assert_eq!(shas(0), vec![&built.shas[5], &built.shas[6], &built.shas[7]]);
    assert_eq!(shas(1), vec![&built.shas[3], &built.shas[4]]);

    let vfcs: BTreeSet<String> = fixes.iter().map(|&i| built.shas[i].clone()).collect();
    let item = AdvisoryWindows {
        advisory: advisory.clone(),
        windows: mined.windows.clone(),
        vfcs: vfcs.clone(),
    };
    let map = CweOwaspMap::builtin();
    let providers = Providers::reference();
    let rows = contiguous_sample(std::slice::from_ref(&item), &map, &providers).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().filter(|r| r.label).count(), 2);

    // an untrained model still orders by the tie rules; the fixes carry the
    // highest scorer output so a model over that feature puts them first
    let ctx = context(&advisory, &map, &providers).unwrap();
    let ranked = rank_advisory(&Ensemble::single(RankModel::constant(0.0)), &ctx, &mined.windows, &providers).unwrap();
    assert_eq!(ranked.entries.len(), 5);
    let mut by_prob: Vec<_> = rows.iter().collect();
    by_prob.sort_by(|a, b| b.features.vfc_probability.total_cmp(&a.features.vfc_probability));
    let top2: BTreeSet<String> = by_prob[..2].iter().map(|r| r.sha.clone()).collect();
    assert_eq!(top2, vfcs);
}
