//! Synthetic git repositories and advisory corpora for tests and
//! benchmarks. Repositories are written with `git fast-import`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::advisory::{parse_advisory, Advisory, CweOwaspMap, OwaspClass};
use crate::dataset::AdvisoryWindows;
use crate::pipeline::mine;
use crate::window::{GitRepo, WindowError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("git: {0}")]
    Git(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileChange {
    Write { path: String, content: String },
    Delete { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCommit {
    /// Indices of earlier commits; the first is the first parent.
    pub parents: Vec<usize>,
    pub message: String,
    pub changes: Vec<FileChange>,
}

/// A commit graph in topological order plus lightweight tags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynthRepo {
    pub commits: Vec<SynthCommit>,
    pub tags: Vec<(String, usize)>,
}

#[derive(Debug, Clone)]
pub struct BuiltRepo {
    pub repo: GitRepo,
    /// Commit hash per commit index.
    pub shas: Vec<String>,
}

fn git(dir: &Path, args: &[&str]) -> Result<(), SynthError> {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(args)
        .output()
        .map_err(|e| SynthError::Git(e.to_string()))?;
    if !out.status.success() {
        return Err(SynthError::Git(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    Ok(())
}

fn data_block(out: &mut Vec<u8>, text: &str) {
    let _ = writeln!(out, "data {}", text.len());
    out.extend_from_slice(text.as_bytes());
    out.push(b'\n');
}

impl SynthRepo {
    /// Materialize into a fresh repository at `dir`. `main` ends at the last
    /// commit.
    pub fn build(&self, dir: &Path) -> Result<BuiltRepo, SynthError> {
        std::fs::create_dir_all(dir)?;
        git(dir, &["init", "--quiet"])?;
        let mut stream = Vec::new();
        for (i, c) in self.commits.iter().enumerate() {
            assert!(c.parents.iter().all(|&p| p < i), "commits must be topologically ordered");
            let ts = 1_600_000_000 + i as i64 * 60;
            let _ = writeln!(stream, "commit refs/heads/main\nmark :{}", i + 1);
            let _ = writeln!(stream, "author Dev <dev@example.com> {ts} +0000");
            let _ = writeln!(stream, "committer Dev <dev@example.com> {ts} +0000");
            data_block(&mut stream, &c.message);
            match c.parents.first() {
                Some(p) => {
                    let _ = writeln!(stream, "from :{}", p + 1);
                }
                None if i > 0 => {
                    let _ = writeln!(stream, "deleteall");
                }
                None => {}
            }
            for p in c.parents.iter().skip(1) {
                let _ = writeln!(stream, "merge :{}", p + 1);
            }
            for ch in &c.changes {
                match ch {
                    FileChange::Write { path, content } => {
                        let _ = writeln!(stream, "M 100644 inline {path}");
                        data_block(&mut stream, content);
                    }
                    FileChange::Delete { path } => {
                        let _ = writeln!(stream, "D {path}");
                    }
                }
            }
            stream.push(b'\n');
        }
        for (name, idx) in &self.tags {
            let _ = writeln!(stream, "reset refs/tags/{name}\nfrom :{}\n", idx + 1);
        }
        if let Some(last) = self.commits.len().checked_sub(1) {
            let _ = writeln!(stream, "reset refs/heads/main\nfrom :{}\n", last + 1);
        }

        let marks = dir.join(".git").join("synth-marks");
        let mut child = Command::new("git")
            .arg("-C")
            .arg(dir)
            .args(["fast-import", "--quiet", "--force"])
            .arg(format!("--export-marks={}", marks.display()))
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SynthError::Git(e.to_string()))?;
        child.stdin.take().expect("piped").write_all(&stream)?;
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(SynthError::Git(String::from_utf8_lossy(&out.stderr).into_owned()));
        }

        let mut shas = vec![String::new(); self.commits.len()];
        for line in std::fs::read_to_string(&marks)?.lines() {
            if let Some((mark, sha)) = line.strip_prefix(':').and_then(|l| l.split_once(' ')) {
                let m: usize = mark.parse().map_err(|_| SynthError::Git(format!("bad mark {line}")))?;
                shas[m - 1] = sha.trim().to_string();
            }
        }
        let repo = GitRepo::open(dir).map_err(|e| SynthError::Git(e.to_string()))?;
        Ok(BuiltRepo { repo, shas })
    }
}

fn touch(i: usize) -> Vec<FileChange> {
    vec![FileChange::Write {
        path: format!("src/f{}.py", i % 7),
        content: format!("value = {i}\n"),
    }]
}

fn bump(rng: &mut ChaCha8Rng, v: &mut (u32, u32, u32)) {
    match rng.random_range(0..10) {
        0 => *v = (v.0 + 1, 0, 0),
        1..=3 => *v = (v.0, v.1 + 1, 0),
        _ => v.2 += 1,
    }
}

/// A random commit graph with side branches merged back, tagged releases
/// every 1 to 60 commits, occasional pre-release tags and some tags that
/// are not versions.
pub fn random_dag_repo(seed: u64) -> SynthRepo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut repo = SynthRepo::default();
    let prefix = if rng.random_bool(0.5) { "v" } else { "" };
    let mut version = (rng.random_range(0..3), rng.random_range(0..10), 0);
    let releases = rng.random_range(2..7);
    let mut head: Option<usize> = None;
    let add = |repo: &mut SynthRepo, parents: Vec<usize>, msg: String| {
        let i = repo.commits.len();
        repo.commits.push(SynthCommit {
            parents,
            message: msg,
            changes: touch(i),
        });
        i
    };
    for _ in 0..releases {
        let span = rng.random_range(1..=60usize);
        let mut made = 0;
        while made < span {
            let parents: Vec<usize> = head.into_iter().collect();
            let remaining = span - made;
            if remaining >= 3 && head.is_some() && rng.random_bool(0.15) {
                // side branch of 1..=remaining-1 commits, merged back
                let len = rng.random_range(1..remaining.min(6));
                let fork = head.expect("checked");
                let mut side = fork;
                for k in 0..len {
                    side = add(&mut repo, vec![side], format!("side work {k}"));
                }
                // mainline may advance in between
                let mut main = fork;
                if rng.random_bool(0.5) && made + len + 2 <= span {
                    main = add(&mut repo, vec![fork], "mainline change".into());
                    made += 1;
                }
                head = Some(add(&mut repo, vec![main, side], "Merge branch 'side'".into()));
                made += len + 1;
            } else {
                let msg = format!("change {}", repo.commits.len());
                head = Some(add(&mut repo, parents, msg));
                made += 1;
            }
        }
        let at = head.expect("span >= 1");
        bump(&mut rng, &mut version);
        let tag = format!("{prefix}{}.{}.{}", version.0, version.1, version.2);
        if rng.random_bool(0.2) && at > 0 {
            // pre-release candidate one commit earlier on the same line
            let pre = repo.commits[at].parents[0];
            repo.tags.push((format!("{tag}rc1"), pre));
        }
        repo.tags.push((tag, at));
        if rng.random_bool(0.15) {
            repo.tags.push((format!("build-{}", rng.random_range(100..999)), at));
        }
    }
    // a tail of unreleased commits
    for _ in 0..rng.random_range(0..4) {
        head = Some(add(&mut repo, head.into_iter().collect(), "unreleased".into()));
    }
    repo
}

/// Settings for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub advisories: usize,
    pub seed: u64,
    /// Median commits per window.
    pub median_window: f64,
    /// Fraction of fixing commits that mention an advisory id.
    pub id_mention_rate: f64,
    /// Fraction of advisories placed in the same window as another one.
    pub shared_window_rate: f64,
    /// Commits before the prior release.
    pub history: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            advisories: 200,
            seed: 7,
            median_window: 15.0,
            id_mention_rate: 0.10,
            shared_window_rate: 0.05,
            history: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthAdvisory {
    pub advisory: Advisory,
    /// The OSV document the advisory was parsed from.
    pub osv: String,
    pub repo_dir: PathBuf,
    pub vfcs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub items: Vec<SynthAdvisory>,
    pub repos: Vec<PathBuf>,
}

const LANG_EXT: [&str; 9] = ["c", "py", "ts", "js", "php", "java", "rb", "cs", "go"];
const COMPONENTS: [&str; 14] = [
    "parser", "renderer", "session", "upload", "config", "template", "router", "logger", "cache",
    "client", "serializer", "importer", "archive", "mailer",
];
const FIX_WORDS: [&str; 8] = [
    "vulnerability", "security", "exploit", "attacker", "malicious", "bypass", "unsafe", "vulnerable",
];
const CHORES: [&str; 12] = [
    "Update {c} docs",
    "Refactor {c} helpers",
    "Add tests for {c}",
    "Bump dependency versions",
    "Fix typo in README",
    "Improve {c} performance",
    "Rename internal {c} variables",
    "Tidy up {c} module",
    "Add changelog entry",
    "Format {c} sources",
    "Remove unused {c} imports",
    "Document {c} options",
];
const NOISY: [&str; 5] = [
    "Fix crash when {c} is empty",
    "Validate {c} options earlier",
    "Escape newline in {c} output",
    "Plug memory leak in {c}",
    "Add input validation to {c}",
];

/// Keywords of each class for messages and advisory text.
fn class_words(class: OwaspClass) -> &'static [&'static str] {
    match class {
        OwaspClass::A01 => &["traversal", "unauthorized", "permission", "authorization"],
        OwaspClass::A02 => &["crypto", "cipher", "encryption", "tls"],
        OwaspClass::A03 => &["injection", "xss", "sql", "sanitize"],
        OwaspClass::A04 => &["upload", "limit", "design"],
        OwaspClass::A05 => &["xxe", "cors", "config", "header"],
        OwaspClass::A07 => &["authentication", "session", "password", "credential"],
        OwaspClass::A08 => &["deserialization", "pickle", "signature", "integrity"],
        OwaspClass::A09 => &["logging", "audit", "log"],
        OwaspClass::A10 => &["ssrf", "url", "fetch"],
        OwaspClass::A06 | OwaspClass::Other => &["overflow", "denial", "redos", "dos"],
    }
}

fn cwe_for(class: OwaspClass, map: &CweOwaspMap, rng: &mut ChaCha8Rng) -> String {
    if class == OwaspClass::Other {
        let pool: Vec<String> = (1..2000)
            .map(|n| format!("CWE-{n}"))
            .filter(|c| map.get(c).is_none())
            .take(40)
            .collect();
        return pool.choose(rng).expect("unmapped CWEs exist").clone();
    }
    let pool: Vec<String> = (1..2000)
        .map(|n| format!("CWE-{n}"))
        .filter(|c| map.get(c) == Some(class))
        .collect();
    pool.choose(rng).expect("class has CWEs").clone()
}

fn ghsa_id(rng: &mut ChaCha8Rng) -> String {
    const ALPHA: &[u8] = b"23456789cfghjmpqrvwx";
    let mut part = |n: usize| -> String {
        (0..n).map(|_| ALPHA[rng.random_range(0..ALPHA.len())] as char).collect()
    };
    format!("GHSA-{}-{}-{}", part(4), part(4), part(4))
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty")
}

struct Planted {
    id: String,
    cve: String,
    class: OwaspClass,
    component: &'static str,
    type_word: &'static str,
    ext: &'static str,
}

/// Corpus of advisories, each with a repository whose fixed release window
/// contains its fixing commit. Windows follow a log-normal size around
/// `median_window`; the fix position `r / total` follows Beta(2, 1)
/// (mean 2/3).
pub fn generate_corpus(cfg: &CorpusConfig, root: &Path) -> Result<SyntheticCorpus, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map = CweOwaspMap::builtin();
    let size_noise: Normal<f64> = Normal::new(0.0, 0.55).expect("valid");
    let classes: Vec<(OwaspClass, u32)> = crate::type_score::CLASS_COUNTS
        .iter()
        .copied()
        .filter(|(_, n)| *n > 0)
        .collect();
    let total_weight: u32 = classes.iter().map(|(_, n)| n).sum();

    let mut items = Vec::new();
    let mut repos = Vec::new();
    let mut next = 0;
    let mut repo_no = 0;
    while next < cfg.advisories {
        let group = if next + 1 < cfg.advisories && rng.random_bool(cfg.shared_window_rate) { 2 } else { 1 };
        let ext = pick(&mut rng, &LANG_EXT);
        let mut planted = Vec::new();
        for _ in 0..group {
            let mut roll = rng.random_range(0..total_weight);
            let mut class = OwaspClass::Other;
            for (c, n) in &classes {
                if roll < *n {
                    class = *c;
                    break;
                }
                roll -= n;
            }
            let component = loop {
                let c = pick(&mut rng, &COMPONENTS);
                if planted.iter().all(|p: &Planted| p.component != c) {
                    break c;
                }
            };
            planted.push(Planted {
                id: ghsa_id(&mut rng),
                cve: format!("CVE-2023-{}", rng.random_range(10000..99999)),
                class,
                component,
                type_word: pick(&mut rng, class_words(class)),
                ext,
            });
        }

        let w = ((cfg.median_window * size_noise.sample(&mut rng).exp()).round() as usize).clamp(group + 1, 80);
        let mut fix_ranks: Vec<usize> = Vec::new();
        while fix_ranks.len() < group {
            let u: f64 = rng.random::<f64>().sqrt();
            let r = ((u * w as f64).ceil() as usize).clamp(1, w);
            if !fix_ranks.contains(&r) {
                fix_ranks.push(r);
            }
        }

        let minor = rng.random_range(1..20);
        let prefix = if rng.random_bool(0.5) { "v" } else { "" };
        let prior = format!("{prefix}1.{minor}.0");
        let fixed_version = format!("1.{minor}.1");
        let fixed_tag = format!("{prefix}{fixed_version}");

        let mut repo = SynthRepo::default();
        let mut files: BTreeMap<String, String> = BTreeMap::new();
        let commit = |repo: &mut SynthRepo, files: &mut BTreeMap<String, String>, msg: String, path: String, line: String| {
            let body = files.entry(path.clone()).or_default();
            body.push_str(&line);
            body.push('\n');
            let parents = repo.commits.len().checked_sub(1).into_iter().collect();
            repo.commits.push(SynthCommit {
                parents,
                message: msg,
                changes: vec![FileChange::Write {
                    path,
                    content: body.clone(),
                }],
            });
            repo.commits.len() - 1
        };
        let chore = |rng: &mut ChaCha8Rng, repo: &mut SynthRepo, files: &mut BTreeMap<String, String>| {
            let c = pick(rng, &COMPONENTS);
            if rng.random_bool(0.03) {
                // strong words, but only in documentation
                let msg = format!("Document {c} security policy and vulnerability reporting");
                let line = format!("Report vulnerabilities privately ({})", rng.random_range(0..100_000));
                return commit(repo, files, msg, "SECURITY.md".to_string(), line);
            }
            let noisy = rng.random_bool(0.08);
            let template = if noisy { pick(rng, &NOISY) } else { pick(rng, &CHORES) };
            let msg = template.replace("{c}", c);
            let path = match rng.random_range(0..10) {
                0..=5 => format!("src/{c}.{ext}"),
                6 | 7 => format!("tests/test_{c}.{ext}"),
                _ => "README.md".to_string(),
            };
            let line = format!("// {} {}", c, rng.random_range(0..100_000));
            commit(repo, files, msg, path, line)
        };

        for k in 0..cfg.history {
            let i = chore(&mut rng, &mut repo, &mut files);
            if k == cfg.history / 2 {
                repo.tags.push((format!("{prefix}1.{}.0", minor - 1), i));
            }
        }
        let prior_at = repo.commits.len() - 1;
        repo.tags.push((prior.clone(), prior_at));
        let mut vfc_index = vec![0; group];
        for r in 1..=w {
            let i = if let Some(g) = fix_ranks.iter().position(|&x| x == r) {
                let p = &planted[g];
                let mut msg = format!(
                    "{} {} {} in {}",
                    pick(&mut rng, &["Fix", "Prevent", "Patch", "Block"]),
                    p.type_word,
                    pick(&mut rng, &FIX_WORDS),
                    p.component
                );
                if rng.random_bool(cfg.id_mention_rate) {
                    let id = if rng.random_bool(0.5) { &p.id } else { &p.cve };
                    let _ = write!(msg, "\n\nFixes {id}");
                }
                let line = format!(
                    "    value = sanitize(value)  # {} {} guard",
                    p.type_word,
                    pick(&mut rng, &["security", "attack", "exploit"])
                );
                commit(&mut repo, &mut files, msg, format!("src/{}.{}", p.component, p.ext), line)
            } else {
                chore(&mut rng, &mut repo, &mut files)
            };
            if let Some(g) = fix_ranks.iter().position(|&x| x == r) {
                vfc_index[g] = i;
            }
        }
        let fixed_at = repo.commits.len() - 1;
        repo.tags.push((fixed_tag.clone(), fixed_at));
        for _ in 0..3 {
            chore(&mut rng, &mut repo, &mut files);
        }

        let pkg = format!("synth-pkg-{repo_no}");
        let dir = root.join("synth").join(&pkg);
        let built = repo.build(&dir)?;
        for (g, p) in planted.iter().enumerate() {
            let title = format!("{} issue in {} {}", p.type_word, pkg, p.component);
            let details = format!(
                "An attacker can abuse the {} {} handling in {pkg}. Versions before {fixed_version} are affected.",
                p.component, p.type_word
            );
            let doc = json!({
                "id": p.id,
                "aliases": [p.cve],
                "summary": title,
                "details": details,
                "published": "2023-05-01T00:00:00Z",
                "database_specific": { "cwe_ids": [cwe_for(p.class, &map, &mut rng)] },
                "affected": [{
                    "package": { "ecosystem": "PyPI", "name": pkg },
                    "ranges": [{ "type": "ECOSYSTEM", "events": [{ "introduced": "0" }, { "fixed": fixed_version }] }]
                }],
                "references": [
                    { "type": "PACKAGE", "url": format!("https://github.com/synth/{pkg}") },
                    { "type": "FIX", "url": format!("https://github.com/synth/{pkg}/commit/{}", built.shas[vfc_index[g]]) }
                ]
            })
            .to_string();
            let advisory = parse_advisory(&doc).expect("generated advisory parses");
            items.push(SynthAdvisory {
                advisory,
                osv: doc,
                repo_dir: dir.clone(),
                vfcs: vec![built.shas[vfc_index[g]].clone()],
            });
        }
        repos.push(dir);
        repo_no += 1;
        next += group;
    }
    Ok(SyntheticCorpus { items, repos })
}

impl SyntheticCorpus {
    /// One `<id>.json` OSV document per advisory.
    pub fn write_osv_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for item in &self.items {
            std::fs::write(dir.join(format!("{}.json", item.advisory.id)), &item.osv)?;
        }
        Ok(())
    }

    /// Windows of every advisory with its planted fixes as ground truth.
    pub fn mine(&self) -> Result<Vec<AdvisoryWindows>, WindowError> {
        let mut repos: BTreeMap<&Path, GitRepo> = BTreeMap::new();
        let mut out = Vec::new();
        for item in &self.items {
            let repo = match repos.get(item.repo_dir.as_path()) {
                Some(r) => r,
                None => {
                    let r = GitRepo::open(&item.repo_dir)?;
                    repos.entry(item.repo_dir.as_path()).or_insert(r)
                }
            };
            let mined = mine(&item.advisory, repo)?;
            if let Some((_, e)) = mined.failures.into_iter().next() {
                return Err(e);
            }
            out.push(AdvisoryWindows {
                advisory: item.advisory.clone(),
                windows: mined.windows,
                vfcs: item.vfcs.iter().cloned().collect(),
            });
        }
        Ok(out)
    }
}
