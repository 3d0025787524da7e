//! Recovery of missing source-repository links from package registries.
//!
//! Two strategies sit behind [`resolve_source_url`]: a generic project-links
//! page scan (PyPI and registries that render project links the same way)
//! and the Maven search-then-POM lookup. All traffic goes through a
//! [`Fetch`] implementation so tests can replay recorded responses.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{LazyLock, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::Deserialize;
use sha2::{Digest, Sha256};

/// Maven Central search API, as used for group/artifact lookup.
pub const MAVEN_SEARCH_TEMPLATE: &str =
    "https://search.maven.org/solrsearch/select?q={groupId}+AND+a:{artifactId}&rows=10&wt=json";
/// POM retrieval for a resolved version.
pub const MAVEN_POM_TEMPLATE: &str =
    "https://search.maven.org/remotecontent?filepath={groupPath}/{artifactId}/{version}/{artifactId}-{version}.pom";

/// Minimum spacing between live registry requests.
pub const LIVE_MIN_INTERVAL: Duration = Duration::from_millis(250);

static GITHUB_LINK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)github\.com[/:]([A-Za-z0-9][A-Za-z0-9-]*)/([A-Za-z0-9._-]+)").unwrap()
});
static SCM_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<scm>(.*?)</scm>").unwrap());

/// First path segments on github.com that are not repository owners.
const RESERVED_OWNERS: &[&str] = &[
    "about", "advisories", "apps", "collections", "contact", "enterprise", "explore",
    "features", "login", "marketplace", "orgs", "pricing", "security", "settings", "site",
    "sponsors", "topics", "users",
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("no repository link found")]
    NotFound,
    #[error("registry unreachable: {0}")]
    RegistryUnreachable(String),
    #[error("multiple distinct repository links: {0:?}")]
    AmbiguousMatch(Vec<String>),
    #[error("invalid registry query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, thiserror::Error)]
#[error("fetch of {url} failed: {reason}")]
pub struct FetchError {
    pub url: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResponse {
    pub status: u16,
    pub body: String,
}

/// HTTP GET capability injected into the resolver.
pub trait Fetch {
    fn get(&self, url: &str) -> Result<FetchResponse, FetchError>;
}

impl<F: Fetch + ?Sized> Fetch for &F {
    fn get(&self, url: &str) -> Result<FetchResponse, FetchError> {
        (**self).get(url)
    }
}

/// Recorded responses in a directory, one file per URL named by the
/// lowercase hex SHA-256 of the URL. Unknown URLs answer 404.
#[derive(Debug, Clone)]
pub struct FixtureFetch {
    dir: PathBuf,
}

impl FixtureFetch {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureFetch { dir: dir.into() }
    }

    pub fn key(url: &str) -> String {
        hex::encode(Sha256::digest(url.as_bytes()))
    }

    pub fn path_for(&self, url: &str) -> PathBuf {
        self.dir.join(Self::key(url))
    }
}

impl Fetch for FixtureFetch {
    fn get(&self, url: &str) -> Result<FetchResponse, FetchError> {
        match std::fs::read_to_string(self.path_for(url)) {
            Ok(body) => Ok(FetchResponse { status: 200, body }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(FetchResponse {
                status: 404,
                body: String::new(),
            }),
            Err(e) => Err(FetchError {
                url: url.to_string(),
                reason: e.to_string(),
            }),
        }
    }
}

/// Wraps a fetcher so consecutive calls are at least `interval` apart.
pub struct RateLimited<F> {
    inner: F,
    interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl<F: Fetch> RateLimited<F> {
    pub fn new(inner: F, interval: Duration) -> Self {
        RateLimited {
            inner,
            interval,
            last: Mutex::new(None),
        }
    }
}

impl<F: Fetch> Fetch for RateLimited<F> {
    fn get(&self, url: &str) -> Result<FetchResponse, FetchError> {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.interval {
                std::thread::sleep(self.interval - elapsed);
            }
        }
        let result = self.inner.get(url);
        *last = Some(Instant::now());
        result
    }
}

/// Registries whose package pages list project links.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registry {
    PyPi,
    Npm,
    RubyGems,
    Packagist,
    NuGet,
    CratesIo,
}

impl Registry {
    pub fn page_template(self) -> &'static str {
        match self {
            Registry::PyPi => "https://pypi.org/project/{name}/",
            Registry::Npm => "https://www.npmjs.com/package/{name}",
            Registry::RubyGems => "https://rubygems.org/gems/{name}",
            Registry::Packagist => "https://packagist.org/packages/{name}",
            Registry::NuGet => "https://www.nuget.org/packages/{name}",
            Registry::CratesIo => "https://crates.io/crates/{name}",
        }
    }

    /// Links every page of the registry carries (site chrome, not projects).
    fn self_links(self) -> &'static [&'static str] {
        match self {
            Registry::PyPi => &["pypi/warehouse", "pypa/warehouse"],
            Registry::Npm => &["npm/cli", "npm/www"],
            Registry::RubyGems => &["rubygems/rubygems.org"],
            Registry::Packagist => &["composer/packagist"],
            Registry::NuGet => &["nuget/nugetgallery"],
            Registry::CratesIo => &["rust-lang/crates.io"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ecosystem {
    PyPiLike(Registry),
    Maven,
}

impl FromStr for Ecosystem {
    type Err = ResolveError;

    /// Accepts OSV ecosystem names, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "pypi" => Ecosystem::PyPiLike(Registry::PyPi),
            "npm" => Ecosystem::PyPiLike(Registry::Npm),
            "rubygems" => Ecosystem::PyPiLike(Registry::RubyGems),
            "packagist" => Ecosystem::PyPiLike(Registry::Packagist),
            "nuget" => Ecosystem::PyPiLike(Registry::NuGet),
            "crates.io" | "cargo" => Ecosystem::PyPiLike(Registry::CratesIo),
            "maven" => Ecosystem::Maven,
            other => return Err(ResolveError::InvalidQuery(format!("unsupported ecosystem {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryQuery {
    ecosystem: Ecosystem,
    package: String,
}

impl RegistryQuery {
    /// Maven packages must be `groupId:artifactId`.
    pub fn new(ecosystem: Ecosystem, package: impl Into<String>) -> Result<Self, ResolveError> {
        let package = package.into().trim().to_string();
        if package.is_empty() {
            return Err(ResolveError::InvalidQuery("empty package name".into()));
        }
        if ecosystem == Ecosystem::Maven {
            let parts: Vec<&str> = package.split(':').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.trim().is_empty()) {
                return Err(ResolveError::InvalidQuery(format!(
                    "maven package {package:?} is not groupId:artifactId"
                )));
            }
        }
        Ok(RegistryQuery { ecosystem, package })
    }

    pub fn ecosystem(&self) -> Ecosystem {
        self.ecosystem
    }

    pub fn package(&self) -> &str {
        &self.package
    }
}

impl fmt::Display for RegistryQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.ecosystem, self.package)
    }
}

/// Reduce any GitHub-style link (https, git://, scm:git:, ssh) to
/// `https://github.com/<owner>/<repo>` with no `.git` or trailing slash.
pub fn github_repo_root(url: &str) -> Option<String> {
    let caps = GITHUB_LINK.captures(url)?;
    let owner = caps.get(1)?.as_str();
    if RESERVED_OWNERS.iter().any(|r| r.eq_ignore_ascii_case(owner)) {
        return None;
    }
    let mut repo = caps.get(2)?.as_str();
    repo = repo.strip_suffix(".git").unwrap_or(repo);
    repo = repo.trim_end_matches('.');
    if repo.is_empty() {
        return None;
    }
    Some(format!("https://github.com/{owner}/{repo}"))
}

fn distinct_repo_links<'a>(
    text: &str,
    exclude: impl Fn(&str) -> bool + 'a,
) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for m in GITHUB_LINK.find_iter(text) {
        let Some(root) = github_repo_root(m.as_str()) else {
            continue;
        };
        let slug = root.trim_start_matches("https://github.com/").to_ascii_lowercase();
        if exclude(&slug) {
            continue;
        }
        if !out.iter().any(|o| o.eq_ignore_ascii_case(&root)) {
            out.push(root);
        }
    }
    out
}

fn single_link(links: Vec<String>) -> Result<String, ResolveError> {
    match links.len() {
        0 => Err(ResolveError::NotFound),
        1 => Ok(links.into_iter().next().unwrap()),
        _ => Err(ResolveError::AmbiguousMatch(links)),
    }
}

fn get_ok(fetch: &dyn Fetch, url: &str) -> Result<Option<String>, ResolveError> {
    let resp = fetch
        .get(url)
        .map_err(|e| ResolveError::RegistryUnreachable(e.to_string()))?;
    match resp.status {
        200..=299 => Ok(Some(resp.body)),
        404 | 410 => Ok(None),
        status => Err(ResolveError::RegistryUnreachable(format!(
            "{url} answered HTTP {status}"
        ))),
    }
}

/// Find the source repository for a registry package.
pub fn resolve_source_url(q: &RegistryQuery, fetch: &dyn Fetch) -> Result<String, ResolveError> {
    match q.ecosystem {
        Ecosystem::PyPiLike(registry) => resolve_project_links(registry, &q.package, fetch),
        Ecosystem::Maven => resolve_maven(&q.package, fetch),
    }
}

fn resolve_project_links(
    registry: Registry,
    name: &str,
    fetch: &dyn Fetch,
) -> Result<String, ResolveError> {
    let url = registry.page_template().replace("{name}", name);
    let body = get_ok(fetch, &url)?.ok_or(ResolveError::NotFound)?;
    let links = distinct_repo_links(&body, |slug| registry.self_links().contains(&slug));
    single_link(links)
}

#[derive(Deserialize)]
struct MavenSearch {
    response: MavenResponse,
}

#[derive(Deserialize)]
struct MavenResponse {
    #[serde(default)]
    docs: Vec<MavenDoc>,
}

#[derive(Deserialize)]
struct MavenDoc {
    g: String,
    a: String,
    #[serde(rename = "latestVersion")]
    latest_version: Option<String>,
    v: Option<String>,
}

pub fn maven_search_url(group: &str, artifact: &str) -> String {
    MAVEN_SEARCH_TEMPLATE
        .replace("{groupId}", group)
        .replace("{artifactId}", artifact)
}

pub fn maven_pom_url(group: &str, artifact: &str, version: &str) -> String {
    MAVEN_POM_TEMPLATE
        .replace("{groupPath}", &group.replace('.', "/"))
        .replace("{artifactId}", artifact)
        .replace("{version}", version)
}

fn resolve_maven(package: &str, fetch: &dyn Fetch) -> Result<String, ResolveError> {
    let (group, artifact) = package
        .split_once(':')
        .ok_or_else(|| ResolveError::InvalidQuery(package.to_string()))?;
    let search = get_ok(fetch, &maven_search_url(group, artifact))?.ok_or(ResolveError::NotFound)?;
    let parsed: MavenSearch = serde_json::from_str(&search).map_err(|e| {
        ResolveError::RegistryUnreachable(format!("unreadable maven search response: {e}"))
    })?;
    let version = parsed
        .response
        .docs
        .into_iter()
        .find(|d| d.g == group && d.a == artifact)
        .and_then(|d| d.latest_version.or(d.v))
        .ok_or(ResolveError::NotFound)?;
    let pom = get_ok(fetch, &maven_pom_url(group, artifact, &version))?
        .ok_or(ResolveError::NotFound)?;
    let scm = SCM_BLOCK
        .captures(&pom)
        .and_then(|c| c.get(1))
        .ok_or(ResolveError::NotFound)?;
    single_link(distinct_repo_links(scm.as_str(), |_| false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct MapFetch(HashMap<String, FetchResponse>);

    impl Fetch for MapFetch {
        fn get(&self, url: &str) -> Result<FetchResponse, FetchError> {
            Ok(self.0.get(url).cloned().unwrap_or(FetchResponse {
                status: 404,
                body: String::new(),
            }))
        }
    }

    struct Down;

    impl Fetch for Down {
        fn get(&self, url: &str) -> Result<FetchResponse, FetchError> {
            Err(FetchError {
                url: url.into(),
                reason: "connection refused".into(),
            })
        }
    }

    fn ok(body: &str) -> FetchResponse {
        FetchResponse {
            status: 200,
            body: body.into(),
        }
    }

    #[test]
    fn normalizes_scm_forms() {
        for raw in [
            "scm:git:git://github.com/spring-projects/spring-security.git",
            "scm:git:https://github.com/spring-projects/spring-security",
            "https://github.com/spring-projects/spring-security/",
            "git@github.com:spring-projects/spring-security.git",
            "http://GitHub.com/spring-projects/spring-security/tree/main",
        ] {
            assert_eq!(
                github_repo_root(raw).as_deref(),
                Some("https://github.com/spring-projects/spring-security"),
                "{raw}"
            );
        }
        assert_eq!(github_repo_root("https://github.com/advisories/GHSA-x"), None);
        assert_eq!(github_repo_root("https://gitlab.com/a/b"), None);
    }

    #[test]
    fn maven_query_shape() {
        assert!(RegistryQuery::new(Ecosystem::Maven, "a.b:c").is_ok());
        assert!(RegistryQuery::new(Ecosystem::Maven, "a.b").is_err());
        assert!(RegistryQuery::new(Ecosystem::Maven, "a:b:c").is_err());
        assert!(RegistryQuery::new(Ecosystem::Maven, ":c").is_err());
    }

    #[test]
    fn url_templates() {
        assert_eq!(
            maven_search_url("org.springframework.security", "spring-security-core"),
            "https://search.maven.org/solrsearch/select?q=org.springframework.security+AND+a:spring-security-core&rows=10&wt=json"
        );
        assert_eq!(
            maven_pom_url("org.springframework.security", "spring-security-core", "6.0.1"),
            "https://search.maven.org/remotecontent?filepath=org/springframework/security/spring-security-core/6.0.1/spring-security-core-6.0.1.pom"
        );
    }

    #[test]
    fn ambiguous_and_self_links() {
        let page = r#"<a href="https://github.com/a/one">Source</a>
            <a href="https://github.com/a/one/issues">Issues</a>
            <a href="https://github.com/pypi/warehouse">footer</a>"#;
        let f = MapFetch(HashMap::from([("https://pypi.org/project/one/".into(), ok(page))]));
        let q = RegistryQuery::new(Ecosystem::PyPiLike(Registry::PyPi), "one").unwrap();
        assert_eq!(resolve_source_url(&q, &f).unwrap(), "https://github.com/a/one");

        let page = r#"https://github.com/a/one https://github.com/b/two"#;
        let f = MapFetch(HashMap::from([("https://pypi.org/project/one/".into(), ok(page))]));
        assert!(matches!(
            resolve_source_url(&q, &f),
            Err(ResolveError::AmbiguousMatch(v)) if v.len() == 2
        ));
    }

    #[test]
    fn transport_failure_and_server_errors() {
        let q = RegistryQuery::new(Ecosystem::PyPiLike(Registry::PyPi), "x").unwrap();
        assert!(matches!(
            resolve_source_url(&q, &Down),
            Err(ResolveError::RegistryUnreachable(_))
        ));
        let f = MapFetch(HashMap::from([(
            "https://pypi.org/project/x/".into(),
            FetchResponse {
                status: 503,
                body: String::new(),
            },
        )]));
        assert!(matches!(
            resolve_source_url(&q, &f),
            Err(ResolveError::RegistryUnreachable(_))
        ));
    }

    #[test]
    fn maven_requires_matching_coordinates() {
        let search = r#"{"response":{"docs":[{"g":"other","a":"core","latestVersion":"1.0"}]}}"#;
        let f = MapFetch(HashMap::from([(maven_search_url("g", "core"), ok(search))]));
        let q = RegistryQuery::new(Ecosystem::Maven, "g:core").unwrap();
        assert_eq!(resolve_source_url(&q, &f), Err(ResolveError::NotFound));
    }

    #[test]
    fn pom_without_scm_is_not_found() {
        let search = r#"{"response":{"docs":[{"g":"g","a":"core","latestVersion":"1.0"}]}}"#;
        let pom = "<project><url>https://github.com/x/y</url></project>";
        let f = MapFetch(HashMap::from([
            (maven_search_url("g", "core"), ok(search)),
            (maven_pom_url("g", "core", "1.0"), ok(pom)),
        ]));
        let q = RegistryQuery::new(Ecosystem::Maven, "g:core").unwrap();
        assert_eq!(resolve_source_url(&q, &f), Err(ResolveError::NotFound));
    }

    #[test]
    fn rate_limit_spaces_calls() {
        let f = RateLimited::new(MapFetch(HashMap::new()), Duration::from_millis(40));
        let start = Instant::now();
        for _ in 0..3 {
            f.get("https://example.invalid/").unwrap();
        }
        assert!(start.elapsed() >= Duration::from_millis(80));
    }

    #[test]
    fn ecosystem_names() {
        assert_eq!("PyPI".parse::<Ecosystem>().unwrap(), Ecosystem::PyPiLike(Registry::PyPi));
        assert_eq!("Maven".parse::<Ecosystem>().unwrap(), Ecosystem::Maven);
        assert!("Hackage".parse::<Ecosystem>().is_err());
    }
}
