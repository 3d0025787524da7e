//! Registry access over HTTPS.

use std::time::Duration;

use vfcfinder_core::resolver::{Fetch, FetchError, FetchResponse, RateLimited, LIVE_MIN_INTERVAL};

pub struct LiveFetch {
    client: reqwest::blocking::Client,
}

impl LiveFetch {
    pub fn new() -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .user_agent(concat!("vfcfinder/", env!("CARGO_PKG_VERSION")))
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| FetchError {
                url: String::new(),
                reason: e.to_string(),
            })?;
        Ok(LiveFetch { client })
    }

    /// Live access spaced out to stay polite to the registries.
    pub fn polite() -> Result<RateLimited<LiveFetch>, FetchError> {
        Ok(RateLimited::new(LiveFetch::new()?, LIVE_MIN_INTERVAL))
    }
}

impl Fetch for LiveFetch {
    fn get(&self, url: &str) -> Result<FetchResponse, FetchError> {
        let fail = |e: reqwest::Error| FetchError {
            url: url.to_string(),
            reason: e.to_string(),
        };
        let resp = self.client.get(url).send().map_err(fail)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(fail)?;
        Ok(FetchResponse { status, body })
    }
}
