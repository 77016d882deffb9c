use std::collections::BTreeMap;

use candle_core::Tensor;

use super::config::SiteId;
use crate::error::{Error, Result};

/// Subject hidden states captured at the delivery sites of one extraction
/// pass. A site listed in `sites` without an entry delivers nothing (∅).
#[derive(Debug, Clone)]
pub struct SignatureCache {
    sites: Vec<SiteId>,
    entries: BTreeMap<SiteId, Tensor>,
    timesteps: Vec<usize>,
}

impl SignatureCache {
    pub fn new(sites: Vec<SiteId>, timesteps: Vec<usize>) -> Self {
        Self {
            sites,
            entries: BTreeMap::new(),
            timesteps,
        }
    }

    pub fn insert(&mut self, site: SiteId, hidden: Tensor) -> Result<()> {
        if !self.sites.contains(&site) {
            return Err(Error::CacheSiteMismatch(format!("{site} is not a delivery site")));
        }
        self.entries.insert(site, hidden);
        Ok(())
    }

    pub fn get(&self, site: &SiteId) -> Option<&Tensor> {
        self.entries.get(site)
    }

    pub fn remove(&mut self, site: &SiteId) -> Option<Tensor> {
        self.entries.remove(site)
    }

    pub fn sites(&self) -> &[SiteId] {
        &self.sites
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn delivered(&self) -> impl Iterator<Item = (&SiteId, &Tensor)> {
        self.entries.iter()
    }

    pub fn num_delivered(&self) -> usize {
        self.entries.len()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.sites.len()
    }

    /// Same sites and timesteps, nothing delivered.
    pub fn emptied(&self) -> Self {
        Self::new(self.sites.clone(), self.timesteps.clone())
    }

    /// Checks the cache against the consumer's delivery sites and timesteps.
    pub fn check(&self, sites: &[SiteId], timesteps: &[usize]) -> Result<()> {
        if self.sites != sites {
            let show = |s: &[SiteId]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            return Err(Error::CacheSiteMismatch(format!(
                "cache sites [{}], model sites [{}]",
                show(&self.sites),
                show(sites)
            )));
        }
        if self.timesteps != timesteps {
            return Err(Error::CacheTimestepMismatch {
                cached: self.timesteps.clone(),
                consumed: timesteps.to_vec(),
            });
        }
        Ok(())
    }
}
