use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Occupation numbers `(η_{x_1}, …, η_{x_L})`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(Vec<u64>);

impl Configuration {
    pub fn new(occupancy: Vec<u64>) -> Result<Self> {
        if occupancy.is_empty() {
            return Err(domain!("a configuration needs at least one site"));
        }
        Ok(Configuration(occupancy))
    }

    pub fn zeros(l: usize) -> Result<Self> {
        Self::new(vec![0; l])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total particle number `S_L`.
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [u64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<u64> {
        self.0
    }
}

impl std::ops::Index<usize> for Configuration {
    type Output = u64;
    fn index(&self, i: usize) -> &u64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<u64>> for Configuration {
    type Error = crate::error::Error;
    fn try_from(v: Vec<u64>) -> Result<Self> {
        Self::new(v)
    }
}

impl std::fmt::Display for Configuration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}
