use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{make_bandit_mu, make_chain, make_gridworld, make_random_mdp, FiniteEnv, FiniteMdp, MdpError};

/// Built-in environments, selectable by string id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    #[serde(rename = "gridworld5")]
    Gridworld5,
    #[serde(rename = "chain")]
    Chain,
    #[serde(rename = "pointmass")]
    PointMass,
    #[serde(rename = "bandit-mu")]
    BanditMu,
    #[serde(rename = "random-mdp")]
    RandomMdp,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown environment `{given}`{}", .suggestion.as_ref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default())]
pub struct UnknownEnv {
    pub given: String,
    pub suggestion: Option<&'static str>,
}

impl EnvId {
    pub const ALL: [EnvId; 5] = [
        EnvId::Gridworld5,
        EnvId::Chain,
        EnvId::PointMass,
        EnvId::BanditMu,
        EnvId::RandomMdp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Gridworld5 => "gridworld5",
            EnvId::Chain => "chain",
            EnvId::PointMass => "pointmass",
            EnvId::BanditMu => "bandit-mu",
            EnvId::RandomMdp => "random-mdp",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            EnvId::Gridworld5 => "5x5 deterministic gridworld, goal in the far corner, gamma 0.9",
            EnvId::Chain => "5-cell deterministic chain, reward 1 for acting at the end, gamma 0.9",
            EnvId::PointMass => "continuous 2-D point mass, forces in [-1,1]^2, 200-step episodes",
            EnvId::BanditMu => "one-shot bandit paying 0 or 1 with probability 1/2 (gap 0.5), gamma 0.9",
            EnvId::RandomMdp => "random stochastic MDP, 6 states x 3 actions, 2 successors each, gamma 0.9",
        }
    }

    pub fn is_finite(self) -> bool {
        !matches!(self, EnvId::PointMass)
    }

    /// The frozen finite MDP behind a finite id.
    pub fn finite_mdp(self) -> Option<Result<FiniteMdp, MdpError>> {
        match self {
            EnvId::Gridworld5 => Some(make_gridworld(5, 5, (4, 4), 0.0, 1.0)),
            EnvId::Chain => Some(make_chain(5, 0.9)),
            EnvId::BanditMu => Some(make_bandit_mu(0.9)),
            EnvId::RandomMdp => Some(make_random_mdp(6, 3, 2, 0.9, 20_240_601)),
            EnvId::PointMass => None,
        }
    }

    /// Episode cap used when sampling a finite id.
    pub fn episode_cap(self) -> usize {
        match self {
            EnvId::Gridworld5 => 100,
            EnvId::Chain => 50,
            EnvId::BanditMu => 1,
            EnvId::RandomMdp => 50,
            EnvId::PointMass => super::POINTMASS_EPISODE_CAP,
        }
    }

    pub fn finite_env(self, seed: u64) -> Option<Result<FiniteEnv, MdpError>> {
        self.finite_mdp()
            .map(|mdp| mdp.map(|m| FiniteEnv::new(m, self.episode_cap(), seed)))
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = UnknownEnv;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(id) = EnvId::ALL.iter().find(|id| id.as_str() == s) {
            return Ok(*id);
        }
        let suggestion = EnvId::ALL
            .iter()
            .map(|id| (strsim::levenshtein(s, id.as_str()), id.as_str()))
            .filter(|(d, _)| *d <= 3)
            .min_by_key(|(d, _)| *d)
            .map(|(_, name)| name);
        Err(UnknownEnv {
            given: s.to_string(),
            suggestion,
        })
    }
}
