use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Source of the ensemble weights `v_m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VMode {
    /// Blend of the prior and the hyperprior learner's output.
    E3bm,
    /// The prior values themselves, trained by meta-gradient descent.
    Learnable,
    /// Values frozen from a `learnable` run.
    Optimal,
    /// `1 / M` for every epoch.
    Equal,
    /// `[0, ..., 0, 1]`.
    LastEpoch,
}

/// Source of the inner learning rates `alpha_m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AMode {
    E3bm,
    Learnable,
    Optimal,
    /// The configured fixed learning rate at every epoch.
    Fixed,
}

impl VMode {
    pub const ALL: [VMode; 5] = [VMode::E3bm, VMode::Learnable, VMode::Optimal, VMode::Equal, VMode::LastEpoch];

    pub fn label(self) -> &'static str {
        match self {
            VMode::E3bm => "v1",
            VMode::Learnable => "v2",
            VMode::Optimal => "v3",
            VMode::Equal => "v4",
            VMode::LastEpoch => "v5",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VMode::E3bm => "e3bm",
            VMode::Learnable => "learnable",
            VMode::Optimal => "optimal",
            VMode::Equal => "equal",
            VMode::LastEpoch => "last-epoch",
        }
    }
}

impl AMode {
    pub const ALL: [AMode; 4] = [AMode::E3bm, AMode::Learnable, AMode::Optimal, AMode::Fixed];

    pub fn label(self) -> &'static str {
        match self {
            AMode::E3bm => "a1",
            AMode::Learnable => "a2",
            AMode::Optimal => "a3",
            AMode::Fixed => "a4",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AMode::E3bm => "e3bm",
            AMode::Learnable => "learnable",
            AMode::Optimal => "optimal",
            AMode::Fixed => "fixed",
        }
    }
}

impl FromStr for VMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.label() == s)
            .ok_or_else(|| format!("unknown v mode `{s}`"))
    }
}

impl FromStr for AMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.label() == s)
            .ok_or_else(|| format!("unknown alpha mode `{s}`"))
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub v_mode: VMode,
    pub a_mode: AMode,
}

impl Ablation {
    pub const E3BM: Ablation = Ablation {
        v_mode: VMode::E3bm,
        a_mode: AMode::E3bm,
    };

    /// Plain MAML: fixed learning rate, last base-learner only.
    pub const MAML: Ablation = Ablation {
        v_mode: VMode::LastEpoch,
        a_mode: AMode::Fixed,
    };

    pub fn needs_frozen(self) -> bool {
        self.v_mode == VMode::Optimal || self.a_mode == AMode::Optimal
    }

    /// Whether the hyperprior learners take part in the forward pass.
    pub fn uses_hyperprior(self) -> bool {
        self.v_mode == VMode::E3bm || self.a_mode == AMode::E3bm
    }

    /// The nine cells compared in the ablation study: every v mode with a
    /// fixed learning rate, then every alpha mode with last-epoch weights.
    pub fn grid() -> Vec<Ablation> {
        let v_rows = VMode::ALL.into_iter().map(|v_mode| Ablation {
            v_mode,
            a_mode: AMode::Fixed,
        });
        let a_rows = AMode::ALL.into_iter().map(|a_mode| Ablation {
            v_mode: VMode::LastEpoch,
            a_mode,
        });
        v_rows.chain(a_rows).collect()
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::E3BM
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.v_mode.label(), self.a_mode.label())
    }
}

/// Per-epoch values recorded at the end of a `learnable` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenValues {
    pub alpha: Vec<f64>,
    pub v: Vec<f64>,
}
