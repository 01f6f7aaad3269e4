use std::fmt;

use serde::{Deserialize, Serialize};

/// Accounting bucket for multiply-accumulates and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Stem,
    MobilePointwise,
    MobileDepthwise,
    BridgeIn,
    BridgeOut,
    FormerMhsa,
    FormerFfn,
    DyreluGenerator,
    Head,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Stem,
        Category::MobilePointwise,
        Category::MobileDepthwise,
        Category::BridgeIn,
        Category::BridgeOut,
        Category::FormerMhsa,
        Category::FormerFfn,
        Category::DyreluGenerator,
        Category::Head,
    ];
    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Stem => "stem",
            Category::MobilePointwise => "mobile_pointwise",
            Category::MobileDepthwise => "mobile_depthwise",
            Category::BridgeIn => "bridge_in",
            Category::BridgeOut => "bridge_out",
            Category::FormerMhsa => "former_mhsa",
            Category::FormerFfn => "former_ffn",
            Category::DyreluGenerator => "dyrelu_generator",
            Category::Head => "head",
        }
    }

    /// Categories that exist only because of the global tokens: both bridges,
    /// the Former block, and the token-driven activation generators.
    pub fn is_token_side(self) -> bool {
        matches!(
            self,
            Category::BridgeIn
                | Category::BridgeOut
                | Category::FormerMhsa
                | Category::FormerFfn
                | Category::DyreluGenerator
        )
    }

    pub fn is_mobile(self) -> bool {
        matches!(self, Category::MobilePointwise | Category::MobileDepthwise)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-category counter, used both for MAC tallies and parameter census.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally([u64; Category::COUNT]);

impl Tally {
    pub fn add(&mut self, cat: Category, n: u64) {
        self.0[cat.index()] += n;
    }

    pub fn get(&self, cat: Category) -> u64 {
        self.0[cat.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Category, u64)> + '_ {
        Category::ALL.iter().map(move |&c| (c, self.get(c)))
    }
}
