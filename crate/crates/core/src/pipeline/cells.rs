use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{FusionVariant, GroupSet};
use crate::querysim::{Scenario, TargetCriterion};

/// A model selector such as `lstm`, `forest:app` or `fusion_c:app+time`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelSpec {
    Markov,
    Lstm,
    /// Forest on feature groups alone.
    Forest(GroupSet),
    Fusion(FusionVariant, GroupSet),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Markov => "markov",
            ModelSpec::Lstm => "lstm",
            ModelSpec::Forest(_) => "forest",
            ModelSpec::Fusion(v, _) => v.selector(),
        }
    }

    /// Feature groups, empty string for trajectory-only models.
    pub fn groups(&self) -> String {
        match self {
            ModelSpec::Forest(g) | ModelSpec::Fusion(_, g) => g.to_string(),
            _ => String::new(),
        }
    }

    pub fn uses_features(&self) -> bool {
        matches!(self, ModelSpec::Forest(_) | ModelSpec::Fusion(..))
    }

    pub fn needs_lstm(&self) -> bool {
        matches!(self, ModelSpec::Fusion(..))
    }

    /// Directory-safe form: `fusion_c-app+time`.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Markov | ModelSpec::Lstm => f.write_str(self.name()),
            ModelSpec::Forest(g) | ModelSpec::Fusion(_, g) => write!(f, "{}:{g}", self.name()),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, groups) = match s.split_once(':') {
            Some((n, g)) => (n, Some(g)),
            None => (s, None),
        };
        let bad = || Error::parse("model selector", s);
        match (name, groups) {
            ("markov", None) => Ok(ModelSpec::Markov),
            ("lstm", None) => Ok(ModelSpec::Lstm),
            ("forest", Some(g)) => {
                let g: GroupSet = g.parse()?;
                if g.is_empty() {
                    return Err(bad());
                }
                Ok(ModelSpec::Forest(g))
            }
            (v, Some(g)) => FusionVariant::from_selector(v)
                .map(|v| Ok(ModelSpec::Fusion(v, g.parse()?)))
                .unwrap_or_else(|| Err(bad())),
            (v, None) if FusionVariant::from_selector(v).is_some() => Err(Error::parse(
                "model selector",
                format!("{s} needs feature groups, e.g. {s}:app"),
            )),
            _ => Err(bad()),
        }
    }
}

/// One (scenario, model) unit of work in a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub scenario: Scenario,
    pub model: ModelSpec,
}

impl Cell {
    /// e.g. `m25_important@5__fusion_c-app`.
    pub fn id(&self) -> String {
        format!("{}__{}", self.scenario, self.model.slug())
    }

    pub fn dir(&self) -> String {
        format!("cells/{}", self.id())
    }

    pub fn file(&self, name: &str) -> String {
        format!("{}/{name}", self.dir())
    }
}

/// Parses `m25_successive`, `m25_important@5`, ...
pub fn parse_scenario(s: &str) -> Result<Scenario> {
    let bad = || Error::parse("scenario", s);
    let rest = s.strip_prefix('m').ok_or_else(bad)?;
    let (m, crit) = rest.split_once('_').ok_or_else(bad)?;
    Ok(Scenario {
        m: m.parse().map_err(|_| bad())?,
        criterion: crit.parse::<TargetCriterion>()?,
    })
}
