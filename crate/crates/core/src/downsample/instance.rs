use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A downsampling point and ratio. Point 0 is the unmodified network and
/// carries no ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SDPointInstance {
    point: usize,
    ratio: Option<f64>,
}

impl SDPointInstance {
    pub const IDENTITY: SDPointInstance = SDPointInstance {
        point: 0,
        ratio: None,
    };

    pub fn new(point: usize, ratio: f64) -> Result<Self> {
        if point == 0 {
            return Ok(Self::IDENTITY);
        }
        check_ratio(ratio)?;
        Ok(SDPointInstance {
            point,
            ratio: Some(ratio),
        })
    }

    pub fn point(&self) -> usize {
        self.point
    }

    pub fn ratio(&self) -> Option<f64> {
        self.ratio
    }

    pub fn is_identity(&self) -> bool {
        self.point == 0
    }

    /// `p0` or `p{point}_r{ratio×100}`, e.g. `p7_r50`.
    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SDPointInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ratio {
            None => write!(f, "p{}", self.point),
            Some(r) => write!(f, "p{}_r{}", self.point, (r * 100.0).round() as u64),
        }
    }
}

impl FromStr for SDPointInstance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed instance id `{s}`"));
        let rest = s.strip_prefix('p').ok_or_else(bad)?;
        match rest.split_once("_r") {
            None => {
                let point: usize = rest.parse().map_err(|_| bad())?;
                if point != 0 {
                    return Err(bad());
                }
                Ok(Self::IDENTITY)
            }
            Some((p, r)) => {
                let point: usize = p.parse().map_err(|_| bad())?;
                let pct: u64 = r.parse().map_err(|_| bad())?;
                if point == 0 {
                    return Err(bad());
                }
                SDPointInstance::new(point, pct as f64 / 100.0)
            }
        }
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "downsampling ratio {r} outside (0, 1]"
        )))
    }
}

/// Every instance for `N` points and a ratio set: identity first, then by
/// ascending point and ascending ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCatalog {
    points: usize,
    ratios: Vec<f64>,
    instances: Vec<SDPointInstance>,
}

pub fn enumerate_instances(points: usize, ratios: &[f64]) -> Result<InstanceCatalog> {
    if ratios.is_empty() {
        return Err(Error::invalid("ratio set is empty"));
    }
    let mut sorted = ratios.to_vec();
    for &r in &sorted {
        check_ratio(r)?;
    }
    sorted.sort_by(f64::total_cmp);
    if sorted
        .windows(2)
        .any(|w| (w[0] * 100.0).round() == (w[1] * 100.0).round())
    {
        return Err(Error::invalid("ratio set has duplicate entries"));
    }
    let mut instances = Vec::with_capacity(points * sorted.len() + 1);
    instances.push(SDPointInstance::IDENTITY);
    for p in 1..=points {
        for &r in &sorted {
            instances.push(SDPointInstance::new(p, r)?);
        }
    }
    Ok(InstanceCatalog {
        points,
        ratios: sorted,
        instances,
    })
}

impl InstanceCatalog {
    pub fn points(&self) -> usize {
        self.points
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn instances(&self) -> &[SDPointInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn contains(&self, inst: &SDPointInstance) -> bool {
        self.instances.iter().any(|i| i.id() == inst.id())
    }

    pub fn find(&self, id: &str) -> Result<SDPointInstance> {
        self.instances
            .iter()
            .find(|i| i.id() == id)
            .copied()
            .ok_or_else(|| Error::UnknownInstance {
                id: id.to_string(),
                valid: self.ids().join(", "),
            })
    }

    pub fn ids(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.id()).collect()
    }

    /// Draws a point uniformly from `{0..N}`, then a ratio uniformly from the
    /// set. The ratio is drawn even for point 0 so that the generator advances
    /// identically whichever point comes up.
    pub fn sample(&self, rng: &mut Rng) -> SDPointInstance {
        let point = rng
            .uniform_choice(self.points + 1)
            .expect("non-empty point set");
        let ratio = self.ratios[rng
            .uniform_choice(self.ratios.len())
            .expect("non-empty ratio set")];
        if point == 0 {
            SDPointInstance::IDENTITY
        } else {
            SDPointInstance {
                point,
                ratio: Some(ratio),
            }
        }
    }
}
