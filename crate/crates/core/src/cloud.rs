//! Label taxonomy and labeled point clouds.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic label of points that take part in neither training nor evaluation.
pub const VOID_LABEL: u16 = u16::MAX;

/// Ordered thing and stuff class names. Global class ids enumerate the thing
/// classes first, then the stuff classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    thing_classes: Vec<String>,
    stuff_classes: Vec<String>,
}

impl LabelTaxonomy {
    pub fn new(thing_classes: Vec<String>, stuff_classes: Vec<String>) -> Result<Self> {
        if thing_classes.is_empty() || stuff_classes.is_empty() {
            return Err(Error::Config(
                "taxonomy needs at least one thing and one stuff class".to_string(),
            ));
        }
        let mut seen = BTreeMap::new();
        for name in thing_classes.iter().chain(&stuff_classes) {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::Config(format!("duplicate class name {name:?}")));
            }
        }
        if thing_classes.len() + stuff_classes.len() >= VOID_LABEL as usize {
            return Err(Error::Config("too many classes".to_string()));
        }
        Ok(Self {
            thing_classes,
            stuff_classes,
        })
    }

    /// Three thing and three stuff classes used by the synthetic scenes.
    pub fn synthetic() -> Self {
        let s = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self::new(
            s(&["car", "pedestrian", "pole"]),
            s(&["ground", "building", "vegetation"]),
        )
        .expect("static taxonomy is valid")
    }

    pub fn thing_classes(&self) -> &[String] {
        &self.thing_classes
    }

    pub fn stuff_classes(&self) -> &[String] {
        &self.stuff_classes
    }

    pub fn n_things(&self) -> usize {
        self.thing_classes.len()
    }

    pub fn n_stuff(&self) -> usize {
        self.stuff_classes.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_things() + self.n_stuff()
    }

    pub fn is_thing(&self, class: u16) -> bool {
        (class as usize) < self.n_things()
    }

    pub fn is_stuff(&self, class: u16) -> bool {
        let c = class as usize;
        c >= self.n_things() && c < self.n_classes()
    }

    /// Global class id of the `i`-th stuff class.
    pub fn stuff_class_id(&self, i: usize) -> u16 {
        (self.n_things() + i) as u16
    }

    pub fn class_name(&self, class: u16) -> Option<&str> {
        let c = class as usize;
        if c < self.n_things() {
            Some(&self.thing_classes[c])
        } else {
            self.stuff_classes.get(c - self.n_things()).map(String::as_str)
        }
    }

    pub fn counts(&self) -> (u16, u16) {
        (self.n_things() as u16, self.n_stuff() as u16)
    }
}

/// Points with coordinates (meters), intensity in `[0, 1]`, semantic class and
/// instance id (0 = no instance).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledPointCloud {
    pub positions: Vec<[f32; 3]>,
    pub intensity: Vec<f32>,
    pub semantic: Vec<u16>,
    pub instance: Vec<u32>,
    pub n_thing_classes: u16,
    pub n_stuff_classes: u16,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_thing(&self, class: u16) -> bool {
        class < self.n_thing_classes
    }

    pub fn n_classes(&self) -> u16 {
        self.n_thing_classes + self.n_stuff_classes
    }

    /// Checks every invariant and reports the first offending point.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Validation {
                index: 0,
                reason: "cloud has no points".to_string(),
            });
        }
        if self.intensity.len() != n || self.semantic.len() != n || self.instance.len() != n {
            return Err(Error::Validation {
                index: n.min(self.intensity.len()).min(self.semantic.len()).min(self.instance.len()),
                reason: "attribute arrays differ in length".to_string(),
            });
        }
        if self.n_thing_classes == 0 || self.n_stuff_classes == 0 {
            return Err(Error::Validation {
                index: 0,
                reason: "taxonomy needs at least one thing and one stuff class".to_string(),
            });
        }
        let mut owner: BTreeMap<u32, u16> = BTreeMap::new();
        for i in 0..n {
            let bad = |reason: String| Err(Error::Validation { index: i, reason });
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return bad("non-finite coordinate".to_string());
            }
            let it = self.intensity[i];
            if !(0.0..=1.0).contains(&it) {
                return bad(format!("intensity {it} outside [0, 1]"));
            }
            let sem = self.semantic[i];
            let inst = self.instance[i];
            if sem != VOID_LABEL && sem >= self.n_classes() {
                return bad(format!("semantic class {sem} out of range"));
            }
            if inst > 0 {
                if !self.is_thing(sem) {
                    return bad(format!("instance {inst} on non-thing class {sem}"));
                }
                match owner.get(&inst) {
                    Some(&c) if c != sem => {
                        return bad(format!("instance {inst} spans classes {c} and {sem}"));
                    }
                    Some(_) => {}
                    None => {
                        owner.insert(inst, sem);
                    }
                }
            }
        }
        Ok(())
    }

    /// Distinct instance ids with their class, ascending.
    pub fn instances(&self) -> Vec<(u32, u16)> {
        let mut owner = BTreeMap::new();
        for (&inst, &sem) in self.instance.iter().zip(&self.semantic) {
            if inst > 0 {
                owner.entry(inst).or_insert(sem);
            }
        }
        owner.into_iter().collect()
    }

    pub fn positions_f64(&self) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny() -> LabeledPointCloud {
        LabeledPointCloud {
            positions: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            intensity: vec![0.1, 0.5, 1.0],
            semantic: vec![0, 0, 3],
            instance: vec![1, 1, 0],
            n_thing_classes: 3,
            n_stuff_classes: 3,
        }
    }

    #[test]
    fn valid_cloud_passes() {
        tiny().validate().unwrap();
    }

    #[test]
    fn instance_on_stuff_point_is_rejected() {
        let mut c = tiny();
        c.instance[2] = 4;
        match c.validate() {
            Err(Error::Validation { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn instance_spanning_classes_is_rejected() {
        let mut c = tiny();
        c.semantic[1] = 1;
        assert!(matches!(c.validate(), Err(Error::Validation { index: 1, .. })));
    }

    #[test]
    fn taxonomy_ids() {
        let t = LabelTaxonomy::synthetic();
        assert_eq!(t.n_classes(), 6);
        assert!(t.is_thing(2));
        assert!(t.is_stuff(3));
        assert_eq!(t.stuff_class_id(0), 3);
        assert_eq!(t.class_name(5), Some("vegetation"));
        assert!(LabelTaxonomy::new(vec!["a".into()], vec!["a".into()]).is_err());
        assert!(LabelTaxonomy::new(vec![], vec!["a".into()]).is_err());
    }
}
