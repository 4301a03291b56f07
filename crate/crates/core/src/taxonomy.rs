//! Fine → coarse class hierarchy and the coarse-mismatch gate of the
//! hierarchical classification loss.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Two-level class hierarchy. Serialized as
/// `{"fine_names": [...], "coarse_names": [...], "fine_to_coarse": [...]}`
/// where array index is the fine id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub fine_names: Vec<String>,
    pub coarse_names: Vec<String>,
    pub fine_to_coarse: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    FineUnmapped(usize),
    CoarseOutOfRange { fine: usize, coarse: usize },
    CoarseUnused(usize),
    FineNameCount { names: usize, classes: usize },
    MoreCoarseThanFine { n_coarse: usize, n_fine: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FineUnmapped(id) => write!(f, "fine {id} unmapped"),
            Violation::CoarseOutOfRange { fine, coarse } => {
                write!(f, "fine {fine} maps to out-of-range coarse {coarse}")
            }
            Violation::CoarseUnused(id) => write!(f, "coarse {id} unused"),
            Violation::FineNameCount { names, classes } => {
                write!(f, "{names} fine names for {classes} mapped fine classes")
            }
            Violation::MoreCoarseThanFine { n_coarse, n_fine } => {
                write!(f, "{n_coarse} coarse classes exceed {n_fine} fine classes")
            }
        }
    }
}

impl Taxonomy {
    /// Builds and validates a taxonomy.
    pub fn new(
        fine_names: Vec<String>,
        coarse_names: Vec<String>,
        fine_to_coarse: Vec<usize>,
    ) -> Result<Self> {
        let t = Taxonomy {
            fine_names,
            coarse_names,
            fine_to_coarse,
        };
        t.ensure_valid()?;
        Ok(t)
    }

    /// Every fine class is its own coarse class.
    pub fn identity(n: usize) -> Self {
        let names: Vec<String> = (0..n).map(|i| format!("class{i}")).collect();
        Taxonomy {
            fine_names: names.clone(),
            coarse_names: names,
            fine_to_coarse: (0..n).collect(),
        }
    }

    /// Taxonomy with generated names from a fine → coarse table.
    pub fn from_map(fine_to_coarse: Vec<usize>) -> Result<Self> {
        let n_coarse = fine_to_coarse.iter().max().map_or(0, |m| m + 1);
        Self::new(
            (0..fine_to_coarse.len()).map(|i| format!("fine{i}")).collect(),
            (0..n_coarse).map(|i| format!("coarse{i}")).collect(),
            fine_to_coarse,
        )
    }

    pub fn n_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn to_coarse(&self, fine: usize) -> Result<usize> {
        if fine >= self.n_fine() {
            return Err(Error::ClassOutOfRange {
                id: fine,
                n: self.n_fine(),
            });
        }
        self.fine_to_coarse
            .get(fine)
            .copied()
            .ok_or_else(|| Error::Taxonomy(format!("fine {fine} unmapped")))
    }

    /// `beta` when the two fine classes fall in different coarse classes,
    /// otherwise 0.
    pub fn gamma(&self, params: &HierLossParams, predicted_fine: usize, target_fine: usize) -> Result<f64> {
        let beta = params.effective_beta();
        if self.to_coarse(predicted_fine)? != self.to_coarse(target_fine)? {
            Ok(beta)
        } else {
            Ok(0.0)
        }
    }

    /// All structural problems; empty when the taxonomy is usable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n_fine = self.n_fine();
        let n_coarse = self.n_coarse();
        if self.fine_to_coarse.len() > n_fine {
            out.push(Violation::FineNameCount {
                names: n_fine,
                classes: self.fine_to_coarse.len(),
            });
        }
        for fine in self.fine_to_coarse.len()..n_fine {
            out.push(Violation::FineUnmapped(fine));
        }
        let mut used = vec![false; n_coarse];
        for (fine, &coarse) in self.fine_to_coarse.iter().enumerate() {
            match used.get_mut(coarse) {
                Some(u) => *u = true,
                None => out.push(Violation::CoarseOutOfRange { fine, coarse }),
            }
        }
        out.extend(
            used.iter()
                .enumerate()
                .filter(|(_, &u)| !u)
                .map(|(id, _)| Violation::CoarseUnused(id)),
        );
        if n_coarse > n_fine {
            out.push(Violation::MoreCoarseThanFine { n_coarse, n_fine });
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(Error::Taxonomy(msgs.join("; ")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Taxonomy = serde_json::from_str(s).map_err(|e| Error::json("taxonomy", e))?;
        t.ensure_valid()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the compact JSON form; stored in checkpoints.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("taxonomy serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Plain detector loss (`alpha = 1`, `beta = 0`).
    Normal,
    /// Classification term scaled by `alpha`.
    ClassWeighted,
    /// `alpha` scaling plus the coarse-mismatch penalty `beta`.
    Proposed,
}

impl LossVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(Self::Normal),
            "weighted" | "class_weighted" => Some(Self::ClassWeighted),
            "proposed" => Some(Self::Proposed),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub variant: LossVariant,
}

impl Default for HierLossParams {
    fn default() -> Self {
        Self::proposed(2.0, 1.0)
    }
}

impl HierLossParams {
    pub fn normal() -> Self {
        HierLossParams {
            alpha: 1.0,
            beta: 0.0,
            variant: LossVariant::Normal,
        }
    }

    pub fn class_weighted(alpha: f64) -> Self {
        HierLossParams {
            alpha,
            beta: 0.0,
            variant: LossVariant::ClassWeighted,
        }
    }

    pub fn proposed(alpha: f64, beta: f64) -> Self {
        HierLossParams {
            alpha,
            beta,
            variant: LossVariant::Proposed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(Error::LossParams(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::LossParams(format!("beta must be >= 0, got {}", self.beta)));
        }
        match self.variant {
            LossVariant::Normal if self.alpha != 1.0 || self.beta != 0.0 => Err(Error::LossParams(
                format!("normal loss takes alpha = 1 and beta = 0, got {} and {}", self.alpha, self.beta),
            )),
            LossVariant::ClassWeighted if self.beta != 0.0 => Err(Error::LossParams(format!(
                "class-weighted loss has no beta, got {}",
                self.beta
            ))),
            _ => Ok(()),
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.variant {
            LossVariant::Normal => 1.0,
            _ => self.alpha,
        }
    }

    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            LossVariant::Proposed => self.beta,
            _ => 0.0,
        }
    }

    /// Short row label, e.g. `weighted_a2.50`.
    pub fn label(&self) -> String {
        match self.variant {
            LossVariant::Normal => "normal".to_string(),
            LossVariant::ClassWeighted => format!("weighted_a{:.2}", self.alpha),
            LossVariant::Proposed => format!("proposed_a{:.2}_b{:.2}", self.alpha, self.beta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn to_coarse_examples() {
        let id = Taxonomy::identity(5);
        for k in 0..5 {
            assert_eq!(id.to_coarse(k).unwrap(), k);
        }
        let t = Taxonomy::from_map(vec![0, 0, 1]).unwrap();
        assert_eq!(t.to_coarse(1).unwrap(), 0);
        assert!(matches!(t.to_coarse(3), Err(Error::ClassOutOfRange { id: 3, n: 3 })));
    }

    #[test]
    fn myelocyte_metamyelocyte_share_coarse() {
        let t = Taxonomy::new(
            vec!["Myelocyte".into(), "Metamyelocyte".into(), "Lymphocyte".into()],
            vec!["Granulocytic (middle)".into(), "Lymphocytic".into()],
            vec![0, 0, 1],
        )
        .unwrap();
        assert_eq!(t.to_coarse(0).unwrap(), t.to_coarse(1).unwrap());
        assert_ne!(t.to_coarse(0).unwrap(), t.to_coarse(2).unwrap());
    }

    #[test]
    fn gamma_examples() {
        let t = Taxonomy::from_map(vec![0, 0, 1]).unwrap();
        let p = HierLossParams::proposed(2.0, 1.0);
        assert_eq!(t.gamma(&p, 1, 0).unwrap(), 0.0);
        assert_eq!(t.gamma(&p, 2, 0).unwrap(), 1.0);
        let zero = HierLossParams::proposed(2.0, 0.0);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(t.gamma(&zero, a, b).unwrap(), 0.0);
            }
        }
        assert!(t.gamma(&p, 3, 0).is_err());
    }

    #[test]
    fn validate_examples() {
        assert!(Taxonomy::identity(4).validate().is_empty());

        let missing = Taxonomy {
            fine_names: (0..4).map(|i| i.to_string()).collect(),
            coarse_names: vec!["a".into(), "b".into()],
            fine_to_coarse: vec![0, 1, 1],
        };
        let v = missing.validate();
        assert!(v.contains(&Violation::FineUnmapped(3)));
        assert_eq!(Violation::FineUnmapped(3).to_string(), "fine 3 unmapped");

        let unused = Taxonomy {
            fine_names: (0..6).map(|i| i.to_string()).collect(),
            coarse_names: (0..6).map(|i| i.to_string()).collect(),
            fine_to_coarse: vec![0, 1, 2, 3, 4, 4],
        };
        let v = unused.validate();
        assert_eq!(v, vec![Violation::CoarseUnused(5)]);
        assert_eq!(v[0].to_string(), "coarse 5 unused");
    }

    #[test]
    fn json_round_trip_and_hash() {
        let t = Taxonomy::from_map(vec![0, 0, 1, 2, 2]).unwrap();
        let back = Taxonomy::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.hash(), t.hash());
        assert_ne!(Taxonomy::identity(5).hash(), t.hash());
        assert!(Taxonomy::from_json(r#"{"fine_names":["a"],"coarse_names":["x","y"],"fine_to_coarse":[0]}"#).is_err());
    }

    #[test]
    fn loss_params_validation() {
        assert!(HierLossParams::normal().validate().is_ok());
        assert!(HierLossParams::class_weighted(2.5).validate().is_ok());
        assert!(HierLossParams::proposed(2.0, 1.0).validate().is_ok());
        assert!(HierLossParams::proposed(0.5, 1.0).validate().is_err());
        assert!(HierLossParams { beta: 1.0, ..HierLossParams::class_weighted(2.0) }.validate().is_err());
        assert!(HierLossParams { beta: 1.0, ..HierLossParams::normal() }.validate().is_err());
        assert_eq!(HierLossParams::class_weighted(2.5).label(), "weighted_a2.50");
    }

    proptest! {
        #[test]
        fn gamma_properties(map in prop::collection::vec(0usize..4, 1..12), beta in 0.0..5.0f64,
                            a in 0usize..12, b in 0usize..12) {
            // compact the coarse ids so the map is surjective
            let mut ids: Vec<usize> = map.clone();
            ids.sort_unstable();
            ids.dedup();
            let compact: Vec<usize> = map.iter().map(|c| ids.binary_search(c).unwrap()).collect();
            let t = Taxonomy::from_map(compact).unwrap();
            let n = t.n_fine();
            let (a, b) = (a % n, b % n);
            let p = HierLossParams::proposed(1.0, beta);
            let g = t.gamma(&p, a, b).unwrap();
            prop_assert_eq!(g, t.gamma(&p, b, a).unwrap());
            prop_assert!(g == 0.0 || g == beta);
            prop_assert_eq!(t.gamma(&p, a, a).unwrap(), 0.0);

            let id = Taxonomy::identity(n);
            let expected = if a != b { beta } else { 0.0 };
            prop_assert_eq!(id.gamma(&p, a, b).unwrap(), expected);
        }
    }
}
