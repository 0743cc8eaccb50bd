use std::fmt;
use std::str::FromStr;

use crate::data::Species;
use crate::error::{Error, Result};
use crate::training::SelectionCriterion;

/// The transfer settings: which species trains, which validation set picks
/// the checkpoint, and which species is tested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    M2m,
    M2hVm,
    M2hVh,
    H2h,
    Mh2h,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::M2m,
        Scenario::M2hVm,
        Scenario::M2hVh,
        Scenario::H2h,
        Scenario::Mh2h,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scenario::M2m => "M2M",
            Scenario::M2hVm => "M2H_VM",
            Scenario::M2hVh => "M2H_VH",
            Scenario::H2h => "H2H",
            Scenario::Mh2h => "MH2H",
        }
    }

    pub fn train_species(self) -> &'static [Species] {
        match self {
            Scenario::M2m | Scenario::M2hVm | Scenario::M2hVh => &[Species::Mouse],
            Scenario::H2h => &[Species::Human],
            Scenario::Mh2h => &[Species::Mouse, Species::Human],
        }
    }

    /// Validation sets recorded in the history. Both M2H variants track both
    /// species so they can share a single training run.
    pub fn tracked_species(self) -> &'static [Species] {
        match self {
            Scenario::M2m => &[Species::Mouse],
            Scenario::M2hVm | Scenario::M2hVh => &[Species::Mouse, Species::Human],
            Scenario::H2h => &[Species::Human],
            Scenario::Mh2h => &[Species::Mouse, Species::Human],
        }
    }

    pub fn criterion(self) -> SelectionCriterion {
        match self {
            Scenario::M2m | Scenario::M2hVm => SelectionCriterion::Vm,
            Scenario::M2hVh | Scenario::H2h | Scenario::Mh2h => SelectionCriterion::Vh,
        }
    }

    pub fn test_species(self) -> Species {
        match self {
            Scenario::M2m => Species::Mouse,
            _ => Species::Human,
        }
    }

    /// Scenarios with the same key reuse one training run.
    pub fn training_key(self) -> &'static str {
        match self {
            Scenario::M2m => "M2M",
            Scenario::M2hVm | Scenario::M2hVh => "M2H",
            Scenario::H2h => "H2H",
            Scenario::Mh2h => "MH2H",
        }
    }

    /// Every species whose data the scenario reads, in any split.
    pub fn required_species(self) -> Vec<Species> {
        let mut v: Vec<Species> = self
            .train_species()
            .iter()
            .chain(self.tracked_species())
            .copied()
            .chain([self.test_species()])
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = |t: &str| -> String {
            t.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_ascii_uppercase()
        };
        let want = key(s);
        Scenario::ALL
            .into_iter()
            .find(|sc| key(sc.id()) == want)
            .ok_or_else(|| {
                Error::Scenario(format!(
                    "unknown scenario '{s}' (expected one of M2M, M2H_VM, M2H_VH, H2H, MH2H)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for sc in Scenario::ALL {
            assert_eq!(sc.id().parse::<Scenario>().unwrap(), sc);
        }
        assert_eq!("m2h_vh".parse::<Scenario>().unwrap(), Scenario::M2hVh);
        assert_eq!("MH2H".parse::<Scenario>().unwrap(), Scenario::Mh2h);
        assert_eq!("M&H2H".parse::<Scenario>().unwrap(), Scenario::Mh2h);
        assert!("M2H".parse::<Scenario>().is_err());
        assert!("H2M".parse::<Scenario>().is_err());
    }

    #[test]
    fn species_invariants() {
        for sc in Scenario::ALL {
            let train = sc.train_species();
            match sc {
                Scenario::M2hVm | Scenario::M2hVh => assert_eq!(train, [Species::Mouse]),
                Scenario::H2h => assert_eq!(train, [Species::Human]),
                Scenario::Mh2h => assert_eq!(train.len(), 2),
                Scenario::M2m => {
                    assert_eq!(train, [Species::Mouse]);
                    assert_eq!(sc.test_species(), Species::Mouse);
                }
            }
            if sc != Scenario::M2m {
                assert_eq!(sc.test_species(), Species::Human);
            }
        }
        assert_eq!(Scenario::M2hVm.criterion(), SelectionCriterion::Vm);
        assert_eq!(Scenario::M2hVh.criterion(), SelectionCriterion::Vh);
        assert_eq!(Scenario::M2hVm.training_key(), Scenario::M2hVh.training_key());
    }
}
